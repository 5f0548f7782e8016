pub struct MpcConfig;
pub struct ReferenceTrajectory;
pub struct TighteningMode;
