pub trait Plant {}
pub struct TrajectoryLog;
