//! Experiment pipeline.
