//! MPC controllers.
pub mod config;
pub mod runner;
