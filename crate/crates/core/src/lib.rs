//! Controllers, simulator and scenario runner for a wire-suspended
//! wheeled-legged robot.

pub mod control;
pub mod error;
pub mod geometry;
pub mod leg;
pub mod modes;
pub mod scenario;
pub mod session;
pub mod sim;
pub mod teleop;
pub mod tension;
pub mod wire_control;
