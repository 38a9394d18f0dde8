//! Teleop service: NDJSON frames over TCP.

pub mod protocol;
pub mod server;

pub use protocol::{parse_command, ServerFrame, StateFrame, PROTOCOL};
pub use server::{serve_teleop, ServeError, ServeOptions, TeleopServer};
