//! Virtual-sensor service: command session, telemetry codec, pacing, persistence and
//! the WebSocket server.

pub mod pacing;
pub mod persist;
pub mod protocol;
pub mod server;
pub mod session;

pub use pacing::Profile;
pub use server::{serve, start, RunningServer, ServeError, ServerConfig};
pub use session::{Session, SessionConfig};
