//! Command implementations and the HTTP service behind the `mvrelight` binary.

pub mod commands;
pub mod multipart;
pub mod relighter;
pub mod server;

pub use relighter::{Relighter, Relit};
