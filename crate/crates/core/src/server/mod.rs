//! Wire protocol, sessions, persistence and the HTTP surface.

pub mod events;
pub mod hub;
pub mod protocol;
pub mod config;
pub mod http;
