//! Command-line entry points and the live negotiation service.

pub mod commands;
pub mod config;
pub mod live;
pub mod service;
