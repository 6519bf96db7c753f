//! Library surface of the batch tool, reused by its integration tests:
//! job configuration, on-disk formats, artifact emission and the mode
//! implementations.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod modes;
pub mod stack_io;
