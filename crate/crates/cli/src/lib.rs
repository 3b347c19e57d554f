//! Library surface of the platedvi command-line tool: built-in example
//! models, CSV ingestion, checkpoint serialization, and the subcommand
//! implementations the `platedvi` binary dispatches to.

pub mod checkpoint;
pub mod commands;
pub mod data;
pub mod models;

pub use commands::Failure;
