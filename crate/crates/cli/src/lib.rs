//! Library surface of the `prose-fd` binary, exposed so integration tests
//! (and downstream tooling) can reuse the config resolver and the PGM codec.

pub mod commands;
pub mod config;
pub mod data;
pub mod errors;
pub mod manifest;
pub mod pgm;
