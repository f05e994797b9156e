//! Command implementations, run configs and file formats behind the `rkflow`
//! binary. Everything lives in the library so integration tests can drive
//! commands in-process and compare artifacts byte for byte.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod svg;
pub mod tabfile;
