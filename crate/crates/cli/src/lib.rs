//! Configuration, run manifests, pipeline stages and report emission for
//! the `stereoprobe` command.

pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;
