//! Command-line workbench for geometry-aware transfer attacks. The numerical
//! work lives in `geoattack-core`; this crate adds file formats, experiment
//! configs, parallel drivers and the CLI.

pub use geoattack_core as core;

pub mod cli;
pub mod config;
pub mod container;
pub mod output;
pub mod pipeline;
