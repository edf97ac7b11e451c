//! Filesystem side of the chest X-ray models: metadata CSV, PNG
//! preprocessing, datasets, checkpoints, training runs and reports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod fixtures;
pub mod image_io;
pub mod metadata;
pub mod predict;
pub mod report;
pub mod trainer;

pub use vdsnet_core as core;
