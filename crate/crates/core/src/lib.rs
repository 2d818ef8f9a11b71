//! Coarse-to-fine LiDAR localization on a topological map.

pub mod cli;
pub mod cloud;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod kdtree;
pub mod mcl;
pub mod pipeline;
pub mod plot;
pub mod registration;
pub mod sim;
pub mod topo_map;

pub use error::{LockitError, Result};
