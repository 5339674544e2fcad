//! Construction and scoring of scene-graph world-modeling benchmarks.
//!
//! Trajectories of scene graphs are segmented into key frames, paths through
//! the resulting visibility DAG are sampled uniformly, and each path becomes a
//! forward or inverse ordering question scored against the symbolic state.

pub mod error;
pub mod kfts;
pub mod qa;
pub mod verify;
pub mod analysis;
pub mod scenegraph;
pub mod segment;
pub mod synthetic;
pub mod agreement;

pub use error::{Error, Result};
