//! Pipeline orchestration, model querying, the annotation API and run
//! bookkeeping around `wmbench-core`.

pub mod client;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod server;
pub mod store;

pub use error::{HarnessError, Result, Stage};
