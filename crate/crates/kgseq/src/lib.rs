//! File formats, configuration, checkpoints, the synthetic generator and the
//! end-to-end pipeline behind the `kgseq` binary.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
