#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod encoder;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kg;
pub mod masks;
pub mod objective;
pub mod optim;
pub mod params;
pub mod paths;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
