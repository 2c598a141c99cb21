//! Sketched training: minimize `E[f(s + S(x - s))]` over random diagonal
//! sketches `S`, with solvers, reference oracles and dataset utilities.

pub mod data;
pub mod distributed;
pub mod error;
pub mod linalg;
pub mod objective;
pub mod oracle;
pub mod record;
pub mod rng;
pub mod sketch;
pub mod solvers;

pub use error::{Error, Result};
