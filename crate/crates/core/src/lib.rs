//! Compression toolkit for small identity-embedding CNNs: unstructured
//! pruning, knowledge distillation, open-set verification metrics, an
//! analytical cost model and a latency benchmarker.

pub mod autodiff;
pub mod benchhub;
pub mod cli;
pub mod distiller;
pub mod error;
pub mod json;
pub mod netlib;
pub mod optim;
pub mod pruner;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod verifier;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
