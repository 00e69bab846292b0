//! Dataset distillation by gradient matching with sequential subset
//! matching, teacher trajectories and the coupling / easy-hard diagnostics.

mod error;

pub mod data;
pub mod diagnostics;
pub mod matching;
pub mod models;
pub mod rng;
pub mod seqmatch;
pub mod store;
pub mod teacher;

pub use error::{Error, Result};
pub use seqmatch_tensor as tensor;
