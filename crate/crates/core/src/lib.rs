//! DeltaMIL: gated delta-rule multiple-instance learning over whole-slide
//! patch bags.

pub mod array;
pub mod block;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod grad;
pub mod harness;
pub mod kernel;
pub mod locality;
pub mod metrics;
pub mod model;
pub mod par;
pub mod saliency;
pub mod synth;
pub mod trainer;

pub use array::NumArray;
pub use error::{Error, Result};
pub use par::Exec;
