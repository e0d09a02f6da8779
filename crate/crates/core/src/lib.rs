//! Robust-training toolkit: multi-view augmentation (clean / augment-and-mix /
//! adversarial), mixed-sample augmentation applied consistently across views,
//! a composite soft-CE + dual-JS training objective, and a robustness
//! evaluation harness (white-box and transfer attacks, corruptions,
//! occlusion).
//!
//! The compute core is a small from-scratch tensor/layer stack with manual
//! backpropagation, kept deliberately free of framework dependencies so every
//! gradient path can be verified against finite differences.

pub mod adversarial;
pub mod augment;
pub mod data;
pub mod error;
pub mod io;
pub mod losses;
pub mod mix;
pub mod model;
pub mod rng;
pub mod robustness;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
