//! Multimodal surrogate for 2D fluid dynamics: gridded trajectories are
//! patch-encoded, governing equations are tokenized in Polish notation, both
//! modalities are fused with attention, and a query-based decoder predicts
//! future frames. Ships with the reverse-mode tensor engine, the synthetic
//! data solvers, and the training/evaluation harness the model is built on.

pub mod datagen;
pub mod model;
pub mod patching;
pub mod rng;
pub mod symbolic;
pub mod tensor;
pub mod train;
