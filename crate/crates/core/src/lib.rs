//! Multimodal puzzle reasoner trained on frozen-backbone embeddings:
//! autodiff tensors, the model, AdamW, the dataset container and the
//! training/evaluation harness.

pub mod data;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod train;
