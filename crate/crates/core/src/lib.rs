//! Layer-wise retrieval toolkit: spectral analysis of transformer weights,
//! a small seeded language model with hidden-state capture, logit lens
//! probing, sparse and dense retrieval, a trainable representation
//! retriever and the end-to-end multi-hop pipeline built from them.

pub mod linalg;
pub mod logit_lens;
pub mod matrix;
pub mod pipeline;
pub mod rep_retriever;
pub mod retrieval;
pub mod seeds;
pub mod synth;
pub mod td;
pub mod tensor_store;
pub mod text;
pub mod toy_lm;

pub use matrix::Matrix;
pub use tensor_store::TensorStore;
