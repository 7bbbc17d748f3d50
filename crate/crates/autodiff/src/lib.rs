//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass and
//! replays them in reverse to produce gradients. Trainable tensors live in a
//! [`ParamStore`] and are pulled into a graph as leaves; the resulting
//! [`ParamGrads`] feed an [`Adam`] optimiser.
//!
//! The engine only carries the operations needed by small convolutional
//! agents: dense and convolutional layers, batch normalisation, pooling,
//! softmax families, cosine similarity and cross-entropy.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
pub mod par;
mod params;
mod rng;
mod tensor;

pub use checkpoint::{read_checkpoint, read_checkpoint_file, write_checkpoint, write_checkpoint_file, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_params, GradCheck};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamGrads, ParamId, ParamStore, RunningStatUpdate};
pub use rng::{mix_seed, Rng};
pub use tensor::Tensor;

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
