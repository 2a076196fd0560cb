//! Dense-matrix computation with reverse-mode differentiation, stable
//! reductions, and the Adam update.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Max-subtracted softmax over a vector. `-inf` entries are the masking
/// sentinel and map to exactly zero; all-`-inf` input is an error.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    graph::softmax_kernel(v)
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("cosine_sim: length mismatch"));
    }
    let na = tensor::dot(a, a).sqrt();
    let nb = tensor::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine_sim: degenerate vector"));
    }
    Ok(tensor::dot(a, b) / (na * nb))
}

/// Three-layer perceptron weights: two ReLU hidden layers and a linear top.
/// Vectors run through `y = W^T x + b` per layer.
#[derive(Clone, Copy)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

/// Apply the two-hidden-layer MLP to a rank-1 input node.
pub fn mlp_vec(g: &mut Graph, x: NodeId, m: &MlpNodes) -> NodeId {
    let h1 = affine_vec(g, x, m.w1, m.b1);
    let h1 = g.relu(h1);
    let h2 = affine_vec(g, h1, m.w2, m.b2);
    let h2 = g.relu(h2);
    affine_vec(g, h2, m.w3, m.b3)
}

/// Apply the two-hidden-layer MLP to a batch of row vectors.
pub fn mlp_rows(g: &mut Graph, x: NodeId, m: &MlpNodes) -> NodeId {
    let h1 = g.matmul(x, m.w1);
    let h1 = g.add_bias(h1, m.b1);
    let h1 = g.relu(h1);
    let h2 = g.matmul(h1, m.w2);
    let h2 = g.add_bias(h2, m.b2);
    let h2 = g.relu(h2);
    let h3 = g.matmul(h2, m.w3);
    g.add_bias(h3, m.b3)
}

/// `W^T x + b` for a rank-1 `x`, with `W` stored as `(in, out)`.
pub fn affine_vec(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let y = g.tmatvec(w, x);
    g.add(y, b)
}
