//! Entity-graph encoding: a 2-layer single-head graph attention network over
//! the entity graph, producing the `|E| x d` entity embedding matrix.
//!
//! Triplets are treated as undirected for message passing and relation types
//! do not enter the messages, so the encoding is invariant to relation-id
//! relabeling. Self-loops are always added, giving every node nonempty
//! attention support. A node's output depends only on its 2-hop
//! neighborhood.

use std::collections::BTreeSet;
use std::sync::Arc;

use crate::data::{EntityGraph, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::model::{names, Model};
use crate::numerics::{Graph, NodeId, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Which nonlinearity a layer applies to its aggregated output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Identity,
}

/// One attention layer's parameters: a projection and the attention vector
/// split as `[a_dst ; a_src]`.
#[derive(Clone, Debug)]
pub struct GatLayerParams {
    /// `(d_in, d_out)` projection.
    pub weight: Tensor,
    /// `[2 * d_out]` attention vector.
    pub attn: Tensor,
    pub activation: Activation,
}

impl GatLayerParams {
    pub fn validate(&self) -> Result<()> {
        let d_out = self.weight.cols();
        if self.attn.len() != 2 * d_out {
            return Err(Error::invalid(format!(
                "attention vector length {} must be 2 * d_out = {}",
                self.attn.len(),
                2 * d_out
            )));
        }
        if !self.weight.all_finite() || !self.attn.all_finite() {
            return Err(Error::invalid("GAT parameters must be finite"));
        }
        Ok(())
    }
}

/// Undirected adjacency with self-loops, stored as edge lists sorted by
/// `(dst, src)` so each node's incoming edges form one contiguous segment.
#[derive(Clone, Debug)]
pub struct Adjacency {
    pub n_nodes: usize,
    /// Destination-sorted edge endpoints.
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    /// Segment pointers: edges of node i live in `seg_ptr[i]..seg_ptr[i+1]`.
    pub seg_ptr: Arc<Vec<usize>>,
}

impl Adjacency {
    /// Build from triplets: both directions of every triplet plus one
    /// self-loop per node, deduplicated.
    pub fn from_graph(graph: &EntityGraph) -> Self {
        Self::from_edges(
            graph.n_entities,
            graph.triplets.iter().map(|&(h, _, t)| (h as usize, t as usize)),
        )
    }

    pub fn from_edges(n_nodes: usize, edges: impl Iterator<Item = (usize, usize)>) -> Self {
        let mut set: BTreeSet<(usize, usize)> = BTreeSet::new();
        for i in 0..n_nodes {
            set.insert((i, i));
        }
        for (a, b) in edges {
            set.insert((a, b));
            set.insert((b, a));
        }
        let mut src = Vec::with_capacity(set.len());
        let mut dst = Vec::with_capacity(set.len());
        // BTreeSet iterates (dst, src) sorted, keeping segments contiguous.
        for (d, s) in set {
            dst.push(d);
            src.push(s);
        }
        let mut seg_ptr = vec![0usize; n_nodes + 1];
        for &d in &dst {
            seg_ptr[d + 1] += 1;
        }
        for i in 0..n_nodes {
            seg_ptr[i + 1] += seg_ptr[i];
        }
        Adjacency {
            n_nodes,
            src: Arc::new(src),
            dst: Arc::new(dst),
            seg_ptr: Arc::new(seg_ptr),
        }
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

/// Append one attention layer to a compute graph; returns the output node
/// and the per-edge attention-weight node.
///
/// Per node i: `out_i = act( sum_{j in N(i) u {i}} alpha_ij * (W x_j) )` with
/// `alpha` the softmax over leaky-ReLU attention logits of i's neighborhood.
pub fn gat_layer_nodes_with_alpha(
    g: &mut Graph,
    features: NodeId,
    adj: &Adjacency,
    weight: NodeId,
    attn: NodeId,
    activation: Activation,
) -> (NodeId, NodeId) {
    let d_out = g.value(weight).cols();
    let projected = g.matmul(features, weight);
    let a_dst = g.gather_rows(attn, Arc::new((0..d_out).collect()));
    let a_src = g.gather_rows(attn, Arc::new((d_out..2 * d_out).collect()));
    let dst_score = g.matvec(projected, a_dst);
    let src_score = g.matvec(projected, a_src);
    let e_dst = g.gather_rows(dst_score, adj.dst.clone());
    let e_src = g.gather_rows(src_score, adj.src.clone());
    let logits_raw = g.add(e_dst, e_src);
    let logits = g.leaky_relu(logits_raw, LEAKY_SLOPE);
    let alpha = g.segment_softmax(logits, adj.seg_ptr.clone());
    let messages = g.gather_rows(projected, adj.src.clone());
    let summed = g.segment_weighted_sum(alpha, messages, adj.seg_ptr.clone());
    let out = match activation {
        Activation::Elu => g.elu(summed),
        Activation::Identity => summed,
    };
    (out, alpha)
}

pub fn gat_layer_nodes(
    g: &mut Graph,
    features: NodeId,
    adj: &Adjacency,
    weight: NodeId,
    attn: NodeId,
    activation: Activation,
) -> NodeId {
    gat_layer_nodes_with_alpha(g, features, adj, weight, attn, activation).0
}

/// One layer evaluated on plain values; also returns the attention weights
/// in edge order for inspection.
pub fn gat_layer(
    features: &Tensor,
    adj: &Adjacency,
    params: &GatLayerParams,
) -> Result<(Tensor, Vec<f64>)> {
    params.validate()?;
    if features.cols() != params.weight.rows() {
        return Err(Error::invalid(format!(
            "feature dim {} does not match layer input {}",
            features.cols(),
            params.weight.rows()
        )));
    }
    let mut g = Graph::new();
    let x = g.input(features.clone());
    let w = g.input(params.weight.clone());
    let a = g.input(params.attn.clone());
    let (out, alpha) = gat_layer_nodes_with_alpha(&mut g, x, adj, w, a, params.activation);
    let alpha_vals = g.value(alpha).data().to_vec();
    let out_vals = g.value(out).clone();
    if !out_vals.all_finite() {
        return Err(Error::invalid("gat_layer produced non-finite output"));
    }
    Ok((out_vals, alpha_vals))
}

/// Append the full 2-layer encoder (or the lookup table in "w/o GL" mode) to
/// a compute graph. Returns the `|E| x d` embedding node; parameter leaves
/// are registered through `leaf`.
pub fn encoder_nodes(
    g: &mut Graph,
    model: &Model,
    adj: &Adjacency,
    features: &Tensor,
    mut leaf: impl FnMut(&mut Graph, &str) -> NodeId,
) -> NodeId {
    if model.cfg.use_graph_encoder {
        let x = g.input(features.clone());
        let w1 = leaf(g, names::GAT_L1_W);
        let a1 = leaf(g, names::GAT_L1_A);
        let h1 = gat_layer_nodes(g, x, adj, w1, a1, Activation::Elu);
        let w2 = leaf(g, names::GAT_L2_W);
        let a2 = leaf(g, names::GAT_L2_A);
        gat_layer_nodes(g, h1, adj, w2, a2, Activation::Identity)
    } else {
        leaf(g, names::ENTITY_TABLE)
    }
}

/// Encode all entities with the model's current parameters: exactly two
/// stacked attention layers over the entity graph (ELU between them), or the
/// learned lookup table when graph learning is ablated.
pub fn encode_entities(model: &Model, graph: &EntityGraph) -> Result<Tensor> {
    if graph.features.cols() != FEATURE_DIM {
        return Err(Error::invalid(format!(
            "expected {FEATURE_DIM}-dim entity features, got {}",
            graph.features.cols()
        )));
    }
    if model.cfg.n_entities != graph.n_entities {
        return Err(Error::invalid(format!(
            "model built for {} entities, graph has {}",
            model.cfg.n_entities, graph.n_entities
        )));
    }
    let adj = Adjacency::from_graph(graph);
    let mut g = Graph::new();
    let params = &model.params;
    let out = encoder_nodes(&mut g, model, &adj, &graph.features, |g, name| {
        g.input(params.get(name).clone())
    });
    let h = g.value(out).clone();
    if !h.all_finite() {
        return Err(Error::invalid("encoder produced non-finite embeddings"));
    }
    Ok(h)
}
