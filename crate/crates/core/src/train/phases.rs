//! The phased forward/backward engine shared by pre-training and unfrozen
//! fine-tuning.
//!
//! A batch loss couples all records through the contrastive term and the
//! batch-mean cross-entropy, but the per-user tower computations are
//! independent given the entity matrix. Each step therefore runs as:
//!
//!   1. encoder graph forward -> entity matrix `H`
//!   2. per-user tower graphs forward (data-parallel, ordered)
//!   3. one head graph over batch records -> loss; backward
//!   4. per-user tower backward seeded with the head's interest gradients
//!      (data-parallel), reduced in fixed user order
//!   5. encoder backward seeded with the summed entity-matrix gradient
//!
//! Every reduction runs over ordered collections, so results are
//! bit-identical across thread counts and with the sequential fallback.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::data::BundleCore;
use crate::error::Result;
use crate::graph_encoder::{encoder_nodes, Adjacency};
use crate::model::{names, GradAccum, Model};
use crate::numerics::{Gradients, Graph, NodeId, Tensor};
use crate::parallel::ordered_map;
use crate::tower::interests_nodes;

/// Valid entity positions of one user's sequence, static across a run.
///
/// The padded `UserSequence` computation is bit-identical on the compacted
/// valid rows: padded rows are exact zeros with `-inf` logits, so they
/// contribute exactly 0.0 to every softmax denominator and weighted sum.
/// Training therefore runs on the compact layout.
#[derive(Clone, Debug)]
pub struct UserLayout {
    /// Entity id per valid position, per-domain blocks concatenated in
    /// ascending domain order, each truncated to the most recent `seq_cap`.
    pub entity_ids: Vec<u32>,
}

impl UserLayout {
    pub fn has_valid(&self) -> bool {
        !self.entity_ids.is_empty()
    }
}

/// Precomputed sequence layouts for every source user.
#[derive(Clone, Debug)]
pub struct SequencePlan {
    index: BTreeMap<u32, usize>,
    layouts: Vec<UserLayout>,
}

impl SequencePlan {
    pub fn build(core: &BundleCore) -> Result<Self> {
        let users = core.source_users();
        let mut layouts = Vec::with_capacity(users.len());
        let mut index = BTreeMap::new();
        for &user in &users {
            index.insert(user, layouts.len());
            layouts.push(layout_for(core, user)?);
        }
        Ok(SequencePlan { index, layouts })
    }

    /// Layout for a user; unknown users read as all-padding (cold).
    pub fn layout(&self, user: u32) -> Option<&UserLayout> {
        self.index.get(&user).map(|&i| &self.layouts[i])
    }

    pub fn is_warm(&self, user: u32) -> bool {
        self.layout(user).map(UserLayout::has_valid).unwrap_or(false)
    }
}

fn layout_for(core: &BundleCore, user: u32) -> Result<UserLayout> {
    let cap = core.seq_cap;
    let mut entity_ids = Vec::new();
    for &domain in &core.source_domains {
        let mut entities: Vec<u32> = Vec::new();
        for item in core.user_history(user, domain) {
            entities.extend_from_slice(core.map.entities_or_err(item)?);
        }
        let keep = entities.len().min(cap);
        entity_ids.extend_from_slice(&entities[entities.len() - keep..]);
    }
    Ok(UserLayout { entity_ids })
}

/// Gather a layout's embedding rows from the entity matrix.
pub fn layout_rows(layout: &UserLayout, entity_matrix: &Tensor) -> Tensor {
    let d = entity_matrix.cols();
    let mut rows = Tensor::zeros(&[layout.entity_ids.len(), d]);
    for (pos, &e) in layout.entity_ids.iter().enumerate() {
        rows.row_mut(pos).copy_from_slice(entity_matrix.row(e as usize));
    }
    rows
}

/// Phase 1: the encoder graph, kept alive for the seeded backward.
pub struct EncoderPhase {
    graph: Graph,
    output: NodeId,
    param_leaves: Vec<(String, NodeId)>,
    pub values: Tensor,
}

pub fn encoder_forward(model: &Model, adj: &Adjacency, features: &Tensor) -> EncoderPhase {
    let mut graph = Graph::new();
    let mut param_leaves = Vec::new();
    let params = &model.params;
    let output = encoder_nodes(&mut graph, model, adj, features, |g, name| {
        let id = g.param(params.get(name).clone());
        param_leaves.push((name.to_string(), id));
        id
    });
    let values = graph.value(output).clone();
    EncoderPhase {
        graph,
        output,
        param_leaves,
        values,
    }
}

impl EncoderPhase {
    /// Phase 5: push the accumulated entity-matrix gradient through the
    /// encoder into the parameter accumulator.
    pub fn backward_into(&self, model: &Model, d_entity: Tensor, accum: &mut GradAccum) {
        let grads = self.graph.backward_seeded(self.output, d_entity);
        for (name, id) in &self.param_leaves {
            if let Some(g) = grads.get(*id) {
                accum.add(&model.params, name, g);
            }
        }
    }
}

/// One user's forward tower graph: interests stacked as an `(M, d)` node.
pub struct TowerRun {
    pub user: u32,
    graph: Graph,
    seq_leaf: NodeId,
    wa_leaf: NodeId,
    kernels_leaf: NodeId,
    pub interests_node: NodeId,
    pub interests_values: Tensor,
    layout: UserLayout,
}

/// Phase 2: forward towers for the given warm users, in parallel, ordered.
pub fn towers_forward(
    model: &Model,
    plan: &SequencePlan,
    users: &[u32],
    entity_matrix: &Tensor,
) -> Vec<TowerRun> {
    let wa = model.params.get(names::TOWER_WA);
    let kernels = model.params.get(names::TOWER_KERNELS);
    ordered_map(users, |&user| {
        let layout = plan
            .layout(user)
            .expect("towers_forward called with a user outside the plan")
            .clone();
        let rows = layout_rows(&layout, entity_matrix);
        let penalties = Tensor::vector(vec![0.0; layout.entity_ids.len()]);
        let mut graph = Graph::new();
        let seq_leaf = graph.param(rows);
        let wa_leaf = graph.param(wa.clone());
        let kernels_leaf = graph.param(kernels.clone());
        let interests = interests_nodes(&mut graph, seq_leaf, &penalties, wa_leaf, kernels_leaf);
        let interests_node = graph.stack_rows(&interests);
        let interests_values = graph.value(interests_node).clone();
        TowerRun {
            user,
            graph,
            seq_leaf,
            wa_leaf,
            kernels_leaf,
            interests_node,
            interests_values,
            layout,
        }
    })
}

/// Phases 4+5: tower backward per user (parallel), fixed-order reduction
/// into the parameter accumulator and the entity-matrix gradient, then the
/// encoder backward.
pub fn backbone_backward(
    model: &Model,
    encoder: &EncoderPhase,
    towers: &[TowerRun],
    interest_grads: Vec<Option<Tensor>>,
    mut d_entity: Tensor,
    accum: &mut GradAccum,
) {
    let per_user: Vec<Option<Gradients>> = ordered_map(
        &towers.iter().zip(interest_grads).collect::<Vec<_>>(),
        |(run, dz)| {
            dz.as_ref()
                .map(|seed| run.graph.backward_seeded(run.interests_node, seed.clone()))
        },
    );
    for (run, grads) in towers.iter().zip(per_user) {
        let Some(mut grads) = grads else { continue };
        if let Some(g) = grads.get(run.wa_leaf) {
            accum.add(&model.params, names::TOWER_WA, g);
        }
        if let Some(g) = grads.get(run.kernels_leaf) {
            accum.add(&model.params, names::TOWER_KERNELS, g);
        }
        if let Some(d_seq) = grads.take(run.seq_leaf) {
            for (pos, &e) in run.layout.entity_ids.iter().enumerate() {
                crate::numerics::tensor::axpy(d_entity.row_mut(e as usize), 1.0, d_seq.row(pos));
            }
        }
    }
    encoder.backward_into(model, d_entity, accum);
}

/// Per-entity kept-prototype sets for a batch, from current values.
pub fn batch_masks(
    model: &Model,
    entity_matrix: &Tensor,
    entities: &[u32],
) -> Result<BTreeMap<u32, Arc<Vec<usize>>>> {
    let bank = crate::tower::bank_of(model);
    let masks = ordered_map(entities, |&e| {
        crate::tower::mask_from_entity(&bank, entity_matrix, e).map(|m| m.kept().to_vec())
    });
    let mut out = BTreeMap::new();
    for (&e, m) in entities.iter().zip(masks) {
        out.insert(e, Arc::new(m?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::graph_encoder::encode_entities;
    use crate::model::ModelConfig;
    use crate::tower::{deconstruct, extract_interests};

    #[test]
    fn compact_towers_match_the_literal_padded_path_bit_for_bit() {
        // Padded rows are exact zeros with -inf logits: removing them must
        // not change any interest vector, down to the last bit.
        let cfg = SyntheticConfig {
            entities: 25,
            topics: 5,
            users: 6,
            triplets: 80,
            items_per_source: 8,
            items_per_target: 5,
            records_per_source: 90,
            records_per_target: 30,
            seq_cap: 40,
            ..SyntheticConfig::default()
        };
        let bundle = generate_synthetic(&cfg, 77).unwrap();
        let core = &bundle.core;
        let model = Model::init(
            ModelConfig {
                embed_dim: 64,
                interests: 4,
                prototypes: 8,
                mask_k: 3,
                temperature: 0.2,
                gamma: 1.0,
                seq_cap: 40,
                n_entities: 25,
                source_domains: core.source_domains.clone(),
                use_graph_encoder: true,
                use_pea: true,
            },
            3,
        )
        .unwrap();
        let hg = encode_entities(&model, &core.graph).unwrap();
        let plan = SequencePlan::build(core).unwrap();
        let warm: Vec<u32> = core
            .source_users()
            .into_iter()
            .filter(|&u| plan.is_warm(u))
            .collect();
        assert!(!warm.is_empty());
        let runs = towers_forward(&model, &plan, &warm, &hg);
        for run in &runs {
            let padded = deconstruct(core, &hg, run.user).unwrap();
            let literal = extract_interests(&model, &padded).unwrap();
            for (a, row) in literal.iter().enumerate() {
                for (x, y) in row.iter().zip(run.interests_values.row(a)) {
                    assert_eq!(
                        x.to_bits(),
                        y.to_bits(),
                        "user {} interest {a} diverged",
                        run.user
                    );
                }
            }
        }
    }
}
