//! Entity-oriented pre-training over all source domains.
//!
//! Each minibatch of entity-level records is scored with the decoder over
//! `(z_u, h_e)` pairs; the joint loss adds the contrastive prototype term
//! over the batch's unique entities, weighted by gamma. Interest vectors are
//! user-level; the prototype-enhanced attention mask comes from each
//! record's target entity, so the fused encoding is pair-level.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::data::{BundleCore, EntityRecord};
use crate::error::{Error, Result};
use crate::graph_encoder::Adjacency;
use crate::model::{names, GradAccum, Model};
use crate::numerics::rng::{seeded, Stream};
use crate::numerics::{mlp_vec, Graph, NodeId, Tensor};
use crate::prototype::contrastive_nodes;
use crate::tower::{fuse_nodes, mlp_leaves, pe_attention_nodes, source_entity_records};

use super::phases::{
    backbone_backward, batch_masks, encoder_forward, towers_forward, SequencePlan,
};

#[derive(Clone, Debug)]
pub struct PretrainConfig {
    /// Contrastive term weight.
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            gamma: 1.0,
            batch_size: 512,
            epochs: 3,
            lr: crate::numerics::DEFAULT_LR,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::config("gamma must be nonnegative"));
        }
        if self.gamma > 0.0 && self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2 when gamma > 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub l_pt: f64,
    pub l_et: f64,
    pub l_cp: f64,
}

/// Per-epoch mean losses, renderable as the training-log format
/// `epoch<TAB>L_PT<TAB>L_ET<TAB>L_CP` with six decimals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<BatchLosses>,
}

impl TrainingLog {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.epochs.iter().enumerate() {
            writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}", i + 1, e.l_pt, e.l_et, e.l_cp).unwrap();
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// Decoder probability for one `(z_u, h_e)` pair:
/// `sigmoid(MLP(z_u || h_e))`.
pub fn pretrain_score(model: &Model, z_u: &[f64], h_e: &[f64]) -> Result<f64> {
    let d = model.cfg.embed_dim;
    if z_u.len() != d || h_e.len() != d {
        return Err(Error::invalid("pretrain_score expects two d-dim vectors"));
    }
    let mut g = Graph::new();
    let mut joined = z_u.to_vec();
    joined.extend_from_slice(h_e);
    let x = g.input(Tensor::vector(joined));
    let mlp = mlp_leaves(&mut g, model, names::DECODER_MLP, |g, t| g.input(t.clone()));
    let logit = mlp_vec(&mut g, x, &mlp);
    let p = g.sigmoid(logit);
    Ok(g.value(p).item())
}

/// One batch's forward (and optionally backward) pass through the phased
/// engine. `kept_masks` fixes the per-entity prototype mask; pass the output
/// of [`batch_masks`] to freeze masks across finite-difference probes.
pub struct BatchEval {
    pub losses: BatchLosses,
    pub grads: Option<GradAccum>,
}

pub fn pretrain_batch(
    model: &Model,
    plan: &SequencePlan,
    adj: &Adjacency,
    features: &Tensor,
    batch: &[EntityRecord],
    gamma: f64,
    kept_masks: Option<&BTreeMap<u32, Arc<Vec<usize>>>>,
    want_grads: bool,
) -> Result<BatchEval> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let unique_entities: Vec<u32> = batch
        .iter()
        .map(|r| r.entity)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if gamma > 0.0 && unique_entities.len() < 2 {
        return Err(Error::invalid(
            "contrastive term needs at least 2 unique entities in the batch",
        ));
    }
    let unique_users: Vec<u32> = batch
        .iter()
        .map(|r| r.user)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let warm_users: Vec<u32> = unique_users
        .iter()
        .copied()
        .filter(|&u| plan.is_warm(u))
        .collect();

    // Phase 1: encoder.
    let encoder = encoder_forward(model, adj, features);

    // Masks from current values unless frozen by the caller.
    let owned_masks;
    let masks: &BTreeMap<u32, Arc<Vec<usize>>> = match kept_masks {
        Some(m) => m,
        None => {
            owned_masks = batch_masks(model, &encoder.values, &unique_entities)?;
            &owned_masks
        }
    };

    // Phase 2: per-user towers.
    let towers = towers_forward(model, plan, &warm_users, &encoder.values);

    // Phase 3: the head graph over batch records.
    let mut g = Graph::new();
    let params = &model.params;
    let use_pea = model.cfg.use_pea;
    let d = model.cfg.embed_dim;
    let m_interests = model.cfg.interests;

    struct HeadLeaves(Vec<(String, NodeId)>);
    impl HeadLeaves {
        fn add(&mut self, g: &mut Graph, model: &Model, name: &str) -> NodeId {
            let id = g.param(model.params.get(name).clone());
            self.0.push((name.to_string(), id));
            id
        }
        fn add_mlp(&mut self, g: &mut Graph, model: &Model, prefix: &str) -> crate::numerics::MlpNodes {
            crate::numerics::MlpNodes {
                w1: self.add(g, model, &format!("{prefix}.w1")),
                b1: self.add(g, model, &format!("{prefix}.b1")),
                w2: self.add(g, model, &format!("{prefix}.w2")),
                b2: self.add(g, model, &format!("{prefix}.b2")),
                w3: self.add(g, model, &format!("{prefix}.w3")),
                b3: self.add(g, model, &format!("{prefix}.b3")),
            }
        }
    }
    let mut leaves = HeadLeaves(Vec::new());
    let hg_leaf = g.param(encoder.values.clone());
    let p_node = leaves.add(&mut g, model, names::PROTOTYPES);
    let fuse_w = leaves.add(&mut g, model, names::TOWER_FUSE_W);
    let fuse_v = leaves.add(&mut g, model, names::TOWER_FUSE_V);
    let cold_node = leaves.add(&mut g, model, names::TOWER_COLD);
    let pea_mlp = use_pea.then(|| leaves.add_mlp(&mut g, model, names::PEA_MLP));
    let dec_mlp = leaves.add_mlp(&mut g, model, names::DECODER_MLP);
    let head_leaves = leaves.0;

    // Interest-row leaves per user (warm: tower output; cold: stacked
    // cold-start vector).
    let mut z_leaf_of: BTreeMap<u32, NodeId> = BTreeMap::new();
    for run in &towers {
        z_leaf_of.insert(run.user, g.param(run.interests_values.clone()));
    }
    let cold_stack = if warm_users.len() < unique_users.len() {
        Some(g.stack_rows(&vec![cold_node; m_interests]))
    } else {
        None
    };

    // Per-user interest vectors and (in PEA mode) their full prototype
    // logits, shared across the user's records.
    let mut z_rows_of: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
    let mut logits_of: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
    let mut plain_zu_of: BTreeMap<u32, NodeId> = BTreeMap::new();
    for &u in &unique_users {
        let z_mat = z_leaf_of.get(&u).copied().or(cold_stack).unwrap();
        let rows: Vec<NodeId> = (0..m_interests)
            .map(|a| {
                let r = g.gather_rows(z_mat, Arc::new(vec![a]));
                g.reshape(r, vec![d])
            })
            .collect();
        if use_pea {
            let logits: Vec<NodeId> = rows.iter().map(|&z| g.matvec(p_node, z)).collect();
            logits_of.insert(u, logits);
        } else {
            let zu = fuse_nodes(&mut g, &rows, fuse_w, fuse_v);
            plain_zu_of.insert(u, zu);
        }
        z_rows_of.insert(u, rows);
    }

    // Per-entity nodes: embedding row and the kept-prototype gather.
    let mut h_row_of: BTreeMap<u32, NodeId> = BTreeMap::new();
    let mut p_kept_of: BTreeMap<u32, NodeId> = BTreeMap::new();
    for &e in &unique_entities {
        let r = g.gather_rows(hg_leaf, Arc::new(vec![e as usize]));
        h_row_of.insert(e, g.reshape(r, vec![d]));
        if use_pea {
            let kept = masks
                .get(&e)
                .ok_or_else(|| Error::invalid(format!("no mask for entity {e}")))?;
            p_kept_of.insert(e, g.gather_rows(p_node, kept.clone()));
        }
    }

    // Record scores.
    let mut logit_nodes: Vec<NodeId> = Vec::with_capacity(batch.len());
    let mut labels: Vec<f64> = Vec::with_capacity(batch.len());
    for rec in batch {
        let zu = if use_pea {
            let kept = &masks[&rec.entity];
            let p_kept = p_kept_of[&rec.entity];
            let rows = &z_rows_of[&rec.user];
            let logits = &logits_of[&rec.user];
            let mlp = pea_mlp.as_ref().unwrap();
            let enhanced: Vec<NodeId> = rows
                .iter()
                .zip(logits)
                .map(|(&z, &lz)| pe_attention_nodes(&mut g, z, lz, p_kept, kept.clone(), mlp, d))
                .collect();
            fuse_nodes(&mut g, &enhanced, fuse_w, fuse_v)
        } else {
            plain_zu_of[&rec.user]
        };
        let joined = g.concat_vecs(&[zu, h_row_of[&rec.entity]]);
        logit_nodes.push(mlp_vec(&mut g, joined, &dec_mlp));
        labels.push(rec.label as f64);
    }
    let all_logits = g.concat_vecs(&logit_nodes);
    let l_et_node = g.bce_with_logits_mean(all_logits, Arc::new(labels));

    let (l_pt_node, l_cp_value) = if gamma > 0.0 {
        let ids: Arc<Vec<usize>> = Arc::new(unique_entities.iter().map(|&e| e as usize).collect());
        let h_batch = g.gather_rows(hg_leaf, ids);
        let l_cp_node = contrastive_nodes(&mut g, h_batch, p_node, model.cfg.temperature);
        let weighted = g.scale(l_cp_node, gamma);
        (g.add(l_et_node, weighted), g.value(l_cp_node).item())
    } else {
        (l_et_node, 0.0)
    };

    let losses = BatchLosses {
        l_pt: g.value(l_pt_node).item(),
        l_et: g.value(l_et_node).item(),
        l_cp: l_cp_value,
    };
    if !losses.l_pt.is_finite() {
        return Err(Error::invalid("non-finite training loss"));
    }
    if !want_grads {
        return Ok(BatchEval {
            losses,
            grads: None,
        });
    }

    // Backward through the head, then the backbone phases.
    let mut head_grads = g.backward(l_pt_node)?;
    let mut accum = GradAccum::zeros_like(params);
    for (name, id) in &head_leaves {
        if let Some(grad) = head_grads.get(*id) {
            accum.add(params, name, grad);
        }
    }
    let d_entity = head_grads.get_or_zeros(hg_leaf, encoder.values.shape());
    let interest_grads: Vec<Option<Tensor>> = towers
        .iter()
        .map(|run| head_grads.take(z_leaf_of[&run.user]))
        .collect();
    backbone_backward(model, &encoder, &towers, interest_grads, d_entity, &mut accum);
    Ok(BatchEval {
        losses,
        grads: Some(accum),
    })
}

/// The three loss components on one batch of entity-level records, without
/// gradients (Eq. 10's `L_PT = L_ET + gamma * L_CP`).
pub fn pretrain_loss(
    model: &Model,
    core: &BundleCore,
    batch: &[EntityRecord],
    gamma: f64,
) -> Result<BatchLosses> {
    let plan = SequencePlan::build(core)?;
    let adj = Adjacency::from_graph(&core.graph);
    let eval = pretrain_batch(
        model,
        &plan,
        &adj,
        &core.graph.features,
        batch,
        gamma,
        None,
        false,
    )?;
    Ok(eval.losses)
}

/// Full pre-training: shuffled minibatch Adam over all source domains'
/// entity-level records. Deterministic for a fixed seed.
pub fn pretrain(model: &mut Model, core: &BundleCore, cfg: &PretrainConfig) -> Result<TrainingLog> {
    cfg.validate()?;
    let records = source_entity_records(core)?;
    if records.is_empty() {
        return Err(Error::invalid("no source-domain records to pre-train on"));
    }
    let plan = SequencePlan::build(core)?;
    let adj = Adjacency::from_graph(&core.graph);
    let mut adam = model.params.adam_states(cfg.lr);
    let mut rng = seeded(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = TrainingLog::default();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = BatchLosses::default();
        let mut batches = 0usize;
        let mut start = 0usize;
        while start < order.len() {
            let mut end = (start + cfg.batch_size).min(order.len());
            // Merge a trailing singleton into the last batch so the
            // contrastive term always has negatives.
            if order.len() - end == 1 {
                end = order.len();
            }
            let batch: Vec<EntityRecord> = order[start..end].iter().map(|&i| records[i]).collect();
            let eval = pretrain_batch(
                model,
                &plan,
                &adj,
                &core.graph.features,
                &batch,
                cfg.gamma,
                None,
                true,
            )?;
            let grads = eval.grads.expect("gradients requested");
            for pos in 0..model.params.len() {
                let g = grads.by_pos(pos).clone();
                adam[pos].apply(model.params.by_pos_mut(pos), &g)?;
            }
            epoch_sum.l_pt += eval.losses.l_pt;
            epoch_sum.l_et += eval.losses.l_et;
            epoch_sum.l_cp += eval.losses.l_cp;
            batches += 1;
            start = end;
        }
        let n = batches as f64;
        log.epochs.push(BatchLosses {
            l_pt: epoch_sum.l_pt / n,
            l_et: epoch_sum.l_et / n,
            l_cp: epoch_sum.l_cp / n,
        });
    }
    Ok(log)
}
