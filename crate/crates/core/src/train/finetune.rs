//! Target-domain fine-tuning and the zero-shot ranker.
//!
//! The default flow freezes the whole pre-trained backbone: user and entity
//! embeddings come from the offline store (or an equivalent live recompute)
//! and only the MLP heads — the DeepFM branch and the outer scorer — are
//! trained. Unfreezing is available behind a flag, in which case gradients
//! flow through the tower and encoder with the prototype mask driven by each
//! record's candidate item.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::data::{BundleCore, InteractionRecord};
use crate::error::{Error, Result};
use crate::eval::{chronological_split, evaluate_ranking, MetricRow, SplitSpec};
use crate::graph_encoder::Adjacency;
use crate::model::{GradAccum, Model, ParamSet};
use crate::numerics::rng::{seeded, Stream};
use crate::numerics::tensor::dot;
use crate::numerics::{Graph, NodeId, Tensor};
use crate::tower::{bank_of, fuse_nodes, mask_from_item, pe_attention_nodes, source_entity_records};

use super::deepfm::{field_values, init_heads, score_logits_nodes, DeepFmSpec};
use super::phases::{backbone_backward, encoder_forward, towers_forward, SequencePlan};
use super::store::EmbeddingStore;

/// Zero-shot preference: the plain inner product, used only for ranking.
pub fn zeroshot_score(z_u: &[f64], z_i: &[f64]) -> f64 {
    dot(z_u, z_i)
}

/// Where the frozen flow reads user/item embeddings from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// The persisted snapshot.
    Store,
    /// Fresh recomputation from the (frozen) backbone; must agree with the
    /// store to within float-roundtrip tolerance.
    Live,
}

#[derive(Clone, Debug)]
pub struct FinetuneConfig {
    pub target_domain: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Default true: only MLP-based components are fine-tuned.
    pub freeze_backbone: bool,
    pub embeddings: EmbeddingSource,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            target_domain: 0,
            epochs: 3,
            batch_size: 512,
            lr: crate::numerics::DEFAULT_LR,
            seed: 0,
            freeze_backbone: true,
            embeddings: EmbeddingSource::Store,
        }
    }
}

/// Trained heads plus the per-epoch mean cross-entropy.
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub heads: ParamSet,
    pub spec: DeepFmSpec,
    pub epoch_loss: Vec<f64>,
}

fn profile_vals<'a>(core: &'a BundleCore, kind: &str, id: u32) -> Result<&'a [u32]> {
    let map = if kind == "user" {
        &core.profiles.users
    } else {
        &core.profiles.items
    };
    map.get(&id)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::invalid(format!("missing profile for {kind} {id}")))
}

/// Embeddings the frozen flow scores with: per-user universal encodings and
/// per-item mean-pooled entity embeddings.
pub struct FrozenEmbeddings {
    pub users: BTreeMap<u32, Vec<f64>>,
    pub items: BTreeMap<u32, Vec<f64>>,
}

/// Collect the frozen embeddings for a domain's users and catalog, either
/// straight from the store or recomputed live from the backbone.
pub fn frozen_embeddings(
    model: &Model,
    core: &BundleCore,
    store: &EmbeddingStore,
    domain: u32,
    source: EmbeddingSource,
) -> Result<FrozenEmbeddings> {
    let users: BTreeSet<u32> = core.domain_records(domain).iter().map(|r| r.user).collect();
    let catalog = core.catalog(domain);
    match source {
        EmbeddingSource::Store => {
            let mut u = BTreeMap::new();
            for &id in &users {
                u.insert(id, store.user(id)?.to_vec());
            }
            let mut items = BTreeMap::new();
            for &item in &catalog {
                items.insert(item, store.item_embedding(item, &core.map)?);
            }
            Ok(FrozenEmbeddings { users: u, items })
        }
        EmbeddingSource::Live => {
            let fresh = super::store::infer_embeddings(
                model,
                core,
                store.snapshot_id,
                store.checkpoint_hash,
            )?;
            let mut u = BTreeMap::new();
            for &id in &users {
                u.insert(id, fresh.user(id)?.to_vec());
            }
            let mut items = BTreeMap::new();
            for &item in &catalog {
                items.insert(item, fresh.item_embedding(item, &core.map)?);
            }
            Ok(FrozenEmbeddings { users: u, items })
        }
    }
}

/// Fine-tune on the target domain's chronological train split.
///
/// Frozen (default): Adam over the heads only; the backbone is untouched and
/// embeddings come from `store`/live recompute. Unfrozen: gradients also
/// flow into the backbone parameters through live towers and the encoder.
pub fn finetune(
    model: &mut Model,
    core: &BundleCore,
    store: &EmbeddingStore,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if !core.target_domains.contains(&cfg.target_domain) {
        return Err(Error::config(format!(
            "domain {} is not a declared target",
            cfg.target_domain
        )));
    }
    let records = core.domain_records(cfg.target_domain);
    if records.is_empty() {
        return Err(Error::invalid("empty target train set"));
    }
    let (train, _, _) = chronological_split(records, &SplitSpec::default())?;
    if train.is_empty() {
        return Err(Error::invalid("empty target train set"));
    }
    let spec = DeepFmSpec::from_schema(&core.schema);
    let mut heads = init_heads(&spec, model.cfg.embed_dim, cfg.seed);
    let mut adam = heads.adam_states(cfg.lr);
    let train: Vec<&InteractionRecord> = train;
    let mut rng = seeded(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    if cfg.freeze_backbone {
        let frozen = frozen_embeddings(model, core, store, cfg.target_domain, cfg.embeddings)?;
        let mut per_record: Vec<(Vec<f64>, Vec<f64>, Vec<usize>, f64)> = Vec::new();
        for r in &train {
            let zu = frozen
                .users
                .get(&r.user)
                .ok_or_else(|| Error::invalid(format!("user {} missing embeddings", r.user)))?;
            let zi = frozen.items.get(&r.item).unwrap();
            let vals = field_values(
                &spec,
                profile_vals(core, "user", r.user)?,
                profile_vals(core, "item", r.item)?,
            )?;
            per_record.push((zu.clone(), zi.clone(), vals, r.label as f64));
        }
        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let d = model.cfg.embed_dim;
                let b = chunk.len();
                let mut zu = Tensor::zeros(&[b, d]);
                let mut zi = Tensor::zeros(&[b, d]);
                let mut vals = Vec::with_capacity(b);
                let mut labels = Vec::with_capacity(b);
                for (row, &idx) in chunk.iter().enumerate() {
                    let (u, i, v, y) = &per_record[idx];
                    zu.row_mut(row).copy_from_slice(u);
                    zi.row_mut(row).copy_from_slice(i);
                    vals.push(v.clone());
                    labels.push(*y);
                }
                let mut g = Graph::new();
                let mut leaves: Vec<(String, NodeId)> = Vec::new();
                let zu_n = g.input(zu);
                let zi_n = g.input(zi);
                let logits = score_logits_nodes(&mut g, &spec, zu_n, zi_n, &vals, |g, name| {
                    let id = g.param(heads.get(name).clone());
                    leaves.push((name.to_string(), id));
                    id
                });
                let flat = g.reshape(logits, vec![b]);
                let loss = g.bce_with_logits_mean(flat, Arc::new(labels));
                sum += g.value(loss).item();
                batches += 1;
                let grads = g.backward(loss)?;
                let mut accum = GradAccum::zeros_like(&heads);
                for (name, id) in &leaves {
                    if let Some(grad) = grads.get(*id) {
                        accum.add(&heads, name, grad);
                    }
                }
                for pos in 0..heads.len() {
                    let gt = accum.by_pos(pos).clone();
                    adam[pos].apply(heads.by_pos_mut(pos), &gt)?;
                }
            }
            epoch_loss.push(sum / batches as f64);
        }
    } else {
        let mut backbone_adam = model.params.adam_states(cfg.lr);
        let plan = SequencePlan::build(core)?;
        let adj = Adjacency::from_graph(&core.graph);
        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&InteractionRecord> = chunk.iter().map(|&i| train[i]).collect();
                let (loss, head_accum, backbone_accum) =
                    unfrozen_batch(model, core, &plan, &adj, &heads, &spec, &batch)?;
                sum += loss;
                batches += 1;
                for pos in 0..heads.len() {
                    let gt = head_accum.by_pos(pos).clone();
                    adam[pos].apply(heads.by_pos_mut(pos), &gt)?;
                }
                for pos in 0..model.params.len() {
                    let gt = backbone_accum.by_pos(pos).clone();
                    backbone_adam[pos].apply(model.params.by_pos_mut(pos), &gt)?;
                }
            }
            epoch_loss.push(sum / batches as f64);
        }
    }
    Ok(FinetuneOutcome {
        heads,
        spec,
        epoch_loss,
    })
}

/// One unfrozen batch: live towers, item-driven prototype masks, in-graph
/// mean pooling for item embeddings, DeepFM heads, one backward pass split
/// across the phased engine.
fn unfrozen_batch(
    model: &Model,
    core: &BundleCore,
    plan: &SequencePlan,
    adj: &Adjacency,
    heads: &ParamSet,
    spec: &DeepFmSpec,
    batch: &[&InteractionRecord],
) -> Result<(f64, GradAccum, GradAccum)> {
    use crate::model::names;
    let d = model.cfg.embed_dim;
    let m_interests = model.cfg.interests;
    let encoder = encoder_forward(model, adj, &core.graph.features);
    let bank = bank_of(model);

    let unique_users: Vec<u32> = batch.iter().map(|r| r.user).collect::<BTreeSet<_>>().into_iter().collect();
    let warm: Vec<u32> = unique_users.iter().copied().filter(|&u| plan.is_warm(u)).collect();
    let unique_items: Vec<u32> = batch.iter().map(|r| r.item).collect::<BTreeSet<_>>().into_iter().collect();
    let mut kept_of: BTreeMap<u32, Arc<Vec<usize>>> = BTreeMap::new();
    for &item in &unique_items {
        let mask = mask_from_item(&bank, &encoder.values, core, item)?;
        kept_of.insert(item, Arc::new(mask.kept().to_vec()));
    }
    let towers = towers_forward(model, plan, &warm, &encoder.values);

    let mut g = Graph::new();
    let mut backbone_leaves: Vec<(String, NodeId)> = Vec::new();
    let mut head_leaves: Vec<(String, NodeId)> = Vec::new();
    let hg_leaf = g.param(encoder.values.clone());
    let mut bleaf = |g: &mut Graph, name: &str| -> NodeId {
        let id = g.param(model.params.get(name).clone());
        backbone_leaves.push((name.to_string(), id));
        id
    };
    let p_node = bleaf(&mut g, names::PROTOTYPES);
    let fuse_w = bleaf(&mut g, names::TOWER_FUSE_W);
    let fuse_v = bleaf(&mut g, names::TOWER_FUSE_V);
    let cold_node = bleaf(&mut g, names::TOWER_COLD);
    let pea_mlp = model.cfg.use_pea.then(|| crate::numerics::MlpNodes {
        w1: bleaf(&mut g, "pea.mlp.w1"),
        b1: bleaf(&mut g, "pea.mlp.b1"),
        w2: bleaf(&mut g, "pea.mlp.w2"),
        b2: bleaf(&mut g, "pea.mlp.b2"),
        w3: bleaf(&mut g, "pea.mlp.w3"),
        b3: bleaf(&mut g, "pea.mlp.b3"),
    });

    let mut z_leaf_of: BTreeMap<u32, NodeId> = BTreeMap::new();
    for run in &towers {
        z_leaf_of.insert(run.user, g.param(run.interests_values.clone()));
    }
    let cold_stack = (warm.len() < unique_users.len())
        .then(|| g.stack_rows(&vec![cold_node; m_interests]));
    let mut z_rows_of: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
    let mut logits_of: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
    for &u in &unique_users {
        let z_mat = z_leaf_of.get(&u).copied().or(cold_stack).unwrap();
        let rows: Vec<NodeId> = (0..m_interests)
            .map(|a| {
                let r = g.gather_rows(z_mat, Arc::new(vec![a]));
                g.reshape(r, vec![d])
            })
            .collect();
        if model.cfg.use_pea {
            logits_of.insert(u, rows.iter().map(|&z| g.matvec(p_node, z)).collect());
        }
        z_rows_of.insert(u, rows);
    }
    // Per-item nodes: kept-prototype gather and in-graph mean pooling.
    let mut p_kept_of: BTreeMap<u32, NodeId> = BTreeMap::new();
    let mut zi_of: BTreeMap<u32, NodeId> = BTreeMap::new();
    for &item in &unique_items {
        if model.cfg.use_pea {
            p_kept_of.insert(item, g.gather_rows(p_node, kept_of[&item].clone()));
        }
        let entities = core.map.entities_or_err(item)?;
        let ids: Arc<Vec<usize>> = Arc::new(entities.iter().map(|&e| e as usize).collect());
        let rows = g.gather_rows(hg_leaf, ids);
        let ones = g.input(Tensor::vector(vec![1.0 / entities.len() as f64; entities.len()]));
        zi_of.insert(item, g.tmatvec(rows, ones));
    }

    // Per-record user encodings and scores.
    let mut zu_rows: Vec<NodeId> = Vec::with_capacity(batch.len());
    let mut zi_rows: Vec<NodeId> = Vec::with_capacity(batch.len());
    let mut vals: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
    let mut labels: Vec<f64> = Vec::with_capacity(batch.len());
    for rec in batch {
        let rows = &z_rows_of[&rec.user];
        let zu = if model.cfg.use_pea {
            let kept = &kept_of[&rec.item];
            let p_kept = p_kept_of[&rec.item];
            let logits = &logits_of[&rec.user];
            let mlp = pea_mlp.as_ref().unwrap();
            let enhanced: Vec<NodeId> = rows
                .iter()
                .zip(logits)
                .map(|(&z, &lz)| pe_attention_nodes(&mut g, z, lz, p_kept, kept.clone(), mlp, d))
                .collect();
            fuse_nodes(&mut g, &enhanced, fuse_w, fuse_v)
        } else {
            fuse_nodes(&mut g, rows, fuse_w, fuse_v)
        };
        zu_rows.push(zu);
        zi_rows.push(zi_of[&rec.item]);
        vals.push(field_values(
            spec,
            profile_vals(core, "user", rec.user)?,
            profile_vals(core, "item", rec.item)?,
        )?);
        labels.push(rec.label as f64);
    }
    let zu_mat = g.stack_rows(&zu_rows);
    let zi_mat = g.stack_rows(&zi_rows);
    let logits = score_logits_nodes(&mut g, spec, zu_mat, zi_mat, &vals, |g, name| {
        let id = g.param(heads.get(name).clone());
        head_leaves.push((name.to_string(), id));
        id
    });
    let flat = g.reshape(logits, vec![batch.len()]);
    let loss_node = g.bce_with_logits_mean(flat, Arc::new(labels));
    let loss = g.value(loss_node).item();

    let mut grads = g.backward(loss_node)?;
    let mut head_accum = GradAccum::zeros_like(heads);
    for (name, id) in &head_leaves {
        if let Some(gt) = grads.get(*id) {
            head_accum.add(heads, name, gt);
        }
    }
    let mut backbone_accum = GradAccum::zeros_like(&model.params);
    for (name, id) in &backbone_leaves {
        if let Some(gt) = grads.get(*id) {
            backbone_accum.add(&model.params, name, gt);
        }
    }
    let d_entity = grads.get_or_zeros(hg_leaf, encoder.values.shape());
    let interest_grads: Vec<Option<Tensor>> = towers
        .iter()
        .map(|run| grads.take(z_leaf_of[&run.user]))
        .collect();
    backbone_backward(model, &encoder, &towers, interest_grads, d_entity, &mut backbone_accum);
    Ok((loss, head_accum, backbone_accum))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Test-split positives scored by the fine-tuned heads.
    Normal,
    /// Every positive in the domain, scored by the pre-trained inner product.
    ZeroShot,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Normal => "normal",
            Protocol::ZeroShot => "zeroshot",
        }
    }
}

/// Per-user positive item sets over a whole domain.
fn known_positives(records: &[InteractionRecord]) -> BTreeMap<u32, BTreeSet<u32>> {
    let mut map: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for r in records {
        if r.label == 1 {
            map.entry(r.user).or_default().insert(r.item);
        }
    }
    map
}

/// Rank a target domain under the given protocol. Candidates per positive
/// are the full catalog minus the user's other known positives.
pub fn evaluate_domain(
    model: &Model,
    core: &BundleCore,
    store: &EmbeddingStore,
    outcome: Option<&FinetuneOutcome>,
    domain: u32,
    protocol: Protocol,
) -> Result<MetricRow> {
    let records = core.domain_records(domain);
    if records.is_empty() {
        return Err(Error::invalid(format!("domain {domain} has no interactions")));
    }
    let catalog = core.catalog(domain);
    let known = known_positives(records);
    let mut item_embeddings: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &item in &catalog {
        item_embeddings.insert(item, store.item_embedding(item, &core.map)?);
    }
    match protocol {
        Protocol::ZeroShot => {
            let positives: Vec<(u32, u32)> = records
                .iter()
                .filter(|r| r.label == 1)
                .map(|r| (r.user, r.item))
                .collect();
            evaluate_ranking(&positives, &catalog, &known, |user, candidates| {
                let zu = store.user(user).map(<[f64]>::to_vec).unwrap_or_else(|_| vec![0.0; store.dim]);
                candidates
                    .iter()
                    .map(|c| zeroshot_score(&zu, &item_embeddings[c]))
                    .collect()
            })
        }
        Protocol::Normal => {
            let outcome = outcome
                .ok_or_else(|| Error::invalid("normal protocol needs fine-tuned heads"))?;
            let (_, _, test) = chronological_split(records, &SplitSpec::default())?;
            let positives: Vec<(u32, u32)> = test
                .iter()
                .filter(|r| r.label == 1)
                .map(|r| (r.user, r.item))
                .collect();
            let d = model.cfg.embed_dim;
            evaluate_ranking(&positives, &catalog, &known, |user, candidates| {
                score_candidates(
                    core,
                    store,
                    outcome,
                    d,
                    user,
                    candidates,
                    &item_embeddings,
                )
                .unwrap_or_else(|_| vec![f64::NEG_INFINITY; candidates.len()])
            })
        }
    }
}

/// Batch-score one user against a candidate list with the fine-tuned heads.
fn score_candidates(
    core: &BundleCore,
    store: &EmbeddingStore,
    outcome: &FinetuneOutcome,
    d: usize,
    user: u32,
    candidates: &[u32],
    item_embeddings: &BTreeMap<u32, Vec<f64>>,
) -> Result<Vec<f64>> {
    let b = candidates.len();
    let zu_row = store.user(user)?;
    let user_vals = profile_vals(core, "user", user)?;
    let mut zu = Tensor::zeros(&[b, d]);
    let mut zi = Tensor::zeros(&[b, d]);
    let mut vals = Vec::with_capacity(b);
    for (row, &item) in candidates.iter().enumerate() {
        zu.row_mut(row).copy_from_slice(zu_row);
        zi.row_mut(row).copy_from_slice(&item_embeddings[&item]);
        vals.push(field_values(
            &outcome.spec,
            user_vals,
            profile_vals(core, "item", item)?,
        )?);
    }
    let mut g = Graph::new();
    let zu_n = g.input(zu);
    let zi_n = g.input(zi);
    let logits = score_logits_nodes(&mut g, &outcome.spec, zu_n, zi_n, &vals, |g, name| {
        g.input(outcome.heads.get(name).clone())
    });
    Ok(g.value(logits).data().to_vec())
}

/// Source-domain entity-record count, used by smoke checks on plan sizing.
pub fn source_record_count(core: &BundleCore) -> Result<usize> {
    Ok(source_entity_records(core)?.len())
}
