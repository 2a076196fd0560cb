//! User representations: behavior deconstruction across source domains,
//! multi-interest self-attention, prototype-enhanced attention, and adaptive
//! fusion into the universal encoding.
//!
//! The interest attention has no positional term, so interest vectors are
//! invariant to permuting valid positions and to extra padding; both are
//! asserted by tests.

use std::sync::Arc;

use crate::data::{expand_to_entity_records, BundleCore, InteractionRecord};
use crate::error::{Error, Result};
use crate::model::{names, Model};
use crate::numerics::{mlp_vec, Graph, MlpNodes, NodeId, Tensor};
use crate::prototype::{similarity, topk_mask, MaskVector, PrototypeBank};

/// A user's concatenated per-domain entity sequence: one `seq_cap`-row block
/// per source domain, valid prefix then zero padding, embeddings gathered
/// from the entity matrix.
#[derive(Clone, Debug)]
pub struct UserSequence {
    /// `(seq_cap * n_source_domains, d)`; padded rows are zero.
    pub rows: Tensor,
    pub valid: Vec<bool>,
    /// Entity id per valid position (zero where padded).
    pub entity_ids: Vec<u32>,
}

impl UserSequence {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn has_valid(&self) -> bool {
        self.valid.iter().any(|v| *v)
    }

    /// `-inf` penalty per padded position, zero elsewhere.
    pub fn padding_penalties(&self) -> Vec<f64> {
        self.valid
            .iter()
            .map(|&v| if v { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }
}

/// Interest set plus the fused universal encoding for one user.
#[derive(Clone, Debug)]
pub struct UserEncoding {
    /// M interest vectors (prototype-enhanced in enhanced mode).
    pub interests: Vec<Vec<f64>>,
    pub universal: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TowerMode {
    /// Interests feed fusion directly ("w/o PEA" ablation).
    Plain,
    /// Every interest passes through prototype-enhanced attention first.
    PrototypeEnhanced,
}

/// Deconstruct a user's behaviors into the padded entity sequence:
/// per source domain (ascending id), item history -> entity list via the
/// item-entity map, truncated to the most recent `seq_cap` entities,
/// right-padded, blocks concatenated in domain order.
pub fn deconstruct(core: &BundleCore, entity_matrix: &Tensor, user: u32) -> Result<UserSequence> {
    let d = entity_matrix.cols();
    let cap = core.seq_cap;
    let n_blocks = core.source_domains.len();
    let mut rows = Tensor::zeros(&[cap * n_blocks, d]);
    let mut valid = vec![false; cap * n_blocks];
    let mut entity_ids = vec![0u32; cap * n_blocks];
    for (b, &domain) in core.source_domains.iter().enumerate() {
        let items = core.user_history(user, domain);
        let mut entities: Vec<u32> = Vec::new();
        for item in items {
            let es = core.map.entities_or_err(item).map_err(|_| {
                Error::invalid(format!("user {user}: behavior item {item} has no entity mapping"))
            })?;
            entities.extend_from_slice(es);
        }
        let keep = entities.len().min(cap);
        let recent = &entities[entities.len() - keep..];
        for (slot, &e) in recent.iter().enumerate() {
            let pos = b * cap + slot;
            rows.row_mut(pos).copy_from_slice(entity_matrix.row(e as usize));
            valid[pos] = true;
            entity_ids[pos] = e;
        }
    }
    Ok(UserSequence {
        rows,
        valid,
        entity_ids,
    })
}

/// Append the M interest extractions for one user sequence:
/// `z_i = softmax(w_i^T tanh(W_A H_u^T) + padding penalties) . H_u`.
/// Padded positions receive `-inf` logits and exactly zero attention.
pub fn interests_nodes(
    g: &mut Graph,
    seq: NodeId,
    penalties: &Tensor,
    attn_weight: NodeId,
    kernels: NodeId,
) -> Vec<NodeId> {
    let m = g.value(kernels).rows();
    let pen = g.input(penalties.clone());
    let projected = g.matmul_nt(attn_weight, seq);
    let hidden = g.tanh(projected);
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let ki = g.gather_rows(kernels, Arc::new(vec![i]));
        let ki = g.reshape(ki, vec![g.value(kernels).cols()]);
        let logits = g.tmatvec(hidden, ki);
        let masked = g.add(logits, pen);
        let attn = g.softmax_vec(masked);
        let z = g.tmatvec(seq, attn);
        out.push(z);
    }
    out
}

/// Extract the M interest vectors for a sequence with the model's current
/// parameters. Errors on an all-padding sequence; `encode_user` substitutes
/// the learned cold-start vector in that case.
pub fn extract_interests(model: &Model, seq: &UserSequence) -> Result<Vec<Vec<f64>>> {
    if !seq.has_valid() {
        return Err(Error::invalid("empty history"));
    }
    let mut g = Graph::new();
    let s = g.input(seq.rows.clone());
    let wa = g.input(model.params.get(names::TOWER_WA).clone());
    let k = g.input(model.params.get(names::TOWER_KERNELS).clone());
    let pen = Tensor::vector(seq.padding_penalties());
    let nodes = interests_nodes(&mut g, s, &pen, wa, k);
    Ok(nodes.into_iter().map(|n| g.value(n).data().to_vec()).collect())
}

/// Append one prototype-enhanced attention block:
/// `z_hat = MLP(P^T softmax((P z + mask)/sqrt(d)) + z)`.
///
/// Masked prototypes carry `-inf` and exactly zero attention, so the softmax
/// is evaluated on the kept indices only; `bank_rows_kept` must be the
/// gather of the bank over `mask.kept()` (shared across interests).
pub fn pe_attention_nodes(
    g: &mut Graph,
    z: NodeId,
    full_logits: NodeId,
    bank_rows_kept: NodeId,
    kept: Arc<Vec<usize>>,
    mlp: &MlpNodes,
    embed_dim: usize,
) -> NodeId {
    let kept_logits = g.gather_rows(full_logits, kept);
    let scaled = g.scale(kept_logits, 1.0 / (embed_dim as f64).sqrt());
    let attn = g.softmax_vec(scaled);
    let ctx = g.tmatvec(bank_rows_kept, attn);
    let mlp_in = g.add(ctx, z);
    mlp_vec(g, mlp_in, mlp)
}

/// Prototype-enhanced attention on plain values.
pub fn pe_attention(
    model: &Model,
    z: &[f64],
    mask: &MaskVector,
    bank: &PrototypeBank,
) -> Result<Vec<f64>> {
    if z.len() != bank.dim() {
        return Err(Error::invalid("interest dim does not match bank"));
    }
    if mask.len() != bank.count() {
        return Err(Error::invalid("mask length does not match bank"));
    }
    if mask.kept().is_empty() {
        return Err(Error::invalid("mask has empty support"));
    }
    let mut g = Graph::new();
    let zn = g.input(Tensor::vector(z.to_vec()));
    let p = g.input(bank.rows.clone());
    let logits = g.matvec(p, zn);
    let kept = Arc::new(mask.kept().to_vec());
    let p_kept = g.gather_rows(p, kept.clone());
    let mlp = mlp_leaves(&mut g, model, names::PEA_MLP, |g, t| g.input(t.clone()));
    let out = pe_attention_nodes(&mut g, zn, logits, p_kept, kept, &mlp, bank.dim());
    Ok(g.value(out).data().to_vec())
}

/// Register the six MLP tensors under `<prefix>.{w,b}{1..3}` as graph leaves.
pub fn mlp_leaves(
    g: &mut Graph,
    model: &Model,
    prefix: &str,
    mut leaf: impl FnMut(&mut Graph, &Tensor) -> NodeId,
) -> MlpNodes {
    let mut get = |g: &mut Graph, suffix: &str| {
        let t = model.params.get(&format!("{prefix}.{suffix}"));
        leaf(g, t)
    };
    MlpNodes {
        w1: get(g, "w1"),
        b1: get(g, "b1"),
        w2: get(g, "w2"),
        b2: get(g, "b2"),
        w3: get(g, "w3"),
        b3: get(g, "b3"),
    }
}

/// Append the adaptive fusion: `z_u = sum_A softmax_A(v^T tanh(W z_A)) z_A`.
pub fn fuse_nodes(g: &mut Graph, interests: &[NodeId], fuse_w: NodeId, fuse_v: NodeId) -> NodeId {
    let mut scores = Vec::with_capacity(interests.len());
    for &z in interests {
        let h = g.matvec(fuse_w, z);
        let t = g.tanh(h);
        scores.push(g.dot(fuse_v, t));
    }
    let stacked_scores = g.concat_vecs(&scores);
    let weights = g.softmax_vec(stacked_scores);
    let all = g.stack_rows(interests);
    g.tmatvec(all, weights)
}

/// Adaptive fusion on plain values.
pub fn fuse(model: &Model, interests: &[Vec<f64>]) -> Result<Vec<f64>> {
    if interests.is_empty() {
        return Err(Error::invalid("fuse needs at least one interest"));
    }
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = interests
        .iter()
        .map(|z| g.input(Tensor::vector(z.clone())))
        .collect();
    let w = g.input(model.params.get(names::TOWER_FUSE_W).clone());
    let v = g.input(model.params.get(names::TOWER_FUSE_V).clone());
    let out = fuse_nodes(&mut g, &nodes, w, v);
    Ok(g.value(out).data().to_vec())
}

/// The prototype bank view over the model's parameters.
pub fn bank_of(model: &Model) -> PrototypeBank {
    PrototypeBank::new(
        model.params.get(names::PROTOTYPES).clone(),
        model.cfg.temperature,
        model.cfg.mask_k,
    )
    .expect("model config was validated")
}

/// Mask from one target entity's similarity vector.
pub fn mask_from_entity(bank: &PrototypeBank, entity_matrix: &Tensor, entity: u32) -> Result<MaskVector> {
    let s = similarity(entity_matrix.row(entity as usize), bank)?;
    topk_mask(&s, bank.mask_k)
}

/// Mask from an item: similarity vectors of its entities, averaged.
pub fn mask_from_item(
    bank: &PrototypeBank,
    entity_matrix: &Tensor,
    core: &BundleCore,
    item: u32,
) -> Result<MaskVector> {
    let entities = core.map.entities_or_err(item)?;
    mask_from_entities(bank, entity_matrix, entities.iter().map(|&e| e as usize))
}

/// Mask from a user's whole history: similarity vectors of every entity in
/// the user's source-domain behavior sequences, averaged before the top-K
/// cut. An empty history averages to the uniform vector, whose ties keep
/// every prototype.
pub fn mask_from_user_history(
    bank: &PrototypeBank,
    entity_matrix: &Tensor,
    core: &BundleCore,
    user: u32,
) -> Result<MaskVector> {
    let mut entities: Vec<usize> = Vec::new();
    for &domain in &core.source_domains {
        for item in core.user_history(user, domain) {
            entities.extend(core.map.entities_or_err(item)?.iter().map(|&e| e as usize));
        }
    }
    if entities.is_empty() {
        return Ok(MaskVector::keep_all(bank.count()));
    }
    mask_from_entities(bank, entity_matrix, entities.into_iter())
}

fn mask_from_entities(
    bank: &PrototypeBank,
    entity_matrix: &Tensor,
    entities: impl Iterator<Item = usize>,
) -> Result<MaskVector> {
    let mut avg = vec![0.0; bank.count()];
    let mut count = 0usize;
    for e in entities {
        let s = similarity(entity_matrix.row(e), bank)?;
        crate::numerics::tensor::axpy(&mut avg, 1.0, &s);
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no entities to build a mask from"));
    }
    for v in &mut avg {
        *v /= count as f64;
    }
    topk_mask(&avg, bank.mask_k)
}

/// Full user encoding with the model's current parameters.
///
/// `mask` is required in prototype-enhanced mode and ignored in plain mode.
/// Users without any valid history receive the learned cold-start vector in
/// place of the extracted interests.
pub fn encode_user(
    model: &Model,
    core: &BundleCore,
    entity_matrix: &Tensor,
    user: u32,
    mode: TowerMode,
    mask: Option<&MaskVector>,
) -> Result<UserEncoding> {
    let seq = deconstruct(core, entity_matrix, user)?;
    let interests = match extract_interests(model, &seq) {
        Ok(z) => z,
        Err(_) => {
            let cold = model.params.get(names::TOWER_COLD).data().to_vec();
            vec![cold; model.cfg.interests]
        }
    };
    let enhanced = match mode {
        TowerMode::Plain => interests,
        TowerMode::PrototypeEnhanced => {
            let mask = mask.ok_or_else(|| {
                Error::invalid("prototype-enhanced encoding requires a mask")
            })?;
            let bank = bank_of(model);
            interests
                .iter()
                .map(|z| pe_attention(model, z, mask, &bank))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let universal = fuse(model, &enhanced)?;
    Ok(UserEncoding {
        interests: enhanced,
        universal,
    })
}

/// Entity-level training pairs for all source domains, in domain order then
/// record order (the entity-oriented pre-training view of the data).
pub fn source_entity_records(core: &BundleCore) -> Result<Vec<crate::data::EntityRecord>> {
    let mut all: Vec<InteractionRecord> = Vec::new();
    for &d in &core.source_domains {
        all.extend_from_slice(core.domain_records(d));
    }
    expand_to_entity_records(&all, &core.map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;
    use crate::numerics::gradcheck::check_gradient;
    use crate::numerics::rng::{gaussian, seeded, Stream};
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn test_model(seq_cap: usize) -> Model {
        Model::init(
            ModelConfig {
                embed_dim: 8,
                interests: 3,
                prototypes: 10,
                mask_k: 4,
                temperature: 0.2,
                gamma: 1.0,
                seq_cap,
                n_entities: 12,
                source_domains: vec![0, 1],
                use_graph_encoder: true,
                use_pea: true,
            },
            5,
        )
        .unwrap()
    }

    fn test_bundle(seq_cap: usize) -> BundleCore {
        let cfg = SyntheticConfig {
            entities: 12,
            topics: 3,
            users: 4,
            triplets: 30,
            items_per_source: 6,
            items_per_target: 4,
            records_per_source: 40,
            records_per_target: 15,
            seq_cap,
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg, 2).unwrap().core
    }

    fn entity_matrix(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed, Stream::Probe);
        gaussian(&mut rng, 1.0, &[n, d])
    }

    #[test]
    fn deconstruct_expands_items_in_order() {
        // Behaviors [i1 -> (e1, e2), i2 -> (e3)] in one domain become the
        // entity sequence [e1, e2, e3] plus padding.
        let mut core = test_bundle(5);
        core.map = crate::data::ItemEntityMap::new();
        core.map.insert(100, vec![1, 2], 12).unwrap();
        core.map.insert(101, vec![3], 12).unwrap();
        core.records.clear();
        core.records.insert(
            0,
            vec![InteractionRecord {
                domain: 0,
                user: 0,
                item: 101,
                behaviors: vec![100, 101],
                label: 0,
                timestamp: 9,
            }],
        );
        core.records.insert(1, vec![]);
        let hg = entity_matrix(12, 8, 1);
        let seq = deconstruct(&core, &hg, 0).unwrap();
        assert_eq!(seq.rows.shape(), &[10, 8]);
        assert_eq!(&seq.entity_ids[..3], &[1, 2, 3]);
        assert_eq!(seq.valid_count(), 3);
        assert_eq!(seq.rows.row(0), hg.row(1));
        // Domain 1 block (positions 5..10) is all padding.
        assert!(seq.valid[5..].iter().all(|v| !v));
        assert!(seq.rows.row(7).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconstruct_caps_to_most_recent_entities() {
        let mut core = test_bundle(4);
        core.map = crate::data::ItemEntityMap::new();
        for i in 0..6u32 {
            core.map.insert(200 + i, vec![i + 1], 12).unwrap();
        }
        core.records.clear();
        core.records.insert(
            0,
            vec![InteractionRecord {
                domain: 0,
                user: 0,
                item: 205,
                behaviors: (200..206).collect(),
                label: 0,
                timestamp: 0,
            }],
        );
        core.records.insert(1, vec![]);
        let hg = entity_matrix(12, 8, 2);
        let seq = deconstruct(&core, &hg, 0).unwrap();
        // Six entities, cap 4: keep the most recent four (items 202..205).
        assert_eq!(&seq.entity_ids[..4], &[3, 4, 5, 6]);
        assert_eq!(seq.valid_count(), 4);
    }

    fn manual_sequence(rows: Vec<Vec<f64>>, total: usize, d: usize) -> UserSequence {
        let mut t = Tensor::zeros(&[total, d]);
        let mut valid = vec![false; total];
        for (i, r) in rows.iter().enumerate() {
            t.row_mut(i).copy_from_slice(r);
            valid[i] = true;
        }
        UserSequence {
            rows: t,
            valid,
            entity_ids: vec![0; total],
        }
    }

    #[test]
    fn identical_rows_yield_that_row_as_every_interest() {
        let model = test_model(5);
        let r = vec![0.3, -0.2, 0.9, 0.0, 1.0, -1.0, 0.5, 0.1];
        let seq = manual_sequence(vec![r.clone(); 4], 10, 8);
        let interests = extract_interests(&model, &seq).unwrap();
        assert_eq!(interests.len(), 3);
        for z in &interests {
            for (a, b) in z.iter().zip(&r) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_valid_position_yields_that_row() {
        let model = test_model(5);
        let r = vec![1.0, 2.0, -3.0, 0.5, 0.0, 0.0, 4.0, -1.0];
        let seq = manual_sequence(vec![r.clone()], 10, 8);
        for z in extract_interests(&model, &seq).unwrap() {
            for (a, b) in z.iter().zip(&r) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn all_padding_is_an_empty_history_error() {
        let model = test_model(5);
        let seq = manual_sequence(vec![], 10, 8);
        let err = extract_interests(&model, &seq).unwrap_err();
        assert!(err.to_string().contains("empty history"));
    }

    #[test]
    fn padding_and_permutation_invariance() {
        let model = test_model(6);
        let mut rng = seeded(31, Stream::Probe);
        for _ in 0..10 {
            let k = rng.random_range(1..6);
            let rows: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let base = extract_interests(&model, &manual_sequence(rows.clone(), 6, 8)).unwrap();
            // Extra padding positions: widen the buffer.
            let padded = extract_interests(&model, &manual_sequence(rows.clone(), 12, 8)).unwrap();
            // Permuted valid positions.
            let mut perm = rows.clone();
            perm.shuffle(&mut rng);
            let permuted = extract_interests(&model, &manual_sequence(perm, 6, 8)).unwrap();
            for (a, b) in base.iter().zip(&padded) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12, "padding changed an interest");
                }
            }
            for (a, b) in base.iter().zip(&permuted) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() <= 1e-12, "permutation changed an interest");
                }
            }
        }
    }

    #[test]
    fn single_kept_prototype_pins_attention() {
        let model = test_model(5);
        let bank = bank_of(&model);
        let z: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        //

        let s: Vec<f64> = (0..10).map(|i| if i == 6 { 1.0 } else { 0.0 }).collect();
        let mask = topk_mask(&s, 1).unwrap();
        assert_eq!(mask.kept(), &[6]);
        let out = pe_attention(&model, &z, &mask, &bank).unwrap();
        // Expected: MLP(P_6 + z) regardless of logits.
        let mut g = Graph::new();
        let mlp = mlp_leaves(&mut g, &model, names::PEA_MLP, |g, t| g.input(t.clone()));
        let mut input = z.clone();
        crate::numerics::tensor::axpy(&mut input, 1.0, bank.rows.row(6));
        let xin = g.input(Tensor::vector(input));
        let want = mlp_vec(&mut g, xin, &mlp);
        for (a, b) in out.iter().zip(g.value(want).data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn keep_all_mask_with_orthogonal_interest_gives_centroid_context() {
        // z orthogonal to every prototype row -> logits zero -> uniform
        // attention -> MLP input = mean(P rows) + z.
        let mut model = test_model(5);
        let d = 8;
        let mut rows = Tensor::zeros(&[10, d]);
        let mut rng = seeded(41, Stream::Probe);
        for i in 0..10 {
            for j in 0..4 {
                rows.set(i, j, rng.random_range(-1.0..1.0));
            }
        }
        *model.params.get_mut(names::PROTOTYPES) = rows.clone();
        let bank = bank_of(&model);
        let z = vec![0.0, 0.0, 0.0, 0.0, 1.0, -2.0, 0.5, 0.3];
        let mask = MaskVector::keep_all(10);
        let out = pe_attention(&model, &z, &mask, &bank).unwrap();
        let mut input = z.clone();
        for j in 0..d {
            let mean: f64 = (0..10).map(|i| rows.get(i, j)).sum::<f64>() / 10.0;
            input[j] += mean;
        }
        let mut g = Graph::new();
        let mlp = mlp_leaves(&mut g, &model, names::PEA_MLP, |g, t| g.input(t.clone()));
        let xin = g.input(Tensor::vector(input));
        let want = mlp_vec(&mut g, xin, &mlp);
        for (a, b) in out.iter().zip(g.value(want).data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn fusion_of_identical_interests_is_identity_and_m1_is_passthrough() {
        let model = test_model(5);
        let r: Vec<f64> = (0..8).map(|i| (i as f64 - 3.0) * 0.4).collect();
        let fused = fuse(&model, &[r.clone(), r.clone(), r.clone()]).unwrap();
        for (a, b) in fused.iter().zip(&r) {
            assert!((a - b).abs() <= 1e-12);
        }
        let single = fuse(&model, &[r.clone()]).unwrap();
        for (a, b) in single.iter().zip(&r) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn fusion_weights_sum_to_one_and_output_in_hull() {
        let model = test_model(5);
        let mut rng = seeded(51, Stream::Probe);
        for _ in 0..20 {
            let interests: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let fused = fuse(&model, &interests).unwrap();
            for j in 0..8 {
                let (lo, hi) = interests
                    .iter()
                    .map(|z| z[j])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
                        (l.min(x), h.max(x))
                    });
                assert!(fused[j] >= lo - 1e-12 && fused[j] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn enhanced_and_plain_modes_differ_and_cold_users_get_cold_vector() {
        let model = test_model(4);
        let core = test_bundle(4);
        let hg = entity_matrix(12, 8, 9);
        let bank = bank_of(&model);
        let user = core.source_users()[0];
        let mask = mask_from_user_history(&bank, &hg, &core, user).unwrap();
        let plain = encode_user(&model, &core, &hg, user, TowerMode::Plain, None).unwrap();
        let enhanced =
            encode_user(&model, &core, &hg, user, TowerMode::PrototypeEnhanced, Some(&mask))
                .unwrap();
        let diff: f64 = plain
            .universal
            .iter()
            .zip(&enhanced.universal)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "enhanced mode should differ, total delta {diff}");

        // A user id with no interactions anywhere: cold-start vector.
        let cold = encode_user(&model, &core, &hg, 9999, TowerMode::Plain, None).unwrap();
        let cold_vec = model.params.get(names::TOWER_COLD).data();
        for z in &cold.interests {
            assert_eq!(z.as_slice(), cold_vec);
        }
        for (a, b) in cold.universal.iter().zip(cold_vec) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tower_gradient_matches_finite_differences_end_to_end() {
        // Loss = sum(tanh(z_u)) on a 3-entity history, differentiated w.r.t.
        // every tower parameter: W_A, kernels, fusion, PE-MLP, and the bank.
        let d = 8;
        let mut rng = seeded(61, Stream::Probe);
        let seq_rows = gaussian(&mut rng, 1.0, &[3, d]);
        let kept: Arc<Vec<usize>> = Arc::new(vec![1, 4, 7]);
        let inputs = vec![
            gaussian(&mut rng, 0.5, &[d, d]),     // W_A
            gaussian(&mut rng, 0.5, &[2, d]),     // kernels (M = 2)
            gaussian(&mut rng, 0.5, &[d, d]),     // fuse W
            gaussian(&mut rng, 0.5, &[d]),        // fuse v
            gaussian(&mut rng, 0.5, &[10, d]),    // bank
            gaussian(&mut rng, 0.5, &[d, d]),     // pea w1
            gaussian(&mut rng, 0.1, &[d]),        // pea b1
            gaussian(&mut rng, 0.5, &[d, d]),     // pea w2
            gaussian(&mut rng, 0.1, &[d]),        // pea b2
            gaussian(&mut rng, 0.5, &[d, d]),     // pea w3
            gaussian(&mut rng, 0.1, &[d]),        // pea b3
        ];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let seq = g.input(seq_rows.clone());
            let pen = Tensor::vector(vec![0.0; 3]);
            let interests = interests_nodes(g, seq, &pen, ids[0], ids[1]);
            let mlp = MlpNodes {
                w1: ids[5],
                b1: ids[6],
                w2: ids[7],
                b2: ids[8],
                w3: ids[9],
                b3: ids[10],
            };
            let p_kept = g.gather_rows(ids[4], kept.clone());
            let enhanced: Vec<NodeId> = interests
                .iter()
                .map(|&z| {
                    let logits = g.matvec(ids[4], z);
                    pe_attention_nodes(g, z, logits, p_kept, kept.clone(), &mlp, d)
                })
                .collect();
            let zu = fuse_nodes(g, &enhanced, ids[2], ids[3]);
            let t = g.tanh(zu);
            g.sum(t)
        };
        let f = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = ts.iter().map(|t| g.param(t.clone())).collect();
            let l = build(&mut g, &ids);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let l = build(&mut g, &ids);
        let grads = g.backward(l).unwrap();
        let analytic: Vec<Tensor> = ids
            .iter()
            .zip(&inputs)
            .map(|(id, t)| grads.get_or_zeros(*id, t.shape()))
            .collect();
        let report = check_gradient(&mut rng, &inputs, &f, &analytic, 100);
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
