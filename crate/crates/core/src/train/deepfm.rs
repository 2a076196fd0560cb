//! The fine-tuning heads: the DeepFM branch over categorical profile fields
//! and the outer scoring MLP.
//!
//! Branch output per sample is the concatenation
//! `(8-dim deep top || FM second-order scalar || first-order scalar)`; the
//! outer MLP scores `sigmoid(MLP(z_u || z_i || branch))`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::data::ProfileSchema;
use crate::error::{Error, Result};
use crate::model::{insert_mlp, ParamSet};
use crate::numerics::rng::{glorot_matrix, seeded, Stream};
use crate::numerics::{mlp_rows, Graph, MlpNodes, NodeId, Tensor};

pub const FM_LATENT: usize = 8;
/// Deep tower layout 64-32-8: two ReLU hidden layers, 8-dim top.
pub const DEEP_H1: usize = 64;
pub const DEEP_H2: usize = 32;
pub const DEEP_TOP: usize = 8;
/// Branch output width: deep top + second-order + first-order.
pub const BRANCH_DIM: usize = DEEP_TOP + 2;
/// Outer MLP hidden widths.
pub const OUTER_H1: usize = 64;
pub const OUTER_H2: usize = 32;

/// Field layout of the DeepFM branch: user fields then item fields.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepFmSpec {
    pub cards: Vec<u32>,
    pub n_user_fields: usize,
}

impl DeepFmSpec {
    pub fn from_schema(schema: &ProfileSchema) -> Self {
        let mut cards = schema.user_fields.clone();
        cards.extend_from_slice(&schema.item_fields);
        DeepFmSpec {
            cards,
            n_user_fields: schema.user_fields.len(),
        }
    }

    pub fn n_fields(&self) -> usize {
        self.cards.len()
    }
}

fn field_embed_name(f: usize) -> String {
    format!("fm.field{f}.embed")
}

fn field_first_name(f: usize) -> String {
    format!("fm.field{f}.first")
}

/// Freshly initialized fine-tuning heads (field embeddings, first-order
/// weights, deep tower, outer MLP).
pub fn init_heads(spec: &DeepFmSpec, embed_dim: usize, seed: u64) -> ParamSet {
    let mut rng: ChaCha8Rng = seeded(seed, Stream::Params);
    let mut heads = ParamSet::new();
    for (f, &card) in spec.cards.iter().enumerate() {
        heads.insert(&field_embed_name(f), glorot_matrix(&mut rng, card as usize, FM_LATENT));
        heads.insert(&field_first_name(f), glorot_matrix(&mut rng, card as usize, 1));
    }
    let deep_in = spec.n_fields() * FM_LATENT;
    insert_mlp(&mut heads, &mut rng, "fm.deep", (deep_in, DEEP_H1, DEEP_H2, DEEP_TOP));
    insert_mlp(
        &mut heads,
        &mut rng,
        "ft.mlp",
        (2 * embed_dim + BRANCH_DIM, OUTER_H1, OUTER_H2, 1),
    );
    heads
}

/// Per-record categorical values, user fields then item fields, dense in
/// spec order.
pub fn field_values(
    spec: &DeepFmSpec,
    user_vals: &[u32],
    item_vals: &[u32],
) -> Result<Vec<usize>> {
    if user_vals.len() != spec.n_user_fields
        || item_vals.len() != spec.n_fields() - spec.n_user_fields
    {
        return Err(Error::invalid("profile value count does not match schema"));
    }
    let mut out: Vec<usize> = Vec::with_capacity(spec.n_fields());
    for (f, &v) in user_vals.iter().chain(item_vals).enumerate() {
        if v >= spec.cards[f] {
            return Err(Error::invalid(format!(
                "field {f} value {v} exceeds cardinality {}",
                spec.cards[f]
            )));
        }
        out.push(v as usize);
    }
    Ok(out)
}

/// Append the DeepFM branch for a batch: `rows[r]` holds the record's dense
/// field values. Output node is `(B, BRANCH_DIM)`.
pub fn deepfm_nodes(
    g: &mut Graph,
    spec: &DeepFmSpec,
    rows: &[Vec<usize>],
    mut leaf: impl FnMut(&mut Graph, &str) -> NodeId,
) -> NodeId {
    let b = rows.len();
    let mut embeds: Vec<NodeId> = Vec::with_capacity(spec.n_fields());
    let mut firsts: Vec<NodeId> = Vec::with_capacity(spec.n_fields());
    for f in 0..spec.n_fields() {
        let ids: Arc<Vec<usize>> = Arc::new(rows.iter().map(|r| r[f]).collect());
        let table = leaf(g, &field_embed_name(f));
        embeds.push(g.gather_rows(table, ids.clone()));
        let first = leaf(g, &field_first_name(f));
        firsts.push(g.gather_rows(first, ids));
    }
    // FM second order via the square-of-sum identity:
    // 0.5 * (|sum_f v_f|^2 - sum_f |v_f|^2) per row.
    let mut total = embeds[0];
    for &e in &embeds[1..] {
        total = g.add(total, e);
    }
    let sq_of_sum = g.row_dot(total, total);
    let mut sum_of_sq = g.row_dot(embeds[0], embeds[0]);
    for &e in &embeds[1..] {
        let s = g.row_dot(e, e);
        sum_of_sq = g.add(sum_of_sq, s);
    }
    let diff = g.sub(sq_of_sum, sum_of_sq);
    let fm2 = g.scale(diff, 0.5);
    let fm2 = g.reshape(fm2, vec![b, 1]);
    let mut first_order = firsts[0];
    for &f in &firsts[1..] {
        first_order = g.add(first_order, f);
    }
    let deep_in = g.concat_cols(&embeds);
    let deep_mlp = MlpNodes {
        w1: leaf(g, "fm.deep.w1"),
        b1: leaf(g, "fm.deep.b1"),
        w2: leaf(g, "fm.deep.w2"),
        b2: leaf(g, "fm.deep.b2"),
        w3: leaf(g, "fm.deep.w3"),
        b3: leaf(g, "fm.deep.b3"),
    };
    let deep = mlp_rows(g, deep_in, &deep_mlp);
    g.concat_cols(&[deep, fm2, first_order])
}

/// Append the outer scoring logits for a batch:
/// `MLP(z_u || z_i || DeepFM(x_u || x_i))`, shape `(B, 1)`.
pub fn score_logits_nodes(
    g: &mut Graph,
    spec: &DeepFmSpec,
    zu: NodeId,
    zi: NodeId,
    rows: &[Vec<usize>],
    mut leaf: impl FnMut(&mut Graph, &str) -> NodeId,
) -> NodeId {
    let branch = deepfm_nodes(g, spec, rows, &mut leaf);
    let joined = g.concat_cols(&[zu, zi, branch]);
    let outer = MlpNodes {
        w1: leaf(g, "ft.mlp.w1"),
        b1: leaf(g, "ft.mlp.b1"),
        w2: leaf(g, "ft.mlp.w2"),
        b2: leaf(g, "ft.mlp.b2"),
        w3: leaf(g, "ft.mlp.w3"),
        b3: leaf(g, "ft.mlp.b3"),
    };
    mlp_rows(g, joined, &outer)
}

/// Preference score for one (user, item) pair given embeddings and profile
/// values: `sigmoid(MLP(z_u || z_i || DeepFM(x_u || x_i)))`.
pub fn finetune_score(
    heads: &ParamSet,
    spec: &DeepFmSpec,
    z_u: &[f64],
    z_i: &[f64],
    user_vals: &[u32],
    item_vals: &[u32],
) -> Result<f64> {
    let vals = field_values(spec, user_vals, item_vals)?;
    let mut g = Graph::new();
    let zu = g.input(Tensor::matrix(1, z_u.len(), z_u.to_vec()));
    let zi = g.input(Tensor::matrix(1, z_i.len(), z_i.to_vec()));
    let logits = score_logits_nodes(&mut g, spec, zu, zi, &[vals], |g, name| {
        g.input(heads.get(name).clone())
    });
    let prob = g.sigmoid(logits);
    Ok(g.value(prob).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradient;
    use crate::numerics::rng::{gaussian, seeded, Stream};
    use rand::Rng;

    fn spec() -> DeepFmSpec {
        DeepFmSpec {
            cards: vec![5, 8, 5, 8],
            n_user_fields: 2,
        }
    }

    #[test]
    fn zeroed_heads_score_one_half() {
        let s = spec();
        let mut heads = init_heads(&s, 16, 1);
        for name in heads.names().to_vec() {
            let t = heads.get_mut(&name);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let z = vec![0.3; 16];
        let p = finetune_score(&heads, &s, &z, &z, &[1, 2], &[3, 4]).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn scores_stay_in_open_unit_interval() {
        let s = spec();
        let heads = init_heads(&s, 16, 2);
        let mut rng = seeded(3, Stream::Probe);
        for _ in 0..1000 {
            let zu: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let zi: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
            let uv = [rng.random_range(0..5), rng.random_range(0..8)];
            let iv = [rng.random_range(0..5), rng.random_range(0..8)];
            let p = finetune_score(&heads, &s, &zu, &zi, &uv, &iv).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn deep_tower_dimensions_are_64_32_8_and_fm_latent_8() {
        let s = spec();
        let heads = init_heads(&s, 16, 4);
        assert_eq!(heads.get("fm.deep.w1").shape(), &[4 * FM_LATENT, 64]);
        assert_eq!(heads.get("fm.deep.w2").shape(), &[64, 32]);
        assert_eq!(heads.get("fm.deep.w3").shape(), &[32, 8]);
        assert_eq!(heads.get("fm.field0.embed").cols(), 8);
        // Outer MLP input: 2 * embed + (8 || 1 || 1).
        assert_eq!(heads.get("ft.mlp.w1").rows(), 32 + BRANCH_DIM);
    }

    #[test]
    fn removing_the_branch_changes_scores() {
        // Zeroing the branch's view in the outer MLP (the ablation of the
        // DeepFM inputs) must change scores while any branch weight is
        // nonzero.
        let s = spec();
        let heads = init_heads(&s, 8, 5);
        let z = vec![0.25; 8];
        let with = finetune_score(&heads, &s, &z, &z, &[1, 2], &[3, 4]).unwrap();
        let mut ablated = heads.clone();
        // Cut the outer MLP's weights on the branch block (last BRANCH_DIM
        // input rows).
        {
            let w1 = ablated.get_mut("ft.mlp.w1");
            let rows = w1.rows();
            for r in rows - BRANCH_DIM..rows {
                for v in w1.row_mut(r) {
                    *v = 0.0;
                }
            }
        }
        let without = finetune_score(&ablated, &s, &z, &z, &[1, 2], &[3, 4]).unwrap();
        assert!((with - without).abs() > 1e-9);
    }

    #[test]
    fn fm_second_order_matches_pairwise_oracle() {
        // The square-of-sum identity must equal the explicit pairwise sum
        // of dot products.
        let s = spec();
        let heads = init_heads(&s, 8, 6);
        let vals = vec![vec![1usize, 3, 2, 7], vec![0, 0, 4, 1]];
        let mut g = Graph::new();
        let out = deepfm_nodes(&mut g, &s, &vals, |g, n| g.input(heads.get(n).clone()));
        let branch = g.value(out);
        for (r, row_vals) in vals.iter().enumerate() {
            let embeds: Vec<&[f64]> = (0..4)
                .map(|f| heads.get(&field_embed_name(f)).row(row_vals[f]))
                .collect();
            let mut pairwise = 0.0;
            for i in 0..4 {
                for j in i + 1..4 {
                    pairwise += crate::numerics::tensor::dot(embeds[i], embeds[j]);
                }
            }
            let got = branch.get(r, DEEP_TOP);
            assert!((got - pairwise).abs() <= 1e-10, "row {r}: {got} vs {pairwise}");
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        // Loss = mean BCE of the outer logits; FD over every head tensor and
        // both embedding inputs (Eq. 11 block).
        let s = spec();
        let heads = init_heads(&s, 6, 7);
        let mut rng = seeded(8, Stream::Probe);
        let zu = gaussian(&mut rng, 1.0, &[2, 6]);
        let zi = gaussian(&mut rng, 1.0, &[2, 6]);
        let vals = vec![vec![1usize, 3, 2, 7], vec![4, 5, 0, 2]];
        let labels = Arc::new(vec![1.0, 0.0]);
        let names: Vec<String> = heads.names().to_vec();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| heads.get(n).clone()).collect();
        inputs.push(zu.clone());
        inputs.push(zi.clone());
        let build = |g: &mut Graph, ts: &[Tensor]| -> (NodeId, Vec<NodeId>) {
            let by_name: std::collections::HashMap<&str, usize> = names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.as_str(), i))
                .collect();
            let ids: Vec<NodeId> = ts.iter().map(|t| g.param(t.clone())).collect();
            let zun = ids[names.len()];
            let zin = ids[names.len() + 1];
            let logits = score_logits_nodes(g, &s, zun, zin, &vals, |_, name| ids[by_name[name]]);
            let flat = g.reshape(logits, vec![2]);
            (g.bce_with_logits_mean(flat, labels.clone()), ids)
        };
        let f = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let (l, _) = build(&mut g, ts);
            g.value(l).item()
        };
        let mut g = Graph::new();
        let (loss, ids) = build(&mut g, &inputs);
        let grads = g.backward(loss).unwrap();
        let analytic: Vec<Tensor> = inputs
            .iter()
            .zip(&ids)
            .map(|(t, id)| grads.get_or_zeros(*id, t.shape()))
            .collect();
        let report = check_gradient(&mut rng, &inputs, &f, &analytic, 100);
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

}
