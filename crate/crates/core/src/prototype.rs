//! The prototype bank and its mathematics: normalized similarity, the
//! prototype-level view, the symmetric InfoNCE contrastive loss over paired
//! views, and the top-K relevance mask.


use crate::error::{Error, Result};
use crate::numerics::{softmax, Graph, NodeId, Tensor};

/// The learnable prototype matrix with its temperature and mask size.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    /// `(n, d)` prototype rows.
    pub rows: Tensor,
    pub temperature: f64,
    pub mask_k: usize,
}

pub const DEFAULT_PROTOTYPES: usize = 900;
pub const DEFAULT_MASK_K: usize = 160;
pub const DEFAULT_TEMPERATURE: f64 = 0.2;

impl PrototypeBank {
    pub fn new(rows: Tensor, temperature: f64, mask_k: usize) -> Result<Self> {
        let n = rows.rows();
        if n == 0 {
            return Err(Error::invalid("prototype bank needs at least one row"));
        }
        if mask_k == 0 || mask_k > n {
            return Err(Error::invalid(format!("mask size must be in 1..={n}, got {mask_k}")));
        }
        if temperature <= 0.0 {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !rows.all_finite() {
            return Err(Error::invalid("prototype rows must be finite"));
        }
        Ok(PrototypeBank {
            rows,
            temperature,
            mask_k,
        })
    }

    pub fn count(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

/// Normalized similarity of an embedding to every prototype:
/// `s = softmax(P . h)`.
pub fn similarity(h: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    if h.len() != bank.dim() {
        return Err(Error::invalid(format!(
            "embedding dim {} does not match prototype dim {}",
            h.len(),
            bank.dim()
        )));
    }
    let logits: Vec<f64> = (0..bank.count())
        .map(|i| crate::numerics::tensor::dot(bank.rows.row(i), h))
        .collect();
    softmax(&logits)
}

/// Prototype-level view: `h_hat = P^T . s`, a convex combination of rows.
pub fn prototype_view(s: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    if s.len() != bank.count() {
        return Err(Error::invalid("similarity length does not match bank size"));
    }
    let mut out = vec![0.0; bank.dim()];
    for (i, &w) in s.iter().enumerate() {
        crate::numerics::tensor::axpy(&mut out, w, bank.rows.row(i));
    }
    Ok(out)
}

/// The `{0, -inf}` mask keeping entries at least as large as the Kth-largest
/// similarity. Ties at the threshold are all kept.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector {
    values: Vec<f64>,
    kept: Vec<usize>,
}

impl MaskVector {
    /// Mask entries: 0.0 where kept, −inf where masked.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Kept indices, ascending.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// All-zero mask over `n` prototypes (K = n case).
    pub fn keep_all(n: usize) -> Self {
        MaskVector {
            values: vec![0.0; n],
            kept: (0..n).collect(),
        }
    }
}

/// Top-K mask over a similarity vector: entry i is kept iff
/// `s[i] >= (Kth-largest value of s)`.
pub fn topk_mask(s: &[f64], k: usize) -> Result<MaskVector> {
    let n = s.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("mask size must be in 1..={n}, got {k}")));
    }
    let mut sorted: Vec<f64> = s.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("similarities must be finite"));
    let threshold = sorted[k - 1];
    let mut values = vec![f64::NEG_INFINITY; n];
    let mut kept = Vec::with_capacity(k);
    for (i, &v) in s.iter().enumerate() {
        if v >= threshold {
            values[i] = 0.0;
            kept.push(i);
        }
    }
    Ok(MaskVector { values, kept })
}

/// Symmetric InfoNCE over paired views with cosine similarity.
///
/// `views` and `counterparts` hold one row per element; row i of each is a
/// positive pair, and every other in-batch row of `counterparts` (resp.
/// `views`) is a negative for direction one (resp. two). Both directional
/// denominators include the positive term, so each `-log` term and the loss
/// are nonnegative. Returns the per-element mean of the two-term sum.
pub fn infonce(views: &Tensor, counterparts: &Tensor, temperature: f64) -> Result<f64> {
    validate_views(views, counterparts, temperature)?;
    let mut g = Graph::new();
    let a = g.input(views.clone());
    let b = g.input(counterparts.clone());
    let loss = infonce_nodes(&mut g, a, b, temperature);
    Ok(g.value(loss).item())
}

fn validate_views(views: &Tensor, counterparts: &Tensor, temperature: f64) -> Result<()> {
    if views.shape() != counterparts.shape() {
        return Err(Error::invalid("paired views must share a shape"));
    }
    if views.rows() < 2 {
        return Err(Error::invalid("no negatives available: batch of 1"));
    }
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    for r in 0..views.rows() {
        let n1: f64 = views.row(r).iter().map(|x| x * x).sum();
        let n2: f64 = counterparts.row(r).iter().map(|x| x * x).sum();
        if n1 == 0.0 || n2 == 0.0 {
            return Err(Error::invalid(format!("degenerate zero-norm view at row {r}")));
        }
    }
    Ok(())
}

/// Append the symmetric InfoNCE loss over paired view nodes (rows of two
/// `(m, d)` tensors). The cosine matrix is computed once; the row direction
/// and the column direction each contribute a cross-entropy against the
/// diagonal, and the result is the per-row mean of their sum.
pub fn infonce_nodes(g: &mut Graph, views: NodeId, counterparts: NodeId, temperature: f64) -> NodeId {
    let m = g.value(views).rows();
    let va = g.normalize_rows(views);
    let vb = g.normalize_rows(counterparts);
    let cos = g.matmul_nt(va, vb);
    let scaled = g.scale(cos, 1.0 / temperature);
    let diag = g.diag_part(scaled);
    let row_lse = g.logsumexp_rows(scaled);
    let row_terms = g.sub(row_lse, diag);
    // Column direction: log-sum-exp over each column = rows of the transpose.
    // matmul_nt(vb, va) is exactly cos^T.
    let cos_t = g.matmul_nt(vb, va);
    let scaled_t = g.scale(cos_t, 1.0 / temperature);
    let col_lse = g.logsumexp_rows(scaled_t);
    let col_terms = g.sub(col_lse, diag);
    let both = g.add(row_terms, col_terms);
    let total = g.sum(both);
    g.scale(total, 1.0 / m as f64)
}

/// Eq.5 -> Eq.6 -> Eq.7 for a batch of entity embeddings against the bank:
/// each embedding's positive counterpart is its own prototype-level view,
/// negatives are the other in-batch entities (uniform in-batch policy).
pub fn contrastive_loss(embeddings: &Tensor, bank: &PrototypeBank) -> Result<f64> {
    if embeddings.rows() < 2 {
        return Err(Error::invalid("no negatives available: batch of 1"));
    }
    if embeddings.cols() != bank.dim() {
        return Err(Error::invalid("embedding dim does not match bank"));
    }
    let mut g = Graph::new();
    let h = g.input(embeddings.clone());
    let p = g.input(bank.rows.clone());
    let loss = contrastive_nodes(&mut g, h, p, bank.temperature);
    Ok(g.value(loss).item())
}

/// Graph form of [`contrastive_loss`]: `h_hat = softmax(H P^T) P`, then the
/// symmetric InfoNCE between `H` rows and their views.
pub fn contrastive_nodes(g: &mut Graph, embeddings: NodeId, bank_rows: NodeId, temperature: f64) -> NodeId {
    let logits = g.matmul_nt(embeddings, bank_rows);
    let sims = g.softmax_rows(logits);
    let views = g.matmul(sims, bank_rows);
    infonce_nodes(g, embeddings, views, temperature)
}

/// Argmax-prototype assignment and its similarity for every embedding row.
pub fn assignments(embeddings: &Tensor, bank: &PrototypeBank) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(embeddings.rows());
    for e in 0..embeddings.rows() {
        let s = similarity(embeddings.row(e), bank)?;
        let (best, val) = s
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        out.push((best, *val));
    }
    Ok(out)
}

/// Majority-vote purity of an assignment against reference labels: each
/// cluster votes for its most common label; purity is the fraction of
/// elements matching their cluster's vote.
pub fn majority_purity(assigned: &[usize], labels: &[u32]) -> f64 {
    assert_eq!(assigned.len(), labels.len());
    if assigned.is_empty() {
        return 0.0;
    }
    let mut per_cluster: std::collections::BTreeMap<usize, std::collections::BTreeMap<u32, usize>> =
        std::collections::BTreeMap::new();
    for (&c, &l) in assigned.iter().zip(labels) {
        *per_cluster.entry(c).or_default().entry(l).or_default() += 1;
    }
    let hits: usize = per_cluster
        .values()
        .map(|counts| counts.values().copied().max().unwrap_or(0))
        .sum();
    hits as f64 / assigned.len() as f64
}

/// Render the assignment export line for one entity:
/// `entity_id<TAB>argmax_prototype<TAB>max_similarity`.
pub fn assignment_line(entity: u32, proto: usize, sim: f64) -> String {
    format!("{entity}\t{proto}\t{sim:.6}")
}
