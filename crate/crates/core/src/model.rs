//! Named parameter sets, model assembly, and the checkpoint format.
//!
//! A checkpoint is a pair of files sharing a stem: `<stem>.manifest` (text:
//! `#key<TAB>value` header lines for the model configuration, then one
//! `name<TAB>dims` line per parameter in order) and `<stem>.bin` (the
//! parameters' f64 values, little-endian, concatenated in manifest order).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::FEATURE_DIM;
use crate::error::{Error, Result};
use crate::numerics::rng::{gaussian, glorot, glorot_matrix, seeded, Stream};
use crate::numerics::{AdamState, Tensor};

/// An ordered, name-addressed collection of parameter tensors. Order is
/// construction order and fixed for the life of the set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.idx(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.idx(name);
        &mut self.tensors[i]
    }

    pub fn by_pos(&self, pos: usize) -> (&str, &Tensor) {
        (&self.names[pos], &self.tensors[pos])
    }

    pub fn by_pos_mut(&mut self, pos: usize) -> &mut Tensor {
        &mut self.tensors[pos]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Fresh Adam states aligned with this set's order.
    pub fn adam_states(&self, lr: f64) -> Vec<AdamState> {
        self.tensors.iter().map(|t| AdamState::new(lr, t.shape())).collect()
    }
}

/// Gradient accumulator keyed by parameter position.
#[derive(Debug)]
pub struct GradAccum {
    grads: Vec<Tensor>,
}

impl GradAccum {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradAccum {
            grads: params.tensors.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn add(&mut self, params: &ParamSet, name: &str, grad: &Tensor) {
        self.grads[params.idx(name)].add_assign(grad);
    }

    pub fn get(&self, params: &ParamSet, name: &str) -> &Tensor {
        &self.grads[params.idx(name)]
    }

    pub fn by_pos(&self, pos: usize) -> &Tensor {
        &self.grads[pos]
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }
}

/// Hyperparameters that fix the model's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Embedding width d.
    pub embed_dim: usize,
    /// Interest kernel count M.
    pub interests: usize,
    /// Prototype count n.
    pub prototypes: usize,
    /// Prototype mask size K.
    pub mask_k: usize,
    /// Contrastive temperature tau.
    pub temperature: f64,
    /// Contrastive loss weight gamma.
    pub gamma: f64,
    /// Per-domain entity-sequence cap H.
    pub seq_cap: usize,
    /// Entity count the encoder side is built for.
    pub n_entities: usize,
    /// Source domains, ascending; fixes sequence block order.
    pub source_domains: Vec<u32>,
    /// Graph-learning encoder on (off = learned lookup table, "w/o GL").
    pub use_graph_encoder: bool,
    /// Prototype-enhanced attention on (off = plain tower, "w/o PEA").
    pub use_pea: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.interests == 0 || self.prototypes == 0 {
            return Err(Error::config("embed_dim, interests, prototypes must be positive"));
        }
        if self.mask_k == 0 || self.mask_k > self.prototypes {
            return Err(Error::config(format!(
                "mask_k must be in 1..={}, got {}",
                self.prototypes, self.mask_k
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.gamma < 0.0 {
            return Err(Error::config("gamma must be nonnegative"));
        }
        if self.n_entities == 0 || self.source_domains.is_empty() {
            return Err(Error::config("need entities and at least one source domain"));
        }
        if !self.use_graph_encoder && self.embed_dim < FEATURE_DIM {
            return Err(Error::config(format!(
                "lookup-table mode pads {FEATURE_DIM}-dim features, needs embed_dim >= {FEATURE_DIM}"
            )));
        }
        Ok(())
    }
}

/// The trainable backbone plus the pre-training decoder head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

pub mod names {
    pub const GAT_L1_W: &str = "gat.l1.weight";
    pub const GAT_L1_A: &str = "gat.l1.attn";
    pub const GAT_L2_W: &str = "gat.l2.weight";
    pub const GAT_L2_A: &str = "gat.l2.attn";
    pub const ENTITY_TABLE: &str = "embed.table";
    pub const TOWER_WA: &str = "tower.attn_weight";
    pub const TOWER_KERNELS: &str = "tower.kernels";
    pub const TOWER_FUSE_W: &str = "tower.fuse_weight";
    pub const TOWER_FUSE_V: &str = "tower.fuse_vector";
    pub const TOWER_COLD: &str = "tower.cold_start";
    pub const PEA_MLP: &str = "pea.mlp";
    pub const PROTOTYPES: &str = "proto.bank";
    pub const DECODER_MLP: &str = "dec.mlp";
}

/// Insert the six tensors of a two-hidden-layer MLP under `<prefix>.{w,b}{1..3}`.
pub fn insert_mlp(
    params: &mut ParamSet,
    rng: &mut rand_chacha::ChaCha8Rng,
    prefix: &str,
    dims: (usize, usize, usize, usize),
) {
    let (d_in, h1, h2, d_out) = dims;
    params.insert(&format!("{prefix}.w1"), glorot_matrix(rng, d_in, h1));
    params.insert(&format!("{prefix}.b1"), Tensor::zeros(&[h1]));
    params.insert(&format!("{prefix}.w2"), glorot_matrix(rng, h1, h2));
    params.insert(&format!("{prefix}.b2"), Tensor::zeros(&[h2]));
    params.insert(&format!("{prefix}.w3"), glorot_matrix(rng, h2, d_out));
    params.insert(&format!("{prefix}.b3"), Tensor::zeros(&[d_out]));
}

impl Model {
    /// Build a freshly initialized model. All randomness comes from the
    /// `(seed, Params)` stream, so construction order fixes the values.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut rng = seeded(seed, Stream::Params);
        let mut params = ParamSet::new();
        if cfg.use_graph_encoder {
            params.insert(names::GAT_L1_W, glorot_matrix(&mut rng, FEATURE_DIM, d));
            params.insert(names::GAT_L1_A, glorot(&mut rng, 2 * d, 1, &[2 * d]));
            params.insert(names::GAT_L2_W, glorot_matrix(&mut rng, d, d));
            params.insert(names::GAT_L2_A, glorot(&mut rng, 2 * d, 1, &[2 * d]));
        } else {
            // Learned lookup: 32-dim initial features zero-padded to d, filled
            // in by `attach_entity_table` once the bundle features are known.
            params.insert(names::ENTITY_TABLE, Tensor::zeros(&[cfg.n_entities, d]));
        }
        params.insert(names::TOWER_WA, glorot_matrix(&mut rng, d, d));
        params.insert(names::TOWER_KERNELS, glorot(&mut rng, d, cfg.interests, &[cfg.interests, d]));
        params.insert(names::TOWER_FUSE_W, glorot_matrix(&mut rng, d, d));
        params.insert(names::TOWER_FUSE_V, glorot(&mut rng, d, 1, &[d]));
        params.insert(names::TOWER_COLD, glorot(&mut rng, d, 1, &[d]));
        if cfg.use_pea {
            insert_mlp(&mut params, &mut rng, names::PEA_MLP, (d, d, d, d));
        }
        let proto_std = 1.0 / (d as f64).sqrt();
        params.insert(
            names::PROTOTYPES,
            gaussian(&mut rng, proto_std, &[cfg.prototypes, d]),
        );
        insert_mlp(&mut params, &mut rng, names::DECODER_MLP, (2 * d, d, d / 2, 1));
        Ok(Model { cfg, params })
    }

    /// Seed the lookup table (w/o GL mode) from the bundle's 32-dim features,
    /// zero-padded to the embedding width.
    pub fn attach_entity_table(&mut self, features: &Tensor) {
        if self.cfg.use_graph_encoder {
            return;
        }
        let d = self.cfg.embed_dim;
        let table = self.params.get_mut(names::ENTITY_TABLE);
        for e in 0..features.rows() {
            table.row_mut(e)[..FEATURE_DIM].copy_from_slice(features.row(e));
            for v in &mut table.row_mut(e)[FEATURE_DIM..d] {
                *v = 0.0;
            }
        }
    }

    /// Names of parameters the frozen fine-tuning flow must not touch (the
    /// whole backbone: encoder, tower, attention MLP, prototypes, decoder).
    pub fn backbone_names(&self) -> Vec<String> {
        self.params.names().to_vec()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

/// FNV-1a over a byte stream; used to tie embedding snapshots to the
/// checkpoint that produced them.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest")
}

fn payload_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Serialize parameters (header `#key\tvalue` lines, then `name\tdims`)
/// plus a packed little-endian f64 payload.
pub fn save_checkpoint(stem: &Path, cfg_lines: &[(String, String)], params: &ParamSet) -> Result<()> {
    if let Some(parent) = stem.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut manifest = String::new();
    for (k, v) in cfg_lines {
        manifest.push_str(&format!("#{k}\t{v}\n"));
    }
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\n", dims.join(",")));
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mp = manifest_path(stem);
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    let pp = payload_path(stem);
    fs::write(&pp, payload).map_err(|e| Error::io(&pp, e))?;
    Ok(())
}

/// Read back a checkpoint: header map, parameters, and the payload hash.
pub fn load_checkpoint(stem: &Path) -> Result<(BTreeMap<String, String>, ParamSet, u64)> {
    let mp = manifest_path(stem);
    let manifest = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let pp = payload_path(stem);
    let payload = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    let hash = fnv1a(&payload);
    let mut header = BTreeMap::new();
    let mut params = ParamSet::new();
    let mut offset = 0usize;
    for (i, line) in manifest.lines().enumerate() {
        if let Some(rest) = line.strip_prefix('#') {
            let (k, v) = rest
                .split_once('\t')
                .ok_or_else(|| Error::data(&mp, i + 1, "bad header line"))?;
            header.insert(k.to_string(), v.to_string());
            continue;
        }
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(&mp, i + 1, "bad parameter line"))?;
        let shape: Vec<usize> = dims
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::data(&mp, i + 1, format!("bad dim {s:?}")))
            })
            .collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let need = count * 8;
        if offset + need > payload.len() {
            return Err(Error::data(&mp, i + 1, "payload shorter than manifest"));
        }
        let data: Vec<f64> = payload[offset..offset + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += need;
        params.insert(name, Tensor::new(shape, data));
    }
    if offset != payload.len() {
        return Err(Error::invalid("payload longer than manifest declares"));
    }
    Ok((header, params, hash))
}

/// Hash of an existing checkpoint payload.
pub fn checkpoint_hash(stem: &Path) -> Result<u64> {
    let pp = payload_path(stem);
    let payload = fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    Ok(fnv1a(&payload))
}

impl Model {
    pub fn header_lines(&self) -> Vec<(String, String)> {
        let c = &self.cfg;
        let domains: Vec<String> = c.source_domains.iter().map(u32::to_string).collect();
        vec![
            ("embed_dim".into(), c.embed_dim.to_string()),
            ("interests".into(), c.interests.to_string()),
            ("prototypes".into(), c.prototypes.to_string()),
            ("mask_k".into(), c.mask_k.to_string()),
            ("temperature".into(), c.temperature.to_string()),
            ("gamma".into(), c.gamma.to_string()),
            ("seq_cap".into(), c.seq_cap.to_string()),
            ("n_entities".into(), c.n_entities.to_string()),
            ("source_domains".into(), domains.join(",")),
            ("use_graph_encoder".into(), c.use_graph_encoder.to_string()),
            ("use_pea".into(), c.use_pea.to_string()),
        ]
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        save_checkpoint(stem, &self.header_lines(), &self.params)
    }

    pub fn load(stem: &Path) -> Result<(Self, u64)> {
        let (header, params, hash) = load_checkpoint(stem)?;
        let get = |k: &str| -> Result<&String> {
            header
                .get(k)
                .ok_or_else(|| Error::invalid(format!("checkpoint missing header key {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("bad header value for {k}")))
        };
        let parse_f64 = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::invalid(format!("bad header value for {k}")))
        };
        let source_domains: Vec<u32> = get("source_domains")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::invalid("bad source_domains")))
            .collect::<Result<_>>()?;
        let cfg = ModelConfig {
            embed_dim: parse_usize("embed_dim")?,
            interests: parse_usize("interests")?,
            prototypes: parse_usize("prototypes")?,
            mask_k: parse_usize("mask_k")?,
            temperature: parse_f64("temperature")?,
            gamma: parse_f64("gamma")?,
            seq_cap: parse_usize("seq_cap")?,
            n_entities: parse_usize("n_entities")?,
            source_domains,
            use_graph_encoder: get("use_graph_encoder")? == "true",
            use_pea: get("use_pea")? == "true",
        };
        cfg.validate()?;
        Ok((Model { cfg, params }, hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            interests: 3,
            prototypes: 12,
            mask_k: 4,
            temperature: 0.2,
            gamma: 1.0,
            seq_cap: 50,
            n_entities: 20,
            source_domains: vec![0, 1],
            use_graph_encoder: true,
            use_pea: true,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Model::init(test_cfg(), 5).unwrap();
        let b = Model::init(test_cfg(), 5).unwrap();
        assert_eq!(a, b);
        let c = Model::init(test_cfg(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model::init(test_cfg(), 42).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let stem = tmp.path().join("ckpt");
        model.save(&stem).unwrap();
        let (loaded, hash) = Model::load(&stem).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(hash, checkpoint_hash(&stem).unwrap());
    }

    #[test]
    fn lookup_table_mode_pads_features() {
        let mut cfg = test_cfg();
        cfg.use_graph_encoder = false;
        cfg.embed_dim = FEATURE_DIM + 4;
        let mut model = Model::init(cfg, 1).unwrap();
        let features =
            Tensor::matrix(20, FEATURE_DIM, (0..20 * FEATURE_DIM).map(|i| i as f64).collect());
        model.attach_entity_table(&features);
        let table = model.params.get(names::ENTITY_TABLE);
        assert_eq!(table.shape(), &[20, FEATURE_DIM + 4]);
        assert_eq!(table.row(3)[..FEATURE_DIM], *features.row(3));
        assert!(table.row(3)[FEATURE_DIM..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn table_narrower_than_features_is_rejected() {
        let mut cfg = test_cfg();
        cfg.use_graph_encoder = false;
        cfg.embed_dim = 8;
        assert!(Model::init(cfg, 1).is_err());
    }
}
