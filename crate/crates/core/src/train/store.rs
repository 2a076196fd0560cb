//! The versioned embedding store and the offline inference flow.
//!
//! Snapshot file layout (all integers little-endian):
//!   magic `EMBS` | u32 version | u32 dim | u64 snapshot_id
//!   | u64 data_timestamp | u64 checkpoint_hash | u64 user_count
//!   | u64 entity_count | records
//! each record: kind byte (`U`/`E`), u64 id, dim x f64.
//! Users precede entities, both ascending by id. The data timestamp is the
//! newest interaction timestamp of the producing bundle, so re-running a
//! pipeline reproduces snapshots byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{BundleCore, ItemEntityMap};
use crate::error::{Error, Result};
use crate::graph_encoder::encode_entities;
use crate::model::Model;
use crate::parallel::ordered_map;
use crate::tower::{bank_of, encode_user, mask_from_user_history, TowerMode};

const MAGIC: &[u8; 4] = b"EMBS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub snapshot_id: u64,
    pub data_timestamp: u64,
    pub checkpoint_hash: u64,
    pub users: BTreeMap<u32, Vec<f64>>,
    pub entities: BTreeMap<u32, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn user(&self, id: u32) -> Result<&[f64]> {
        self.users
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("user {id} not in snapshot")))
    }

    pub fn entity(&self, id: u32) -> Result<&[f64]> {
        self.entities
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("entity {id} not in snapshot")))
    }

    pub fn len(&self) -> usize {
        self.users.len() + self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty() && self.entities.is_empty()
    }

    /// Mean pooling over an item's associated entities.
    pub fn item_embedding(&self, item: u32, map: &ItemEntityMap) -> Result<Vec<f64>> {
        let entities = map.entities_or_err(item)?;
        let mut out = vec![0.0; self.dim];
        for &e in entities {
            crate::numerics::tensor::axpy(&mut out, 1.0, self.entity(e)?);
        }
        for v in &mut out {
            *v /= entities.len() as f64;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.snapshot_id.to_le_bytes());
        buf.extend_from_slice(&self.data_timestamp.to_le_bytes());
        buf.extend_from_slice(&self.checkpoint_hash.to_le_bytes());
        buf.extend_from_slice(&(self.users.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.entities.len() as u64).to_le_bytes());
        for (kind, entries) in [(b'U', &self.users), (b'E', &self.entities)] {
            for (&id, vec) in entries {
                buf.push(kind);
                buf.extend_from_slice(&(id as u64).to_le_bytes());
                for v in vec {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::invalid(format!("{}: {msg}", path.display()));
        if buf.len() < 52 || &buf[..4] != MAGIC {
            return Err(bad("not an embedding snapshot"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(bad("unsupported snapshot version"));
        }
        let dim = u32_at(8) as usize;
        let snapshot_id = u64_at(12);
        let data_timestamp = u64_at(20);
        let checkpoint_hash = u64_at(28);
        let n_users = u64_at(36) as usize;
        let n_entities = u64_at(44) as usize;
        let rec = 1 + 8 + dim * 8;
        if buf.len() != 52 + rec * (n_users + n_entities) {
            return Err(bad("snapshot length does not match header"));
        }
        let mut users = BTreeMap::new();
        let mut entities = BTreeMap::new();
        let mut off = 52;
        for i in 0..n_users + n_entities {
            let kind = buf[off];
            let id = u64_at(off + 1) as u32;
            let vec: Vec<f64> = buf[off + 9..off + rec]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            match kind {
                b'U' if i < n_users => users.insert(id, vec),
                b'E' if i >= n_users => entities.insert(id, vec),
                _ => return Err(bad("record kinds out of order")),
            };
            off += rec;
        }
        Ok(EmbeddingStore {
            dim,
            snapshot_id,
            data_timestamp,
            checkpoint_hash,
            users,
            entities,
        })
    }
}

/// Offline inference: entity embeddings from the encoder and one universal
/// encoding per known (source) user, each built with the user's own
/// aggregate history mask.
pub fn infer_embeddings(
    model: &Model,
    core: &BundleCore,
    snapshot_id: u64,
    checkpoint_hash: u64,
) -> Result<EmbeddingStore> {
    let entity_matrix = encode_entities(model, &core.graph)?;
    let bank = bank_of(model);
    let mode = if model.cfg.use_pea {
        TowerMode::PrototypeEnhanced
    } else {
        TowerMode::Plain
    };
    let users = core.source_users();
    let encoded: Vec<Result<Vec<f64>>> = ordered_map(&users, |&u| {
        let mask = mask_from_user_history(&bank, &entity_matrix, core, u)?;
        Ok(encode_user(model, core, &entity_matrix, u, mode, Some(&mask))?.universal)
    });
    let mut user_map = BTreeMap::new();
    for (&u, z) in users.iter().zip(encoded) {
        user_map.insert(u, z?);
    }
    let mut entity_map = BTreeMap::new();
    for e in 0..core.graph.n_entities {
        entity_map.insert(e as u32, entity_matrix.row(e).to_vec());
    }
    let data_timestamp = core
        .records
        .values()
        .flat_map(|v| v.iter().map(|r| r.timestamp))
        .max()
        .unwrap_or(0);
    Ok(EmbeddingStore {
        dim: model.cfg.embed_dim,
        snapshot_id,
        data_timestamp,
        checkpoint_hash,
        users: user_map,
        entities: entity_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;

    fn small_setup() -> (Model, BundleCore) {
        let cfg = SyntheticConfig {
            entities: 20,
            topics: 4,
            users: 6,
            triplets: 60,
            items_per_source: 8,
            items_per_target: 5,
            records_per_source: 60,
            records_per_target: 25,
            seq_cap: 30,
            ..SyntheticConfig::default()
        };
        let bundle = generate_synthetic(&cfg, 3).unwrap();
        let model = Model::init(
            ModelConfig {
                embed_dim: 64,
                interests: 3,
                prototypes: 12,
                mask_k: 5,
                temperature: 0.2,
                gamma: 1.0,
                seq_cap: 30,
                n_entities: 20,
                source_domains: bundle.core.source_domains.clone(),
                use_graph_encoder: true,
                use_pea: true,
            },
            11,
        )
        .unwrap();
        (model, bundle.core)
    }

    #[test]
    fn snapshot_has_one_row_per_user_and_entity() {
        let (model, core) = small_setup();
        let store = infer_embeddings(&model, &core, 1, 0xabcd).unwrap();
        assert_eq!(store.len(), core.source_users().len() + core.graph.n_entities);
        assert_eq!(store.dim, 64);
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        let (model, core) = small_setup();
        let store = infer_embeddings(&model, &core, 7, 99).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("snap.bin");
        store.save(&path).unwrap();
        let loaded = EmbeddingStore::load(&path).unwrap();
        assert_eq!(store, loaded);
        assert_eq!(loaded.snapshot_id, 7);
        assert_eq!(loaded.checkpoint_hash, 99);
    }

    #[test]
    fn stored_user_embedding_matches_fresh_recompute() {
        let (model, core) = small_setup();
        let store = infer_embeddings(&model, &core, 1, 0).unwrap();
        let entity_matrix = encode_entities(&model, &core.graph).unwrap();
        let bank = bank_of(&model);
        for &u in core.source_users().iter().take(3) {
            let mask = mask_from_user_history(&bank, &entity_matrix, &core, u).unwrap();
            let fresh = encode_user(
                &model,
                &core,
                &entity_matrix,
                u,
                TowerMode::PrototypeEnhanced,
                Some(&mask),
            )
            .unwrap()
            .universal;
            let stored = store.user(u).unwrap();
            let max_diff = fresh
                .iter()
                .zip(stored)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max_diff <= 1e-6, "decoupling drift {max_diff}");
        }
    }

    #[test]
    fn item_embedding_is_entity_mean() {
        let (model, core) = small_setup();
        let store = infer_embeddings(&model, &core, 1, 0).unwrap();
        let (item, entities) = core.map.iter().next().map(|(i, e)| (*i, e.clone())).unwrap();
        let z = store.item_embedding(item, &core.map).unwrap();
        // Independent oracle: plain summation then division.
        let mut want = vec![0.0; store.dim];
        for &e in &entities {
            for (w, v) in want.iter_mut().zip(store.entity(e).unwrap()) {
                *w += v;
            }
        }
        for w in &mut want {
            *w /= entities.len() as f64;
        }
        for (a, b) in z.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(store.item_embedding(999_999, &core.map).is_err());
    }
}
