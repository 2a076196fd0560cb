//! Domain data types, file formats, dataset loading, and the synthetic
//! generator with planted prototype structure.

pub mod io;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Dimension of the initial entity features.
pub const FEATURE_DIM: usize = 32;

/// Maximum number of entities an item may map to.
pub const MAX_ENTITIES_PER_ITEM: usize = 3;

/// The entity graph: typed triplets over `n_entities` nodes plus the fixed
/// 32-dimensional initial features.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityGraph {
    pub n_entities: usize,
    pub n_relations: usize,
    /// (head, relation, tail), unique.
    pub triplets: Vec<(u32, u32, u32)>,
    /// `n_entities x FEATURE_DIM`.
    pub features: Tensor,
}

impl EntityGraph {
    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.n_entities || self.features.cols() != FEATURE_DIM {
            return Err(Error::invalid(format!(
                "feature matrix shape {:?} does not match {} entities x {}",
                self.features.shape(),
                self.n_entities,
                FEATURE_DIM
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::invalid("entity features must be finite"));
        }
        let mut seen = BTreeSet::new();
        for &(h, r, t) in &self.triplets {
            if h as usize >= self.n_entities || t as usize >= self.n_entities {
                return Err(Error::invalid(format!(
                    "triplet ({h},{r},{t}): entity id out of range (|E|={})",
                    self.n_entities
                )));
            }
            if r as usize >= self.n_relations {
                return Err(Error::invalid(format!(
                    "triplet ({h},{r},{t}): relation id out of range (|R|={})",
                    self.n_relations
                )));
            }
            if !seen.insert((h, r, t)) {
                return Err(Error::invalid(format!("duplicate triplet ({h},{r},{t})")));
            }
        }
        Ok(())
    }
}

/// The item-to-entity association: each item maps to 1..=3 entities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ItemEntityMap {
    map: BTreeMap<u32, Vec<u32>>,
}

impl ItemEntityMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item: u32, entities: Vec<u32>, n_entities: usize) -> Result<()> {
        if entities.is_empty() || entities.len() > MAX_ENTITIES_PER_ITEM {
            return Err(Error::invalid(format!(
                "item {item} maps to {} entities; must be 1..={MAX_ENTITIES_PER_ITEM}",
                entities.len()
            )));
        }
        if let Some(&e) = entities.iter().find(|&&e| e as usize >= n_entities) {
            return Err(Error::invalid(format!(
                "item {item}: entity id {e} out of range"
            )));
        }
        self.map.insert(item, entities);
        Ok(())
    }

    pub fn entities(&self, item: u32) -> Option<&[u32]> {
        self.map.get(&item).map(|v| v.as_slice())
    }

    pub fn entities_or_err(&self, item: u32) -> Result<&[u32]> {
        self.entities(item)
            .ok_or_else(|| Error::invalid(format!("item {item} has no entity mapping")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &Vec<u32>)> {
        self.map.iter()
    }
}

/// One interaction: user saw item in a domain, with the behavior history at
/// that point and a binary click label.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionRecord {
    pub domain: u32,
    pub user: u32,
    pub item: u32,
    pub behaviors: Vec<u32>,
    pub label: u8,
    pub timestamp: u64,
}

/// An interaction expanded to one of the item's entities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntityRecord {
    pub user: u32,
    pub entity: u32,
    pub label: u8,
    pub domain: u32,
    pub timestamp: u64,
}

/// Declared categorical field layout for profile features: one cardinality
/// per field, user side and item side.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSchema {
    pub user_fields: Vec<u32>,
    pub item_fields: Vec<u32>,
}

/// Per-user and per-item categorical feature values, dense in schema order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Profiles {
    pub users: BTreeMap<u32, Vec<u32>>,
    pub items: BTreeMap<u32, Vec<u32>>,
}

/// Planted entity-to-topic assignment (synthetic bundles only).
#[derive(Clone, Debug, PartialEq)]
pub struct TopicTruth {
    /// topic id per entity, indexed by entity id.
    pub topic_of: Vec<u32>,
    pub n_topics: usize,
}

/// Everything training and evaluation are allowed to see. The planted truth
/// lives outside this struct so no training code can reach it.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleCore {
    pub graph: EntityGraph,
    pub map: ItemEntityMap,
    pub source_domains: Vec<u32>,
    pub target_domains: Vec<u32>,
    /// Records per domain id, in file order.
    pub records: BTreeMap<u32, Vec<InteractionRecord>>,
    pub profiles: Profiles,
    pub schema: ProfileSchema,
    /// Behavior-list cap the bundle was validated against.
    pub seq_cap: usize,
}

/// A loaded dataset: the training-visible core plus optional planted truth.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub core: BundleCore,
    pub truth: Option<TopicTruth>,
}

impl BundleCore {
    pub fn domain_records(&self, domain: u32) -> &[InteractionRecord] {
        self.records.get(&domain).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// All source-domain records, iterated in ascending domain order.
    pub fn source_records(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.source_domains
            .iter()
            .flat_map(|d| self.domain_records(*d).iter())
    }

    /// Sorted unique item ids appearing in a domain's interactions.
    pub fn catalog(&self, domain: u32) -> Vec<u32> {
        let set: BTreeSet<u32> = self.domain_records(domain).iter().map(|r| r.item).collect();
        set.into_iter().collect()
    }

    /// Sorted unique user ids appearing in source-domain interactions.
    pub fn source_users(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.source_records().map(|r| r.user).collect();
        set.into_iter().collect()
    }

    /// The user's clicked-item history in one domain: the behavior list of
    /// their latest record there (behavior lists accumulate chronologically),
    /// extended by that record's own item when it was clicked.
    pub fn user_history(&self, user: u32, domain: u32) -> Vec<u32> {
        let mut latest: Option<&InteractionRecord> = None;
        for r in self.domain_records(domain) {
            if r.user == user {
                latest = Some(r);
            }
        }
        let Some(last) = latest else {
            return Vec::new();
        };
        let mut hist = last.behaviors.clone();
        if last.label == 1 {
            hist.push(last.item);
        }
        let keep = hist.len().min(self.seq_cap);
        hist.split_off(hist.len() - keep)
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        if self.source_domains.iter().any(|d| self.target_domains.contains(d)) {
            return Err(Error::config("a domain cannot be both source and target"));
        }
        let known: BTreeSet<u32> = self
            .source_domains
            .iter()
            .chain(self.target_domains.iter())
            .copied()
            .collect();
        let mut source_items = BTreeSet::new();
        let mut target_items = BTreeSet::new();
        for (&d, recs) in &self.records {
            if !known.contains(&d) {
                return Err(Error::invalid(format!(
                    "domain {d} is neither a declared source nor target"
                )));
            }
            let mut last_ts = 0u64;
            for (i, r) in recs.iter().enumerate() {
                if r.label > 1 {
                    return Err(Error::invalid(format!(
                        "domain {d} record {i}: label binary, got {}",
                        r.label
                    )));
                }
                if r.behaviors.len() > self.seq_cap {
                    return Err(Error::invalid(format!(
                        "domain {d} record {i}: behavior list length {} exceeds cap {}",
                        r.behaviors.len(),
                        self.seq_cap
                    )));
                }
                if i > 0 && r.timestamp < last_ts {
                    return Err(Error::invalid(format!(
                        "domain {d} record {i}: timestamps must be monotone within a domain"
                    )));
                }
                last_ts = r.timestamp;
                if self.source_domains.contains(&d) {
                    source_items.insert(r.item);
                } else {
                    target_items.insert(r.item);
                }
            }
        }
        if let Some(shared) = source_items.intersection(&target_items).next() {
            return Err(Error::invalid(format!(
                "item {shared} appears in both source and target domains"
            )));
        }
        for (&u, vals) in &self.profiles.users {
            check_profile("user", u, vals, &self.schema.user_fields)?;
        }
        for (&i, vals) in &self.profiles.items {
            check_profile("item", i, vals, &self.schema.item_fields)?;
        }
        Ok(())
    }
}

fn check_profile(kind: &str, id: u32, vals: &[u32], cards: &[u32]) -> Result<()> {
    if vals.len() != cards.len() {
        return Err(Error::invalid(format!(
            "{kind} {id}: profile has {} fields, schema declares {}",
            vals.len(),
            cards.len()
        )));
    }
    for (f, (&v, &c)) in vals.iter().zip(cards).enumerate() {
        if v >= c {
            return Err(Error::invalid(format!(
                "{kind} {id}: field {f} value {v} exceeds cardinality {c}"
            )));
        }
    }
    Ok(())
}

/// Expand item-level interactions to entity-level records: each record
/// yields one `(user, entity, label)` per associated entity, preserving
/// input order and per-item entity order.
pub fn expand_to_entity_records(
    records: &[InteractionRecord],
    map: &ItemEntityMap,
) -> Result<Vec<EntityRecord>> {
    let mut out = Vec::new();
    for r in records {
        let entities = map.entities_or_err(r.item)?;
        for &e in entities {
            out.push(EntityRecord {
                user: r.user,
                entity: e,
                label: r.label,
                domain: r.domain,
                timestamp: r.timestamp,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_map() -> ItemEntityMap {
        let mut m = ItemEntityMap::new();
        m.insert(10, vec![0, 1, 2], 5).unwrap();
        m.insert(11, vec![3], 5).unwrap();
        m.insert(12, vec![1, 4], 5).unwrap();
        m
    }

    fn record(item: u32, label: u8) -> InteractionRecord {
        InteractionRecord {
            domain: 0,
            user: 7,
            item,
            behaviors: vec![],
            label,
            timestamp: 0,
        }
    }

    #[test]
    fn map_rejects_more_than_three_entities() {
        let mut m = ItemEntityMap::new();
        let err = m.insert(42, vec![0, 1, 2, 3], 10).unwrap_err();
        assert!(err.to_string().contains("item 42"));
    }

    #[test]
    fn expansion_multiplies_by_entity_count() {
        let m = tiny_map();
        // One record over a 3-entity item -> 3 entity records, same label.
        let out = expand_to_entity_records(&[record(10, 1)], &m).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|r| r.label == 1 && r.user == 7));
        assert_eq!(out.iter().map(|r| r.entity).collect::<Vec<_>>(), vec![0, 1, 2]);

        // Single-entity item -> 1 record.
        let out = expand_to_entity_records(&[record(11, 0)], &m).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].entity, 3);

        // Oracle: total = sum of per-item entity counts (2 + 3 = 5).
        let out = expand_to_entity_records(&[record(12, 1), record(10, 0)], &m).unwrap();
        assert_eq!(out.len(), 5);
        // Stable order: input order, then entity order within item.
        assert_eq!(
            out.iter().map(|r| r.entity).collect::<Vec<_>>(),
            vec![1, 4, 0, 1, 2]
        );
    }

    #[test]
    fn expansion_length_equals_phi_sum_on_random_batches() {
        use rand::Rng;
        let m = tiny_map();
        let mut rng = crate::numerics::rng::seeded(5, crate::numerics::rng::Stream::Probe);
        for _ in 0..50 {
            let items = [10u32, 11, 12];
            let recs: Vec<InteractionRecord> = (0..rng.random_range(1..20))
                .map(|_| record(items[rng.random_range(0..3)], rng.random_range(0..2) as u8))
                .collect();
            let expect: usize = recs.iter().map(|r| m.entities(r.item).unwrap().len()).sum();
            assert_eq!(expand_to_entity_records(&recs, &m).unwrap().len(), expect);
        }
    }

    #[test]
    fn expansion_fails_on_unmapped_item() {
        let m = tiny_map();
        let err = expand_to_entity_records(&[record(99, 1)], &m).unwrap_err();
        assert!(err.to_string().contains("99"));
    }
}
