//! Synthetic bundle generation with planted topic structure.
//!
//! Entities are partitioned into topics; triplets prefer intra-topic pairs;
//! features are noisy copies of per-topic unit centroids; users carry
//! topic-preference mixtures shared across domains; items are built from 1-3
//! same-topic entities; click probability rises when an item's topic matches
//! the user's preference. The planted entity-to-topic assignment is recorded
//! separately from the training-visible core.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::rng::{gaussian, seeded, unit_vector, Stream};
use crate::numerics::Tensor;

use super::{
    BundleCore, DatasetBundle, EntityGraph, InteractionRecord, ItemEntityMap, ProfileSchema,
    Profiles, TopicTruth, FEATURE_DIM,
};

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub topics: usize,
    pub triplets: usize,
    /// Intra-topic edge weight; must exceed `p_out`.
    pub p_in: f64,
    /// Per-foreign-topic edge weight.
    pub p_out: f64,
    pub users: usize,
    pub source_domains: usize,
    pub target_domains: usize,
    pub items_per_source: usize,
    pub items_per_target: usize,
    pub records_per_source: usize,
    pub records_per_target: usize,
    /// Weights for an item mapping to 1, 2 or 3 entities.
    pub entity_count_weights: [f64; 3],
    /// Gaussian noise added to the topic centroid in feature space.
    pub feature_noise: f64,
    /// Click probability floor and preference gain.
    pub base_click: f64,
    pub click_gain: f64,
    /// Behavior-list cap carried into the bundle.
    pub seq_cap: usize,
    /// Cardinality of the second (uninformative) profile field.
    pub extra_field_card: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            entities: 500,
            topics: 10,
            triplets: 4000,
            p_in: 1.0,
            p_out: 0.01,
            users: 48,
            source_domains: 2,
            target_domains: 1,
            items_per_source: 150,
            items_per_target: 120,
            records_per_source: 6000,
            records_per_target: 6000,
            entity_count_weights: [0.5, 0.35, 0.15],
            feature_noise: 0.3,
            base_click: 0.08,
            click_gain: 0.8,
            seq_cap: 200,
            extra_field_card: 8,
        }
    }
}

/// Expected intra-topic fraction of sampled edges under the generator's
/// tail-topic choice rule.
pub fn expected_intra_fraction(cfg: &SyntheticConfig) -> f64 {
    cfg.p_in / (cfg.p_in + (cfg.topics as f64 - 1.0) * cfg.p_out)
}

struct ItemSpec {
    topic: u32,
    entities: Vec<u32>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<DatasetBundle> {
    if cfg.p_in <= cfg.p_out {
        return Err(Error::config("no planted structure: p_in must exceed p_out"));
    }
    if cfg.entities == 0 || cfg.topics == 0 || cfg.entities < cfg.topics {
        return Err(Error::config("need at least one entity per topic"));
    }
    if cfg.users == 0 || cfg.source_domains == 0 {
        return Err(Error::config("need users and at least one source domain"));
    }
    let mut rng = seeded(seed, Stream::Data);

    // Balanced planted partition: entity e belongs to topic e mod T.
    let topics = cfg.topics as u32;
    let topic_of: Vec<u32> = (0..cfg.entities as u32).map(|e| e % topics).collect();
    let members: Vec<Vec<u32>> = (0..topics)
        .map(|t| (0..cfg.entities as u32).filter(|e| e % topics == t).collect())
        .collect();

    let features = planted_features(cfg, &topic_of, &mut rng);
    let triplets = planted_triplets(cfg, &topic_of, &members, &mut rng)?;
    let n_relations = triplets.iter().map(|t| t.1 as usize + 1).max().unwrap_or(0);
    let graph = EntityGraph {
        n_entities: cfg.entities,
        n_relations,
        triplets,
        features,
    };

    // Topic-preference mixtures, shared by the same user across every domain.
    let prefs: Vec<Vec<f64>> = (0..cfg.users)
        .map(|u| user_preference(cfg, (u as u32) % topics, &mut rng))
        .collect();

    // Items: globally unique ids, each composed of same-topic entities.
    let mut map = ItemEntityMap::new();
    let mut domain_items: Vec<Vec<(u32, ItemSpec)>> = Vec::new();
    let mut next_item = 0u32;
    let n_domains = cfg.source_domains + cfg.target_domains;
    for d in 0..n_domains {
        let count = if d < cfg.source_domains {
            cfg.items_per_source
        } else {
            cfg.items_per_target
        };
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            let topic = rng.random_range(0..topics);
            let spec = sample_item(cfg, topic, &members[topic as usize], &mut rng);
            map.insert(next_item, spec.entities.clone(), cfg.entities)?;
            items.push((next_item, spec));
            next_item += 1;
        }
        domain_items.push(items);
    }

    // Interaction logs: sequential timestamps per domain; behavior lists hold
    // the user's clicked items so far in that domain (most recent seq_cap).
    let mut records = std::collections::BTreeMap::new();
    for d in 0..n_domains {
        let count = if d < cfg.source_domains {
            cfg.records_per_source
        } else {
            cfg.records_per_target
        };
        let items = &domain_items[d];
        let mut history: Vec<Vec<u32>> = vec![Vec::new(); cfg.users];
        let mut recs = Vec::with_capacity(count);
        for ts in 0..count {
            let user = rng.random_range(0..cfg.users);
            let (item, spec) = &items[rng.random_range(0..items.len())];
            let p = (cfg.base_click + cfg.click_gain * prefs[user][spec.topic as usize])
                .clamp(0.01, 0.95);
            let label = u8::from(rng.random::<f64>() < p);
            let h = &history[user];
            let keep = h.len().min(cfg.seq_cap);
            recs.push(InteractionRecord {
                domain: d as u32,
                user: user as u32,
                item: *item,
                behaviors: h[h.len() - keep..].to_vec(),
                label,
                timestamp: ts as u64,
            });
            if label == 1 {
                history[user].push(*item);
            }
        }
        records.insert(d as u32, recs);
    }

    // Profiles: field 0 is the (informative) primary topic, field 1 noise.
    let schema = ProfileSchema {
        user_fields: vec![topics, cfg.extra_field_card],
        item_fields: vec![topics, cfg.extra_field_card],
    };
    let mut profiles = Profiles::default();
    for u in 0..cfg.users as u32 {
        profiles
            .users
            .insert(u, vec![u % topics, rng.random_range(0..cfg.extra_field_card)]);
    }
    for items in &domain_items {
        for (id, spec) in items {
            profiles
                .items
                .insert(*id, vec![spec.topic, rng.random_range(0..cfg.extra_field_card)]);
        }
    }

    let core = BundleCore {
        graph,
        map,
        source_domains: (0..cfg.source_domains as u32).collect(),
        target_domains: (cfg.source_domains as u32..n_domains as u32).collect(),
        records,
        profiles,
        schema,
        seq_cap: cfg.seq_cap,
    };
    core.validate()?;
    Ok(DatasetBundle {
        core,
        truth: Some(TopicTruth {
            topic_of,
            n_topics: cfg.topics,
        }),
    })
}

fn planted_features(cfg: &SyntheticConfig, topic_of: &[u32], rng: &mut ChaCha8Rng) -> Tensor {
    let centroids: Vec<Vec<f64>> = (0..cfg.topics).map(|_| unit_vector(rng, FEATURE_DIM)).collect();
    let mut data = Vec::with_capacity(topic_of.len() * FEATURE_DIM);
    for &t in topic_of {
        let noise = gaussian(rng, cfg.feature_noise, &[FEATURE_DIM]);
        data.extend(
            centroids[t as usize]
                .iter()
                .zip(noise.data())
                .map(|(c, n)| c + n),
        );
    }
    Tensor::matrix(topic_of.len(), FEATURE_DIM, data)
}

fn planted_triplets(
    cfg: &SyntheticConfig,
    topic_of: &[u32],
    members: &[Vec<u32>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(u32, u32, u32)>> {
    let intra_prob = expected_intra_fraction(cfg);
    let n_relations = 4u32;
    let mut seen = std::collections::HashSet::new();
    let mut triplets = Vec::with_capacity(cfg.triplets);
    let mut attempts = 0usize;
    let max_attempts = cfg.triplets.saturating_mul(100).max(1000);
    while triplets.len() < cfg.triplets {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::config(
                "triplet sampling stalled; graph too dense for the requested count",
            ));
        }
        let head = rng.random_range(0..cfg.entities as u32);
        let ht = topic_of[head as usize] as usize;
        let tail = if rng.random::<f64>() < intra_prob {
            let pool = &members[ht];
            if pool.len() < 2 {
                continue;
            }
            pool[rng.random_range(0..pool.len())]
        } else {
            if cfg.topics < 2 {
                continue;
            }
            let mut t = rng.random_range(0..cfg.topics - 1);
            if t >= ht {
                t += 1;
            }
            let pool = &members[t];
            pool[rng.random_range(0..pool.len())]
        };
        if tail == head {
            continue;
        }
        let rel = rng.random_range(0..n_relations);
        if seen.insert((head, rel, tail)) {
            triplets.push((head, rel, tail));
        }
    }
    Ok(triplets)
}

fn user_preference(cfg: &SyntheticConfig, primary: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = cfg.topics;
    if t == 1 {
        return vec![1.0];
    }
    let mut pref = vec![0.0; t];
    let secondary = {
        let mut s = rng.random_range(0..t as u32 - 1);
        if s >= primary {
            s += 1;
        }
        s
    };
    let spread = if t > 2 { 0.10 / (t as f64 - 2.0) } else { 0.0 };
    for (topic, p) in pref.iter_mut().enumerate() {
        *p = if topic as u32 == primary {
            0.65
        } else if topic as u32 == secondary {
            0.25
        } else {
            spread
        };
    }
    pref
}

fn sample_item(
    cfg: &SyntheticConfig,
    topic: u32,
    pool: &[u32],
    rng: &mut ChaCha8Rng,
) -> ItemSpec {
    let w = &cfg.entity_count_weights;
    let total = w[0] + w[1] + w[2];
    let x = rng.random::<f64>() * total;
    let want = if x < w[0] {
        1
    } else if x < w[0] + w[1] {
        2
    } else {
        3
    };
    let count = want.min(pool.len());
    let mut picks: Vec<u32> = pool.to_vec();
    picks.shuffle(rng);
    picks.truncate(count);
    ItemSpec {
        topic,
        entities: picks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_are_forced_by_config() {
        let cfg = SyntheticConfig {
            entities: 500,
            topics: 10,
            users: 50,
            triplets: 800,
            records_per_source: 300,
            records_per_target: 100,
            ..SyntheticConfig::default()
        };
        let b = generate_synthetic(&cfg, 1).unwrap();
        assert_eq!(b.core.graph.n_entities, 500);
        let truth = b.truth.as_ref().unwrap();
        let distinct: std::collections::BTreeSet<u32> = truth.topic_of.iter().copied().collect();
        assert_eq!(distinct.len(), 10);
        assert_eq!(b.core.source_domains, vec![0, 1]);
        assert_eq!(b.core.target_domains, vec![2]);
        assert_eq!(b.core.domain_records(0).len(), 300);
        assert_eq!(b.core.domain_records(2).len(), 100);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = SyntheticConfig {
            entities: 80,
            topics: 4,
            users: 12,
            triplets: 300,
            records_per_source: 200,
            records_per_target: 80,
            ..SyntheticConfig::default()
        };
        let a = generate_synthetic(&cfg, 99).unwrap();
        let b = generate_synthetic(&cfg, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn intra_topic_edge_fraction_matches_expectation() {
        // Oracle: count sampled edges against the planted assignment.
        let cfg = SyntheticConfig {
            entities: 500,
            topics: 10,
            triplets: 10_000,
            ..SyntheticConfig::default()
        };
        let b = generate_synthetic(&cfg, 7).unwrap();
        let truth = b.truth.as_ref().unwrap();
        let intra = b
            .core
            .graph
            .triplets
            .iter()
            .filter(|(h, _, t)| truth.topic_of[*h as usize] == truth.topic_of[*t as usize])
            .count();
        let frac = intra as f64 / b.core.graph.triplets.len() as f64;
        let expect = expected_intra_fraction(&cfg);
        assert!(
            (frac - expect).abs() <= 0.05,
            "intra fraction {frac:.4} vs expected {expect:.4}"
        );
    }

    #[test]
    fn rejects_p_in_not_above_p_out() {
        let cfg = SyntheticConfig {
            p_in: 0.01,
            p_out: 0.01,
            ..SyntheticConfig::default()
        };
        let err = generate_synthetic(&cfg, 1).unwrap_err();
        assert!(err.to_string().contains("no planted structure"));
    }

    #[test]
    fn items_use_same_topic_entities_and_labels_follow_preference() {
        let cfg = SyntheticConfig::default();
        let b = generate_synthetic(&cfg, 13).unwrap();
        let truth = b.truth.as_ref().unwrap();
        for (_, entities) in b.core.map.iter() {
            let t0 = truth.topic_of[entities[0] as usize];
            assert!(entities.iter().all(|&e| truth.topic_of[e as usize] == t0));
        }
        // Empirical click rate on primary-topic items should clearly exceed
        // the rate on non-preferred ones.
        let mut matched = (0usize, 0usize);
        let mut other = (0usize, 0usize);
        for recs in b.core.records.values() {
            for r in recs {
                let entities = b.core.map.entities(r.item).unwrap();
                let topic = truth.topic_of[entities[0] as usize];
                let primary = r.user % cfg.topics as u32;
                let slot = if topic == primary { &mut matched } else { &mut other };
                slot.0 += usize::from(r.label == 1);
                slot.1 += 1;
            }
        }
        let p_match = matched.0 as f64 / matched.1 as f64;
        let p_other = other.0 as f64 / other.1 as f64;
        assert!(
            p_match > p_other + 0.2,
            "match rate {p_match:.3} vs other {p_other:.3}"
        );
    }
}
