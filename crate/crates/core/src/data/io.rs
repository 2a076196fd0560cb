//! Line-oriented tab-separated bundle files.
//!
//! - `graph.tsv`:         `head_id<TAB>rel_id<TAB>tail_id`
//! - `features.tsv`:      `entity_id<TAB>f1,...,f32`
//! - `item_entities.tsv`: `item_id<TAB>e1[,e2[,e3]]`
//! - `interactions.tsv`:  `domain<TAB>user<TAB>item<TAB>b1,b2,...<TAB>label<TAB>timestamp`
//! - `profiles.tsv`:      `item|user<TAB>id<TAB>field_id:value_id,...`
//! - `truth.tsv`:         `entity_id<TAB>topic_id` (synthetic bundles only)
//!
//! All ids are nonnegative decimal integers, UTF-8, no header lines. Floats
//! are written with Rust's shortest round-trip formatting so save -> load is
//! value-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{
    BundleCore, DatasetBundle, EntityGraph, InteractionRecord, ItemEntityMap, ProfileSchema,
    Profiles, TopicTruth, FEATURE_DIM,
};

/// Everything `load_bundle` needs beyond the files themselves.
#[derive(Clone, Debug)]
pub struct LoadSpec {
    pub schema: ProfileSchema,
    pub source_domains: Vec<u32>,
    pub target_domains: Vec<u32>,
    pub seq_cap: usize,
}

pub const GRAPH_FILE: &str = "graph.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const ITEM_ENTITIES_FILE: &str = "item_entities.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const PROFILES_FILE: &str = "profiles.tsv";
pub const TRUTH_FILE: &str = "truth.tsv";

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, field: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::data(path, line, format!("cannot parse {field} from {s:?}")))
}

fn split_fields<'a>(
    path: &Path,
    line: usize,
    s: &'a str,
    n: usize,
    what: &str,
) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = s.split('\t').collect();
    if fields.len() != n {
        return Err(Error::data(
            path,
            line,
            format!("{what}: expected {n} tab-separated fields, got {}", fields.len()),
        ));
    }
    Ok(fields)
}

/// Load and fully validate a dataset bundle from a directory.
pub fn load_bundle(dir: &Path, spec: &LoadSpec) -> Result<DatasetBundle> {
    let graph = load_graph(dir)?;
    let map = load_item_entities(&dir.join(ITEM_ENTITIES_FILE), graph.n_entities)?;
    let records = load_interactions(&dir.join(INTERACTIONS_FILE))?;
    let profiles = load_profiles(&dir.join(PROFILES_FILE))?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        Some(load_truth(&truth_path, graph.n_entities)?)
    } else {
        None
    };
    let core = BundleCore {
        graph,
        map,
        source_domains: spec.source_domains.clone(),
        target_domains: spec.target_domains.clone(),
        records,
        profiles,
        schema: spec.schema.clone(),
        seq_cap: spec.seq_cap,
    };
    core.validate()?;
    Ok(DatasetBundle { core, truth })
}

fn load_graph(dir: &Path) -> Result<EntityGraph> {
    let fpath = dir.join(FEATURES_FILE);
    let mut feats: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (i, line) in read_lines(&fpath)?.iter().enumerate() {
        let n = i + 1;
        let f = split_fields(&fpath, n, line, 2, "features")?;
        let id: u32 = parse(&fpath, n, "entity id", f[0])?;
        let vals: Vec<f64> = f[1]
            .split(',')
            .map(|s| parse(&fpath, n, "feature", s))
            .collect::<Result<_>>()?;
        if vals.len() != FEATURE_DIM {
            return Err(Error::data(
                &fpath,
                n,
                format!("expected {FEATURE_DIM} features, got {}", vals.len()),
            ));
        }
        if feats.insert(id, vals).is_some() {
            return Err(Error::data(&fpath, n, format!("duplicate entity {id}")));
        }
    }
    let n_entities = feats.len();
    for (&id, _) in &feats {
        if id as usize >= n_entities {
            return Err(Error::invalid(format!(
                "entity ids must be dense 0..{n_entities}, found {id}"
            )));
        }
    }
    let mut data = Vec::with_capacity(n_entities * FEATURE_DIM);
    for (_, v) in feats {
        data.extend(v);
    }
    let gpath = dir.join(GRAPH_FILE);
    let mut triplets = Vec::new();
    let mut max_rel = 0u32;
    for (i, line) in read_lines(&gpath)?.iter().enumerate() {
        let n = i + 1;
        let f = split_fields(&gpath, n, line, 3, "graph triplet")?;
        let h: u32 = parse(&gpath, n, "head", f[0])?;
        let r: u32 = parse(&gpath, n, "relation", f[1])?;
        let t: u32 = parse(&gpath, n, "tail", f[2])?;
        max_rel = max_rel.max(r);
        triplets.push((h, r, t));
    }
    Ok(EntityGraph {
        n_entities,
        n_relations: if triplets.is_empty() { 0 } else { max_rel as usize + 1 },
        triplets,
        features: Tensor::matrix(n_entities, FEATURE_DIM, data),
    })
}

fn load_item_entities(path: &Path, n_entities: usize) -> Result<ItemEntityMap> {
    let mut map = ItemEntityMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let n = i + 1;
        let f = split_fields(path, n, line, 2, "item mapping")?;
        let item: u32 = parse(path, n, "item id", f[0])?;
        let entities: Vec<u32> = f[1]
            .split(',')
            .map(|s| parse(path, n, "entity id", s))
            .collect::<Result<_>>()?;
        map.insert(item, entities, n_entities)
            .map_err(|e| Error::data(path, n, e.to_string()))?;
    }
    Ok(map)
}

fn load_interactions(path: &Path) -> Result<BTreeMap<u32, Vec<InteractionRecord>>> {
    let mut records: BTreeMap<u32, Vec<InteractionRecord>> = BTreeMap::new();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let n = i + 1;
        let f = split_fields(path, n, line, 6, "interaction")?;
        let domain: u32 = parse(path, n, "domain", f[0])?;
        let user: u32 = parse(path, n, "user", f[1])?;
        let item: u32 = parse(path, n, "item", f[2])?;
        let behaviors: Vec<u32> = if f[3].is_empty() {
            Vec::new()
        } else {
            f[3].split(',')
                .map(|s| parse(path, n, "behavior item", s))
                .collect::<Result<_>>()?
        };
        let label: u8 = parse(path, n, "label", f[4])?;
        if label > 1 {
            return Err(Error::data(path, n, "label binary".to_string()));
        }
        let timestamp: u64 = parse(path, n, "timestamp", f[5])?;
        records.entry(domain).or_default().push(InteractionRecord {
            domain,
            user,
            item,
            behaviors,
            label,
            timestamp,
        });
    }
    Ok(records)
}

fn load_profiles(path: &Path) -> Result<Profiles> {
    let mut profiles = Profiles::default();
    if !path.exists() {
        return Ok(profiles);
    }
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let n = i + 1;
        let f = split_fields(path, n, line, 3, "profile")?;
        let id: u32 = parse(path, n, "id", f[1])?;
        let mut pairs: Vec<(u32, u32)> = Vec::new();
        for part in f[2].split(',') {
            let Some((fid, vid)) = part.split_once(':') else {
                return Err(Error::data(path, n, format!("bad field:value pair {part:?}")));
            };
            pairs.push((parse(path, n, "field id", fid)?, parse(path, n, "value id", vid)?));
        }
        pairs.sort_by_key(|p| p.0);
        for (want, (fid, _)) in pairs.iter().enumerate() {
            if *fid as usize != want {
                return Err(Error::data(
                    path,
                    n,
                    format!("profile must list each schema field exactly once, got field {fid}"),
                ));
            }
        }
        let vals: Vec<u32> = pairs.into_iter().map(|p| p.1).collect();
        match f[0] {
            "user" => profiles.users.insert(id, vals),
            "item" => profiles.items.insert(id, vals),
            other => {
                return Err(Error::data(path, n, format!("expected item|user, got {other:?}")))
            }
        };
    }
    Ok(profiles)
}

fn load_truth(path: &Path, n_entities: usize) -> Result<TopicTruth> {
    let mut topic_of = vec![u32::MAX; n_entities];
    let mut n_topics = 0usize;
    for (i, line) in read_lines(path)?.iter().enumerate() {
        let n = i + 1;
        let f = split_fields(path, n, line, 2, "truth")?;
        let e: u32 = parse(path, n, "entity id", f[0])?;
        let t: u32 = parse(path, n, "topic id", f[1])?;
        if e as usize >= n_entities {
            return Err(Error::data(path, n, format!("entity {e} out of range")));
        }
        topic_of[e as usize] = t;
        n_topics = n_topics.max(t as usize + 1);
    }
    if topic_of.iter().any(|&t| t == u32::MAX) {
        return Err(Error::invalid("truth.tsv must cover every entity"));
    }
    Ok(TopicTruth { topic_of, n_topics })
}

/// Write all bundle files into a directory (created if missing).
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let core = &bundle.core;

    let mut graph = String::new();
    for &(h, r, t) in &core.graph.triplets {
        writeln!(graph, "{h}\t{r}\t{t}").unwrap();
    }
    write_file(&dir.join(GRAPH_FILE), &graph)?;

    let mut feats = String::new();
    for e in 0..core.graph.n_entities {
        let row: Vec<String> = core.graph.features.row(e).iter().map(|v| format!("{v}")).collect();
        writeln!(feats, "{e}\t{}", row.join(",")).unwrap();
    }
    write_file(&dir.join(FEATURES_FILE), &feats)?;

    let mut items = String::new();
    for (item, entities) in core.map.iter() {
        let es: Vec<String> = entities.iter().map(u32::to_string).collect();
        writeln!(items, "{item}\t{}", es.join(",")).unwrap();
    }
    write_file(&dir.join(ITEM_ENTITIES_FILE), &items)?;

    let mut inter = String::new();
    for recs in core.records.values() {
        for r in recs {
            let bs: Vec<String> = r.behaviors.iter().map(u32::to_string).collect();
            writeln!(
                inter,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.domain,
                r.user,
                r.item,
                bs.join(","),
                r.label,
                r.timestamp
            )
            .unwrap();
        }
    }
    write_file(&dir.join(INTERACTIONS_FILE), &inter)?;

    let mut prof = String::new();
    for (kind, entries) in [("user", &core.profiles.users), ("item", &core.profiles.items)] {
        for (id, vals) in entries {
            let fv: Vec<String> = vals
                .iter()
                .enumerate()
                .map(|(f, v)| format!("{f}:{v}"))
                .collect();
            writeln!(prof, "{kind}\t{id}\t{}", fv.join(",")).unwrap();
        }
    }
    write_file(&dir.join(PROFILES_FILE), &prof)?;

    if let Some(truth) = &bundle.truth {
        let mut t = String::new();
        for (e, topic) in truth.topic_of.iter().enumerate() {
            writeln!(t, "{e}\t{topic}").unwrap();
        }
        write_file(&dir.join(TRUTH_FILE), &t)?;
    }
    Ok(())
}

fn write_file(path: &PathBuf, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};

    fn tiny_spec() -> LoadSpec {
        LoadSpec {
            schema: ProfileSchema {
                user_fields: vec![4, 8],
                item_fields: vec![4, 8],
            },
            source_domains: vec![0],
            target_domains: vec![1],
            seq_cap: 200,
        }
    }

    fn write_tiny_fixture(dir: &Path) {
        fs::create_dir_all(dir).unwrap();
        let feat_row = |seed: f64| {
            (0..FEATURE_DIM)
                .map(|i| format!("{}", seed + i as f64 * 0.01))
                .collect::<Vec<_>>()
                .join(",")
        };
        fs::write(dir.join(GRAPH_FILE), "0\t0\t1\n1\t0\t2\n").unwrap();
        fs::write(
            dir.join(FEATURES_FILE),
            format!("0\t{}\n1\t{}\n2\t{}\n", feat_row(0.1), feat_row(0.2), feat_row(0.3)),
        )
        .unwrap();
        fs::write(dir.join(ITEM_ENTITIES_FILE), "5\t0,1\n9\t2\n").unwrap();
        fs::write(
            dir.join(INTERACTIONS_FILE),
            "0\t1\t5\t\t1\t10\n0\t1\t5\t5\t0\t11\n1\t1\t9\t\t1\t3\n1\t2\t9\t\t0\t4\n",
        )
        .unwrap();
        fs::write(
            dir.join(PROFILES_FILE),
            "user\t1\t0:1,1:2\nuser\t2\t0:0,1:7\nitem\t5\t0:3,1:0\nitem\t9\t0:2,1:4\n",
        )
        .unwrap();
    }

    #[test]
    fn tiny_fixture_loads_with_matching_counts() {
        let tmp = tempfile::tempdir().unwrap();
        write_tiny_fixture(tmp.path());
        let b = load_bundle(tmp.path(), &tiny_spec()).unwrap();
        assert_eq!(b.core.graph.n_entities, 3);
        assert_eq!(b.core.map.len(), 2);
        assert_eq!(b.core.records.values().map(Vec::len).sum::<usize>(), 4);
        assert!(b.truth.is_none());
    }

    #[test]
    fn rejects_item_with_four_entities() {
        let tmp = tempfile::tempdir().unwrap();
        write_tiny_fixture(tmp.path());
        fs::write(tmp.path().join(ITEM_ENTITIES_FILE), "5\t0,1,2,0\n9\t2\n").unwrap();
        let err = load_bundle(tmp.path(), &tiny_spec()).unwrap_err();
        assert!(err.to_string().contains("item 5"), "{err}");
    }

    #[test]
    fn rejects_non_binary_label_with_line_number() {
        let tmp = tempfile::tempdir().unwrap();
        write_tiny_fixture(tmp.path());
        fs::write(
            tmp.path().join(INTERACTIONS_FILE),
            "0\t1\t5\t\t1\t10\n0\t1\t5\t\t2\t11\n",
        )
        .unwrap();
        let err = load_bundle(tmp.path(), &tiny_spec()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label binary"), "{msg}");
        assert!(msg.contains(":2:"), "line number missing: {msg}");
    }

    #[test]
    fn rejects_overlapping_source_and_target_items() {
        let tmp = tempfile::tempdir().unwrap();
        write_tiny_fixture(tmp.path());
        fs::write(
            tmp.path().join(INTERACTIONS_FILE),
            "0\t1\t5\t\t1\t10\n1\t1\t5\t\t1\t3\n",
        )
        .unwrap();
        let err = load_bundle(tmp.path(), &tiny_spec()).unwrap_err();
        assert!(err.to_string().contains("both source and target"), "{err}");
    }

    #[test]
    fn rejects_out_of_range_entity_id() {
        let tmp = tempfile::tempdir().unwrap();
        write_tiny_fixture(tmp.path());
        fs::write(tmp.path().join(GRAPH_FILE), "0\t0\t7\n").unwrap();
        let err = load_bundle(tmp.path(), &tiny_spec()).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn save_load_round_trip_is_value_identical() {
        let cfg = SyntheticConfig {
            entities: 60,
            topics: 4,
            users: 10,
            triplets: 150,
            records_per_source: 120,
            records_per_target: 60,
            ..SyntheticConfig::default()
        };
        let bundle = generate_synthetic(&cfg, 33).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        save_bundle(tmp.path(), &bundle).unwrap();
        let spec = LoadSpec {
            schema: bundle.core.schema.clone(),
            source_domains: bundle.core.source_domains.clone(),
            target_domains: bundle.core.target_domains.clone(),
            seq_cap: bundle.core.seq_cap,
        };
        let reloaded = load_bundle(tmp.path(), &spec).unwrap();
        assert_eq!(bundle, reloaded);
    }
}
