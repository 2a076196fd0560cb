//! The six experiment commands. They compose through files only: bundles,
//! checkpoints, embedding snapshots, logs, and metric tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use protorec::data::io::{load_bundle, save_bundle, LoadSpec};
use protorec::data::synthetic::generate_synthetic;
use protorec::data::DatasetBundle;
use protorec::error::{Error, Result};
use protorec::graph_encoder::encode_entities;
use protorec::model::{checkpoint_hash, load_checkpoint, Model};
use protorec::prototype::{assignment_line, assignments};
use protorec::tower::bank_of;
use protorec::train::finetune::{evaluate_domain, Protocol};
use protorec::train::store::EmbeddingStore;
use protorec::train::{finetune, infer_embeddings, pretrain};

use crate::config::ExperimentConfig;

fn write_all(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn load_spec(cfg: &ExperimentConfig) -> LoadSpec {
    LoadSpec {
        schema: cfg.schema(),
        source_domains: cfg.source_domains(),
        target_domains: cfg.target_domains(),
        seq_cap: cfg.seq_cap,
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    load_bundle(&cfg.bundle_dir, &load_spec(cfg))
}

/// Generate the synthetic planted bundle and write every bundle file.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let bundle = generate_synthetic(&cfg.synthetic_config(), cfg.seed)?;
    save_bundle(&cfg.bundle_dir, &bundle)?;
    let n: usize = bundle.core.records.values().map(Vec::len).sum();
    println!(
        "wrote bundle to {}: {} entities, {} items, {} interactions",
        cfg.bundle_dir.display(),
        bundle.core.graph.n_entities,
        bundle.core.map.len(),
        n
    );
    Ok(())
}

/// Pre-train on the source domains; writes the checkpoint and training log.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let bundle = load_data(cfg)?;
    let mut model = Model::init(cfg.model_config(), cfg.seed)?;
    model.attach_entity_table(&bundle.core.graph.features);
    let log = pretrain(&mut model, &bundle.core, &cfg.pretrain_config())?;
    model.save(&cfg.checkpoint)?;
    log.write_to(&cfg.pretrain_log)?;
    print!("{}", log.render());
    println!("checkpoint at {}", cfg.checkpoint.display());
    Ok(())
}

fn next_snapshot_path(store_dir: &Path) -> Result<(u64, PathBuf)> {
    let mut max_id = 0u64;
    if store_dir.exists() {
        for entry in fs::read_dir(store_dir).map_err(|e| Error::io(store_dir, e))? {
            let entry = entry.map_err(|e| Error::io(store_dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name
                .strip_prefix("snapshot-")
                .and_then(|s| s.strip_suffix(".bin"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                max_id = max_id.max(id);
            }
        }
    }
    let id = max_id + 1;
    Ok((id, store_dir.join(format!("snapshot-{id}.bin"))))
}

/// Most recent snapshot in the store directory.
pub fn latest_snapshot(store_dir: &Path) -> Result<EmbeddingStore> {
    let (next, _) = next_snapshot_path(store_dir)?;
    if next <= 1 {
        return Err(Error::invalid(format!(
            "no snapshots in {}; run `infer` first",
            store_dir.display()
        )));
    }
    EmbeddingStore::load(&store_dir.join(format!("snapshot-{}.bin", next - 1)))
}

/// Offline inference: write a fresh embedding snapshot plus the prototype
/// assignment export.
pub fn cmd_infer(cfg: &ExperimentConfig) -> Result<()> {
    let bundle = load_data(cfg)?;
    let (model, hash) = Model::load(&cfg.checkpoint)?;
    let (snapshot_id, path) = next_snapshot_path(&cfg.store_dir)?;
    let store = infer_embeddings(&model, &bundle.core, snapshot_id, hash)?;
    // Write-then-rename so readers never observe a partial snapshot.
    let tmp = path.with_extension("tmp");
    store.save(&tmp)?;
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;

    let entity_matrix = encode_entities(&model, &bundle.core.graph)?;
    let bank = bank_of(&model);
    let assigned = assignments(&entity_matrix, &bank)?;
    let mut out = String::new();
    for (e, (proto, sim)) in assigned.iter().enumerate() {
        writeln!(out, "{}", assignment_line(e as u32, *proto, *sim)).unwrap();
    }
    write_all(&cfg.assignments_out, &out)?;
    println!(
        "snapshot {} at {} ({} rows); assignments at {}",
        snapshot_id,
        path.display(),
        store.len(),
        cfg.assignments_out.display()
    );
    Ok(())
}

/// Fine-tune the heads on the target domain's train split.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<()> {
    let bundle = load_data(cfg)?;
    let (mut model, hash) = Model::load(&cfg.checkpoint)?;
    let store = latest_snapshot(&cfg.store_dir)?;
    if store.checkpoint_hash != hash {
        return Err(Error::invalid(
            "snapshot was produced by a different checkpoint; re-run `infer`",
        ));
    }
    let outcome = finetune(&mut model, &bundle.core, &store, &cfg.finetune_config())?;
    let mut header = vec![
        ("embed_dim".to_string(), cfg.embed_dim.to_string()),
        ("target_domain".to_string(), cfg.target_domain.to_string()),
        (
            "user_cards".to_string(),
            join_u32(&bundle.core.schema.user_fields),
        ),
        (
            "item_cards".to_string(),
            join_u32(&bundle.core.schema.item_fields),
        ),
    ];
    if !cfg.freeze_backbone {
        // The backbone moved: persist it alongside the heads.
        model.save(&cfg.checkpoint.with_extension("unfrozen"))?;
        header.push(("unfrozen".to_string(), "true".to_string()));
    }
    protorec::model::save_checkpoint(&cfg.heads, &header, &outcome.heads)?;
    let mut log = String::new();
    for (i, loss) in outcome.epoch_loss.iter().enumerate() {
        writeln!(log, "{}\t{loss:.6}", i + 1).unwrap();
    }
    write_all(&cfg.finetune_log, &log)?;
    print!("{log}");
    println!("heads at {}", cfg.heads.display());
    Ok(())
}

fn join_u32(v: &[u32]) -> String {
    v.iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

/// Score every (user, item) pair of the target domain with the inner
/// product. Labels are never read: users and the catalog come from the
/// interaction log's id columns alone.
pub fn cmd_zeroshot(cfg: &ExperimentConfig) -> Result<()> {
    let bundle = load_data(cfg)?;
    let store = latest_snapshot(&cfg.store_dir)?;
    let core = &bundle.core;
    let domain = cfg.target_domain;
    let records = core.domain_records(domain);
    if records.is_empty() {
        return Err(Error::invalid(format!("domain {domain} has no interactions")));
    }
    let users: std::collections::BTreeSet<u32> = records.iter().map(|r| r.user).collect();
    let catalog = core.catalog(domain);
    let mut out = String::new();
    for &user in &users {
        let zu = store.user(user)?;
        for &item in &catalog {
            let zi = store.item_embedding(item, &core.map)?;
            let score = protorec::train::zeroshot_score(zu, &zi);
            writeln!(out, "{domain}\t{user}\t{item}\t{score:.6}").unwrap();
        }
    }
    write_all(&cfg.ranking_out, &out)?;
    println!(
        "zero-shot scores for {} users x {} items at {}",
        users.len(),
        catalog.len(),
        cfg.ranking_out.display()
    );
    Ok(())
}

/// Rank the target domain under the configured protocol and append the
/// metric line.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let bundle = load_data(cfg)?;
    let (model, _) = Model::load(&cfg.checkpoint)?;
    let store = latest_snapshot(&cfg.store_dir)?;
    let protocol = match cfg.protocol.as_str() {
        "normal" => Protocol::Normal,
        "zeroshot" => Protocol::ZeroShot,
        other => return Err(Error::config(format!("unknown protocol {other:?}"))),
    };
    let outcome = match protocol {
        Protocol::ZeroShot => None,
        Protocol::Normal => Some(load_heads(cfg)?),
    };
    let row = evaluate_domain(
        &model,
        &bundle.core,
        &store,
        outcome.as_ref(),
        cfg.target_domain,
        protocol,
    )?;
    let line = row.line(cfg.target_domain, protocol.name());
    let mut existing = fs::read_to_string(&cfg.metrics_out).unwrap_or_default();
    existing.push_str(&line);
    existing.push('\n');
    write_all(&cfg.metrics_out, &existing)?;
    println!("{line}");
    Ok(())
}

fn load_heads(cfg: &ExperimentConfig) -> Result<protorec::train::finetune::FinetuneOutcome> {
    let (header, heads, _) = load_checkpoint(&cfg.heads)?;
    let parse_cards = |key: &str| -> Result<Vec<u32>> {
        header
            .get(key)
            .ok_or_else(|| Error::invalid(format!("heads checkpoint missing {key}")))?
            .split(',')
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::invalid(format!("bad {key} in heads checkpoint")))
            })
            .collect()
    };
    let spec = protorec::train::DeepFmSpec {
        cards: {
            let mut c = parse_cards("user_cards")?;
            c.extend(parse_cards("item_cards")?);
            c
        },
        n_user_fields: parse_cards("user_cards")?.len(),
    };
    Ok(protorec::train::finetune::FinetuneOutcome {
        heads,
        spec,
        epoch_loss: Vec::new(),
    })
}

/// Sanity helper for tests: hash of the current checkpoint payload.
pub fn current_checkpoint_hash(cfg: &ExperimentConfig) -> Result<u64> {
    checkpoint_hash(&cfg.checkpoint)
}
