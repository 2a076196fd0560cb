//! Experiment configuration: defaults, `key=value` config files, and CLI
//! overrides (flags win). Unknown keys are hard errors so hyperparameter
//! typos cannot silently fall back to defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use protorec::data::synthetic::SyntheticConfig;
use protorec::data::ProfileSchema;
use protorec::error::{Error, Result};
use protorec::model::ModelConfig;
use protorec::train::{FinetuneConfig, PretrainConfig};

/// Which component an ablation run removes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    /// Graph learning: the encoder becomes a learned lookup table.
    Gl,
    /// Contrastive prototype learning: gamma = 0.
    Cpl,
    /// Prototype-enhanced attention: plain tower mode.
    Pea,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "" | "none" => Ok(Ablation::None),
            "gl" => Ok(Ablation::Gl),
            "cpl" => Ok(Ablation::Cpl),
            "pea" => Ok(Ablation::Pea),
            other => Err(Error::config(format!(
                "unknown ablation {other:?}; expected gl, cpl or pea"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    // Paths.
    pub bundle_dir: PathBuf,
    pub store_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub heads: PathBuf,
    pub pretrain_log: PathBuf,
    pub finetune_log: PathBuf,
    pub metrics_out: PathBuf,
    pub ranking_out: PathBuf,
    pub assignments_out: PathBuf,
    // Model hyperparameters.
    pub embed_dim: usize,
    pub interests: usize,
    pub prototypes: usize,
    pub mask_k: usize,
    pub temperature: f64,
    pub gamma: f64,
    pub seq_cap: usize,
    // Training.
    pub batch_size: usize,
    pub lr: f64,
    pub pretrain_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub ablate: Ablation,
    pub freeze_backbone: bool,
    // Evaluation.
    pub protocol: String,
    pub target_domain: u32,
    // Generator.
    pub gen_entities: usize,
    pub gen_topics: usize,
    pub gen_users: usize,
    pub gen_triplets: usize,
    pub gen_p_in: f64,
    pub gen_p_out: f64,
    pub gen_source_domains: usize,
    pub gen_target_domains: usize,
    pub gen_items_per_source: usize,
    pub gen_items_per_target: usize,
    pub gen_records_per_source: usize,
    pub gen_records_per_target: usize,
    pub gen_feature_noise: f64,
    pub gen_base_click: f64,
    pub gen_click_gain: f64,
    pub gen_extra_field_card: u32,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            bundle_dir: "data/bundle".into(),
            store_dir: "store".into(),
            checkpoint: "ckpt/pretrained".into(),
            heads: "ckpt/heads".into(),
            pretrain_log: "logs/pretrain.tsv".into(),
            finetune_log: "logs/finetune.tsv".into(),
            metrics_out: "out/metrics.tsv".into(),
            ranking_out: "out/zeroshot_ranking.tsv".into(),
            assignments_out: "out/prototype_assignments.tsv".into(),
            embed_dim: 64,
            interests: 10,
            prototypes: 900,
            mask_k: 160,
            temperature: 0.2,
            gamma: 1.0,
            seq_cap: 200,
            batch_size: 512,
            lr: 1e-4,
            pretrain_epochs: 3,
            finetune_lr: 1e-4,
            finetune_epochs: 3,
            seed: 0,
            ablate: Ablation::None,
            freeze_backbone: true,
            protocol: "normal".into(),
            target_domain: 2,
            gen_entities: 500,
            gen_topics: 10,
            gen_users: 48,
            gen_triplets: 4000,
            gen_p_in: 1.0,
            gen_p_out: 0.01,
            gen_source_domains: 2,
            gen_target_domains: 1,
            gen_items_per_source: 150,
            gen_items_per_target: 120,
            gen_records_per_source: 6000,
            gen_records_per_target: 6000,
            gen_feature_noise: 0.3,
            gen_base_click: 0.08,
            gen_click_gain: 0.8,
            gen_extra_field_card: 8,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for key {key}")))
}

impl ExperimentConfig {
    /// Apply one `key=value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "bundle_dir" => self.bundle_dir = value.into(),
            "store_dir" => self.store_dir = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "heads" => self.heads = value.into(),
            "pretrain_log" => self.pretrain_log = value.into(),
            "finetune_log" => self.finetune_log = value.into(),
            "metrics_out" => self.metrics_out = value.into(),
            "ranking_out" => self.ranking_out = value.into(),
            "assignments_out" => self.assignments_out = value.into(),
            "embed_dim" => self.embed_dim = parse_as(key, value)?,
            "interests" => self.interests = parse_as(key, value)?,
            "prototypes" => self.prototypes = parse_as(key, value)?,
            "mask_k" => self.mask_k = parse_as(key, value)?,
            "temperature" => self.temperature = parse_as(key, value)?,
            "gamma" => self.gamma = parse_as(key, value)?,
            "seq_cap" => self.seq_cap = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_as(key, value)?,
            "finetune_lr" => self.finetune_lr = parse_as(key, value)?,
            "finetune_epochs" => self.finetune_epochs = parse_as(key, value)?,
            "seed" => self.seed = parse_as(key, value)?,
            "ablate" => self.ablate = Ablation::parse(value)?,
            "freeze_backbone" => self.freeze_backbone = parse_as(key, value)?,
            "protocol" => {
                if value != "normal" && value != "zeroshot" {
                    return Err(Error::config(format!("unknown protocol {value:?}")));
                }
                self.protocol = value.into();
            }
            "target_domain" => self.target_domain = parse_as(key, value)?,
            "gen_entities" => self.gen_entities = parse_as(key, value)?,
            "gen_topics" => self.gen_topics = parse_as(key, value)?,
            "gen_users" => self.gen_users = parse_as(key, value)?,
            "gen_triplets" => self.gen_triplets = parse_as(key, value)?,
            "gen_p_in" => self.gen_p_in = parse_as(key, value)?,
            "gen_p_out" => self.gen_p_out = parse_as(key, value)?,
            "gen_source_domains" => self.gen_source_domains = parse_as(key, value)?,
            "gen_target_domains" => self.gen_target_domains = parse_as(key, value)?,
            "gen_items_per_source" => self.gen_items_per_source = parse_as(key, value)?,
            "gen_items_per_target" => self.gen_items_per_target = parse_as(key, value)?,
            "gen_records_per_source" => self.gen_records_per_source = parse_as(key, value)?,
            "gen_records_per_target" => self.gen_records_per_target = parse_as(key, value)?,
            "gen_feature_noise" => self.gen_feature_noise = parse_as(key, value)?,
            "gen_base_click" => self.gen_base_click = parse_as(key, value)?,
            "gen_click_gain" => self.gen_click_gain = parse_as(key, value)?,
            "gen_extra_field_card" => self.gen_extra_field_card = parse_as(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Defaults, then the config file (if any), then CLI overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(Error::data(path, i + 1, "expected key=value"));
                };
                cfg.apply(k.trim(), v.trim())
                    .map_err(|e| Error::data(path, i + 1, e.to_string()))?;
            }
        }
        for (k, v) in overrides {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.pretrain_config().validate()?;
        if self.gen_source_domains == 0 {
            return Err(Error::config("need at least one source domain"));
        }
        Ok(())
    }

    pub fn source_domains(&self) -> Vec<u32> {
        (0..self.gen_source_domains as u32).collect()
    }

    pub fn target_domains(&self) -> Vec<u32> {
        (self.gen_source_domains as u32
            ..(self.gen_source_domains + self.gen_target_domains) as u32)
            .collect()
    }

    pub fn schema(&self) -> ProfileSchema {
        ProfileSchema {
            user_fields: vec![self.gen_topics as u32, self.gen_extra_field_card],
            item_fields: vec![self.gen_topics as u32, self.gen_extra_field_card],
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            entities: self.gen_entities,
            topics: self.gen_topics,
            triplets: self.gen_triplets,
            p_in: self.gen_p_in,
            p_out: self.gen_p_out,
            users: self.gen_users,
            source_domains: self.gen_source_domains,
            target_domains: self.gen_target_domains,
            items_per_source: self.gen_items_per_source,
            items_per_target: self.gen_items_per_target,
            records_per_source: self.gen_records_per_source,
            records_per_target: self.gen_records_per_target,
            entity_count_weights: [0.5, 0.35, 0.15],
            feature_noise: self.gen_feature_noise,
            base_click: self.gen_base_click,
            click_gain: self.gen_click_gain,
            seq_cap: self.seq_cap,
            extra_field_card: self.gen_extra_field_card,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            interests: self.interests,
            prototypes: self.prototypes,
            mask_k: self.mask_k,
            temperature: self.temperature,
            gamma: self.effective_gamma(),
            seq_cap: self.seq_cap,
            n_entities: self.gen_entities,
            source_domains: self.source_domains(),
            use_graph_encoder: self.ablate != Ablation::Gl,
            use_pea: self.ablate != Ablation::Pea,
        }
    }

    /// Gamma with the "w/o CPL" ablation applied.
    pub fn effective_gamma(&self) -> f64 {
        if self.ablate == Ablation::Cpl {
            0.0
        } else {
            self.gamma
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            gamma: self.effective_gamma(),
            batch_size: self.batch_size,
            epochs: self.pretrain_epochs,
            lr: self.lr,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            target_domain: self.target_domain,
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            lr: self.finetune_lr,
            seed: self.seed,
            freeze_backbone: self.freeze_backbone,
            embeddings: protorec::train::EmbeddingSource::Store,
        }
    }

    /// All domains the generator produces, for unknown-domain validation.
    pub fn known_domains(&self) -> BTreeSet<u32> {
        self.source_domains()
            .into_iter()
            .chain(self.target_domains())
            .collect()
    }
}

/// Split a `--set key=value` argument.
pub fn parse_override(raw: &str) -> Result<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::config(format!("override {raw:?} must be key=value")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_design_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.embed_dim, 64);
        assert_eq!(c.interests, 10);
        assert_eq!(c.prototypes, 900);
        assert_eq!(c.mask_k, 160);
        assert_eq!(c.temperature, 0.2);
        assert_eq!(c.gamma, 1.0);
        assert_eq!(c.seq_cap, 200);
        assert_eq!(c.batch_size, 512);
        assert_eq!(c.lr, 1e-4);
        assert!(c.freeze_backbone);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let mut c = ExperimentConfig::default();
        assert!(c.apply("prototyps", "900").is_err());
        assert!(c.apply("prototypes", "800").is_ok());
        assert_eq!(c.prototypes, 800);
    }

    #[test]
    fn file_then_flags_precedence() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("exp.conf");
        std::fs::write(&path, "# comment\nseed=9\ngamma=0.5\n").unwrap();
        let cfg = ExperimentConfig::load(
            Some(&path),
            &[("gamma".to_string(), "2.0".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.gamma, 2.0);
    }

    #[test]
    fn ablations_map_to_model_switches() {
        let mut c = ExperimentConfig::default();
        c.ablate = Ablation::Gl;
        assert!(!c.model_config().use_graph_encoder);
        c.ablate = Ablation::Cpl;
        assert_eq!(c.effective_gamma(), 0.0);
        assert!(c.model_config().use_graph_encoder);
        c.ablate = Ablation::Pea;
        assert!(!c.model_config().use_pea);
    }
}
