//! Experiment configuration (JSON).
//!
//! ```json
//! {
//!   "name": "synthetic",
//!   "dataset": { "synthetic": { "n_users": 600, "n_items": 240, "n_clusters": 8, "n_cold": 24 } },
//!   "preprocess": { "min_count": 5, "max_len": 20 },
//!   "rqvae": { "hidden": [128, 64, 32], "codebook_size": 64, "epochs": 300 },
//!   "model": { "layers": 2, "d_model": 32, "heads": 2, "ffn_hidden": 64 },
//!   "variants": ["tiger", "tiger_t", "dense_id", "dense_sid", "liger", "liger_detach"],
//!   "train": { "lr": 0.003, "batch_size": 64, "max_epochs": 20, "patience": 5 },
//!   "inference": { "k": 20, "final_k": 10, "include_cold": true, "sweep_ks": [10, 20, 40, 80] },
//!   "seeds": [0, 1, 2]
//! }
//! ```
//!
//! Omitted sections and fields take their defaults. A file dataset is
//! `{"files": {"interactions": "...jsonl", "embeddings": "...f32", "attributes": null}}`
//! with paths relative to the config file. The run seed replaces the seeds
//! of the quantizer, the model initialization and the training loop; the
//! synthetic data keeps its own seed so every run sees the same data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use seqrec_core::datasets::{PreprocessConfig, SynthConfig};
use seqrec_core::genret::BeamOptions;
use seqrec_core::hybrid::InferenceConfig;
use seqrec_core::model::{ModelConfig, Variant};
use seqrec_core::sid::RqVaeConfig;
use seqrec_core::train::TrainConfig;

use crate::error::{LabError, Result};
use crate::io::{read_bytes, sha256_hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    Files {
        interactions: PathBuf,
        embeddings: PathBuf,
        #[serde(default)]
        attributes: Option<PathBuf>,
    },
}

/// Architecture settings applied on top of the per-variant defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub layers: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_hidden: Option<usize>,
    pub dropout: Option<f64>,
    /// Replaces the input dropout of every variant.
    pub input_dropout: Option<f64>,
    pub max_items: Option<usize>,
    pub temperature: Option<f64>,
    pub ntp_weight: Option<f64>,
}

/// Which trained variants play which role in the NPG sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NpgRoles {
    pub generative: Variant,
    pub dense: Variant,
    pub hybrid: Variant,
}

impl Default for NpgRoles {
    fn default() -> Self {
        NpgRoles { generative: Variant::Tiger, dense: Variant::DenseSid, hybrid: Variant::Liger }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSettings {
    /// Generated candidates per query.
    pub k: usize,
    /// Length of evaluated rankings; metrics are taken at this cutoff.
    pub final_k: usize,
    pub include_cold: bool,
    pub beam: BeamOptions,
    /// Beam sizes of the NPG sweep; the catalog size is always appended.
    pub sweep_ks: Vec<usize>,
    pub coldstart_ks: Vec<usize>,
    pub npg: NpgRoles,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        let base = InferenceConfig::default();
        InferenceSettings {
            k: base.k,
            final_k: base.final_k,
            include_cold: base.include_cold,
            beam: base.beam,
            sweep_ks: vec![10, 20, 40, 80],
            coldstart_ks: vec![10, 20, 40, 80],
            npg: NpgRoles::default(),
        }
    }
}

impl InferenceSettings {
    pub fn base(&self) -> InferenceConfig {
        InferenceConfig { k: self.k, include_cold: self.include_cold, final_k: self.final_k, beam: self.beam }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub rqvae: RqVaeConfig,
    #[serde(default)]
    pub model: ModelOverrides,
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inference: InferenceSettings,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory that relative dataset paths are resolved against.
    pub base_dir: PathBuf,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the config re-serialized with every default filled in,
    /// so formatting and omitted defaults do not change it.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("serializable config"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return bad(format!("name {:?} must be non-empty ASCII letters, digits, '-' or '_'", self.name));
        }
        if self.variants.is_empty() {
            return bad("no variants listed".into());
        }
        let mut seen = self.variants.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.variants.len() {
            return bad("variants listed twice".into());
        }
        if self.seeds.is_empty() {
            return bad("no seeds listed".into());
        }
        let inf = &self.inference;
        if inf.k == 0 || inf.final_k == 0 || inf.sweep_ks.contains(&0) || inf.coldstart_ks.contains(&0) {
            return bad("beam sizes and final_k must be ≥ 1".into());
        }
        for (role, v) in [("generative", inf.npg.generative), ("dense", inf.npg.dense), ("hybrid", inf.npg.hybrid)] {
            if !self.variants.contains(&v) {
                continue;
            }
            let ok = match role {
                "generative" => v.has_decoder(),
                "dense" => v.has_dense_head(),
                _ => v.is_hybrid(),
            };
            if !ok {
                return bad(format!("{v} cannot serve as the {role} NPG reference"));
            }
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.dim != self.rqvae.input_dim && self.variants.iter().any(|v| v.uses_sids()) {
                return bad(format!("synthetic dim {} != rqvae input_dim {}", s.dim, self.rqvae.input_dim));
            }
        }
        if self.variants.iter().any(|v| v.uses_sids()) {
            self.rqvae.validate()?;
        }
        for &v in &self.variants {
            self.model_config(v, 0).validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self, variant: Variant, seed: u64) -> ModelConfig {
        let o = &self.model;
        let d = ModelConfig::standard(variant);
        ModelConfig {
            variant,
            layers: o.layers.unwrap_or(d.layers),
            d_model: o.d_model.unwrap_or(d.d_model),
            heads: o.heads.unwrap_or(d.heads),
            ffn_hidden: o.ffn_hidden.unwrap_or(d.ffn_hidden),
            dropout: o.dropout.unwrap_or(d.dropout),
            input_dropout: o.input_dropout.unwrap_or(d.input_dropout),
            max_items: o.max_items.unwrap_or(d.max_items),
            temperature: o.temperature.unwrap_or(d.temperature),
            ntp_weight: o.ntp_weight.unwrap_or(d.ntp_weight),
            seed,
        }
    }

    pub fn rqvae_config(&self, seed: u64) -> RqVaeConfig {
        RqVaeConfig { seed, ..self.rqvae.clone() }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|_| LabError::format(path, "config is not UTF-8"))?;
        let config = ExperimentConfig::from_json(&text).map_err(|e| LabError::format(path, e.to_string()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let loaded = LoadedConfig { hash: config.hash(), config, base_dir };
        if let DatasetSource::Files { interactions, embeddings, attributes } = &loaded.config.dataset {
            for p in [Some(interactions), Some(embeddings), attributes.as_ref()].into_iter().flatten() {
                let full = loaded.resolve(p);
                if !full.exists() {
                    return Err(LabError::format(path, format!("dataset file {} does not exist", full.display())));
                }
            }
        }
        Ok(loaded)
    }

    pub fn from_config(config: ExperimentConfig, base_dir: PathBuf) -> Result<Self> {
        config.validate()?;
        Ok(LoadedConfig { hash: config.hash(), config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn short_hash(&self) -> &str {
        &self.hash[..12]
    }
}
