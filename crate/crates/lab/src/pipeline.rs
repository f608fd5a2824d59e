//! The experiment stages. Each command reads upstream artifacts from the
//! run directory, computes, and commits its outputs with a stage record.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use seqrec_core::datasets::{
    identify_cold_items, leave_one_out_split, preprocess, synth_generate, Example, InteractionLog, ItemCatalog,
    ItemId, SplitDataset,
};
use seqrec_core::eval::{coldstart_probability_analysis, evaluate, mean_std, Histogram};
use seqrec_core::hybrid::{npg_sweep, recommend};
use seqrec_core::infer::Frozen;
use seqrec_core::model::{ItemSpace, SeqRecModel, Variant};
use seqrec_core::sid::{assign_semantic_ids, train_rqvae, SidTable};
use seqrec_core::train::{train, StopReason};

use crate::checkpoint::{encode_model, encode_rqvae, read_model, read_rqvae};
use crate::config::{DatasetSource, LoadedConfig};
use crate::error::{LabError, Result};
use crate::io::{
    encode_attributes, encode_embeddings, encode_interactions, encode_sid_table, read_attributes, read_bytes,
    read_embeddings, read_interactions, read_json, read_sid_table, sha256_hex, sidecar_path, to_json_pretty, to_jsonl,
};
use crate::report::{
    git_describe, median, read_csv, to_csv, ColdStartLine, ColdStartRow, EvalQueryLine, EvalRow, NpgQueryLine, NpgRow,
    Provenance, SummaryRow,
};
use crate::rundir::{config_dir, seed_dir, Plan, StageDir, WriteMode};

pub const PROCESSED_ITEMS: &str = "processed/items.f32";
pub const PROCESSED_ITEMS_SIDECAR: &str = "processed/items.json";
pub const PROCESSED_LOG: &str = "processed/interactions.jsonl";
pub const PROCESSED_ATTRIBUTES: &str = "processed/attributes.jsonl";
pub const PROCESSED_SUMMARY: &str = "processed/summary.json";
pub const RQVAE_CHECKPOINT: &str = "rqvae/rqvae.ckpt";
pub const RQVAE_HISTORY: &str = "rqvae/history.json";
pub const SID_TABLE: &str = "sids/sid_table.jsonl";
pub const SID_SUMMARY: &str = "sids/summary.json";
pub const EVAL_CSV: &str = "reports/eval.csv";
pub const EVAL_QUERIES: &str = "reports/eval_queries.jsonl";
pub const COLDSTART_CSV: &str = "reports/coldstart.csv";
pub const COLDSTART_QUERIES: &str = "reports/coldstart_queries.jsonl";
pub const COLDSTART_HISTOGRAMS: &str = "reports/coldstart_histograms.json";
pub const NPG_CSV: &str = "reports/npg.csv";
pub const NPG_QUERIES: &str = "reports/npg_queries.jsonl";
pub const SUMMARY_CSV: &str = "summary.csv";

pub fn model_checkpoint(v: Variant) -> String {
    format!("models/{v}/model.ckpt")
}

pub fn model_history(v: Variant) -> String {
    format!("models/{v}/history.jsonl")
}

pub fn model_summary(v: Variant) -> String {
    format!("models/{v}/summary.json")
}

fn train_stage(v: Variant) -> String {
    format!("train-{v}")
}

/// Whether a command ran or found its outputs up to date.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub stage: String,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedSummary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train_examples: usize,
    pub valid_examples: usize,
    pub test_examples: usize,
    pub dropped_short: usize,
    pub cold_items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RqVaeReport {
    /// Mean reconstruction error at initialization and after each epoch.
    pub recon: Vec<f64>,
    pub reseeded: Vec<usize>,
    /// Items whose embeddings formed the training set.
    pub trained_on: Vec<String>,
    pub excluded_cold: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidSummary {
    pub items: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub dedup_range: usize,
    pub vocab_size: usize,
    /// Share of items whose code tuple is shared with another item.
    pub collision_rate: f64,
    pub unique_ids: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub stop: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_ndcg: f64,
    pub parameters: usize,
    pub learnable_embedding_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpochLine {
    #[serde(flatten)]
    provenance: Provenance,
    variant: String,
    epoch: usize,
    train_loss: f64,
    val_ndcg: f64,
    lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistogramSet {
    k: usize,
    p_k: Histogram,
    p_star: Histogram,
    p_diff: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistogramReport {
    #[serde(flatten)]
    provenance: Provenance,
    variant: String,
    histograms: Vec<HistogramSet>,
}

/// Preprocessed data reloaded from the run directory.
#[derive(Debug, Clone)]
pub struct Processed {
    pub log: InteractionLog,
    pub catalog: ItemCatalog,
    pub split: SplitDataset,
}

impl Processed {
    fn user(&self, ex: &Example) -> String {
        self.log.sequences[ex.user].user.clone()
    }

    fn key(&self, item: ItemId) -> String {
        self.catalog.key(item).to_string()
    }
}

/// An open run directory for one (config, seed).
#[derive(Debug)]
pub struct Session {
    pub cfg: LoadedConfig,
    pub seed: u64,
    pub run: StageDir,
}

impl Session {
    pub fn open(cfg: LoadedConfig, seed: u64, root: &Path, mode: WriteMode) -> Result<Self> {
        if !cfg.config.seeds.contains(&seed) {
            return Err(LabError::Config(format!("seed {seed} is not listed in the config seeds {:?}", cfg.config.seeds)));
        }
        let run = StageDir::open(seed_dir(root, &cfg, seed), &cfg.hash, mode)?;
        let snapshot = run.path("config.json");
        if !snapshot.exists() {
            crate::io::write_atomic(&snapshot, &to_json_pretty(&cfg.config))?;
        }
        info!("config {} seed {seed}: {}", cfg.hash, run.dir().display());
        Ok(Session { cfg, seed, run })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.cfg.hash.clone(), seed: self.seed, git_describe: git_describe().to_string() }
    }

    fn begin(&self, stage: &str, inputs: &[PathBuf], extra: &str) -> Result<Option<String>> {
        info!("{stage}: config {} seed {}", self.cfg.hash, self.seed);
        let digest = self.run.digest_inputs(stage, inputs, extra)?;
        match self.run.plan(stage, digest)? {
            Plan::Run { inputs } => Ok(Some(inputs)),
            Plan::Skip => {
                info!("{stage}: inputs unchanged, nothing to do");
                Ok(None)
            }
        }
    }

    fn processed_paths(&self) -> Result<Vec<PathBuf>> {
        [PROCESSED_ITEMS, PROCESSED_ITEMS_SIDECAR, PROCESSED_LOG, PROCESSED_ATTRIBUTES, PROCESSED_SUMMARY]
            .into_iter()
            .map(|rel| self.run.require("preprocess", rel, "preprocessed data", "preprocess"))
            .collect()
    }

    pub fn load_processed(&self) -> Result<Processed> {
        let paths = self.processed_paths()?;
        let mut catalog = read_embeddings(&paths[0], None)?;
        let log = read_interactions(&paths[2], &catalog)?;
        read_attributes(&paths[3], &mut catalog)?;
        let summary: ProcessedSummary = read_json(&paths[4])?;
        let mut split = leave_one_out_split(&log);
        split.dropped_short = summary.dropped_short;
        let cold = identify_cold_items(&split, catalog.len());
        catalog.set_cold(&cold);
        let keys: Vec<String> = catalog.cold_items().into_iter().map(|i| catalog.key(i).to_string()).collect();
        if keys != summary.cold_items {
            return Err(LabError::format(&paths[4], "cold items disagree with the interaction log"));
        }
        Ok(Processed { log, catalog, split })
    }

    fn sid_paths(&self) -> Result<Vec<PathBuf>> {
        Ok(vec![self.run.require("assign-sids", SID_TABLE, "SID table", "assign-sids")?])
    }

    /// The SID table and the hash recorded in model checkpoints.
    pub fn load_sids(&self, catalog: &ItemCatalog) -> Result<(SidTable, String)> {
        let path = self.sid_paths()?.remove(0);
        let table = read_sid_table(&path, catalog, self.cfg.config.rqvae.codebook_size)?;
        Ok((table, sha256_hex(&read_bytes(&path)?)))
    }

    fn space(&self, v: Variant, data: &Processed) -> Result<(ItemSpace, String)> {
        if v.uses_sids() {
            let (table, hash) = self.load_sids(&data.catalog)?;
            Ok((ItemSpace::new(&data.catalog, Some(table))?, hash))
        } else {
            Ok((ItemSpace::new(&data.catalog, None)?, String::new()))
        }
    }

    fn model_inputs(&self, v: Variant) -> Result<Vec<PathBuf>> {
        let mut inputs = self.processed_paths()?;
        if v.uses_sids() {
            inputs.extend(self.sid_paths()?);
        }
        Ok(inputs)
    }

    fn trained_path(&self, v: Variant) -> Result<PathBuf> {
        self.run.require(&train_stage(v), &model_checkpoint(v), &format!("{v} checkpoint"), &format!("train --variant {v}"))
    }

    pub fn load_model(&self, v: Variant, data: &Processed) -> Result<(SeqRecModel, ItemSpace)> {
        let path = self.trained_path(v)?;
        let (space, hash) = self.space(v, data)?;
        let model = read_model(&path, &hash)?.restore(&space)?;
        Ok((model, space))
    }

    fn variants_with(&self, pred: fn(Variant) -> bool) -> Vec<Variant> {
        self.cfg.config.variants.iter().copied().filter(|&v| pred(v)).collect()
    }
}

pub fn cmd_preprocess(s: &Session) -> Result<Outcome> {
    let stage = "preprocess";
    let cfg = &s.cfg;
    let inputs = match &cfg.config.dataset {
        DatasetSource::Synthetic(_) => Vec::new(),
        DatasetSource::Files { interactions, embeddings, attributes } => {
            let emb = cfg.resolve(embeddings);
            let mut v = vec![cfg.resolve(interactions), sidecar_path(&emb), emb];
            v.extend(attributes.as_ref().map(|a| cfg.resolve(a)));
            v
        }
    };
    let Some(digest) = s.begin(stage, &inputs, "")? else {
        return Ok(Outcome { stage: stage.into(), skipped: true });
    };
    let (log, catalog) = match &cfg.config.dataset {
        DatasetSource::Synthetic(sc) => {
            let (log, catalog, _) = synth_generate(sc)?;
            (log, catalog)
        }
        DatasetSource::Files { interactions, embeddings, attributes } => {
            let mut catalog = read_embeddings(&cfg.resolve(embeddings), None)?;
            let log = read_interactions(&cfg.resolve(interactions), &catalog)?;
            if let Some(a) = attributes {
                read_attributes(&cfg.resolve(a), &mut catalog)?;
            }
            (log, catalog)
        }
    };
    let p = preprocess(&log, &catalog, &cfg.config.preprocess)?;
    let summary = ProcessedSummary {
        users: p.log.sequences.len(),
        items: p.catalog.len(),
        interactions: p.log.num_interactions(),
        train_examples: p.split.train.len(),
        valid_examples: p.split.valid.len(),
        test_examples: p.split.test.len(),
        dropped_short: p.split.dropped_short,
        cold_items: p.cold_items().into_iter().map(|i| p.catalog.key(i).to_string()).collect(),
    };
    info!(
        "{stage}: {} users, {} items ({} cold), {} training pairs",
        summary.users,
        summary.items,
        summary.cold_items.len(),
        summary.train_examples
    );
    let (blob, sidecar) = encode_embeddings(p.catalog.keys(), p.catalog.text());
    s.run.commit(
        stage,
        &digest,
        &[
            (PROCESSED_ITEMS.into(), blob),
            (PROCESSED_ITEMS_SIDECAR.into(), to_json_pretty(&sidecar)),
            (PROCESSED_LOG.into(), encode_interactions(&p.log, &p.catalog)),
            (PROCESSED_ATTRIBUTES.into(), encode_attributes(&p.catalog)),
            (PROCESSED_SUMMARY.into(), to_json_pretty(&summary)),
        ],
    )?;
    Ok(Outcome { stage: stage.into(), skipped: false })
}

pub fn cmd_train_rqvae(s: &Session) -> Result<Outcome> {
    let stage = "train-rqvae";
    let inputs = s.processed_paths()?;
    let Some(digest) = s.begin(stage, &inputs, "")? else {
        return Ok(Outcome { stage: stage.into(), skipped: true });
    };
    let data = s.load_processed()?;
    let t0 = Instant::now();
    let (vae, hist) = train_rqvae(&data.catalog, &s.cfg.config.rqvae_config(s.seed))?;
    info!(
        "{stage}: reconstruction {:.4} -> {:.4} on {} items in {:.1?}",
        hist.recon[0],
        hist.recon.last().copied().unwrap_or(f64::NAN),
        hist.trained_on.len(),
        t0.elapsed()
    );
    let report = RqVaeReport {
        recon: hist.recon,
        reseeded: hist.reseeded,
        trained_on: hist.trained_on.iter().map(|&i| data.key(i)).collect(),
        excluded_cold: data.catalog.cold_items().into_iter().map(|i| data.key(i)).collect(),
    };
    s.run.commit(
        stage,
        &digest,
        &[(RQVAE_CHECKPOINT.into(), encode_rqvae(&vae)), (RQVAE_HISTORY.into(), to_json_pretty(&report))],
    )?;
    Ok(Outcome { stage: stage.into(), skipped: false })
}

pub fn cmd_assign_sids(s: &Session) -> Result<Outcome> {
    let stage = "assign-sids";
    let mut inputs = s.processed_paths()?;
    inputs.push(s.run.require("train-rqvae", RQVAE_CHECKPOINT, "RQ-VAE checkpoint", "train-rqvae")?);
    let Some(digest) = s.begin(stage, &inputs, "")? else {
        return Ok(Outcome { stage: stage.into(), skipped: true });
    };
    let data = s.load_processed()?;
    let vae = read_rqvae(&inputs[inputs.len() - 1])?;
    let table = assign_semantic_ids(&data.catalog, &vae)?;
    let mut tuples: Vec<Vec<usize>> = table.ids.iter().map(|id| id.as_tuple()).collect();
    tuples.sort();
    tuples.dedup();
    let summary = SidSummary {
        items: table.len(),
        levels: table.vocab.levels,
        codebook_size: table.vocab.codebook_size,
        dedup_range: table.vocab.dedup_range,
        vocab_size: table.vocab.size(),
        collision_rate: table.collision_rate(),
        unique_ids: tuples.len() == table.len(),
    };
    info!("{stage}: collision rate {:.3}, dedup range {}", summary.collision_rate, summary.dedup_range);
    s.run.commit(
        stage,
        &digest,
        &[(SID_TABLE.into(), encode_sid_table(&table, &data.catalog)), (SID_SUMMARY.into(), to_json_pretty(&summary))],
    )?;
    Ok(Outcome { stage: stage.into(), skipped: false })
}

/// Trains `variant`, or every configured variant when `None`.
pub fn cmd_train(s: &Session, variant: Option<Variant>) -> Result<Vec<Outcome>> {
    let variants = match variant {
        Some(v) if !s.cfg.config.variants.contains(&v) => {
            return Err(LabError::Config(format!("variant {v} is not listed in the config")));
        }
        Some(v) => vec![v],
        None => s.cfg.config.variants.clone(),
    };
    variants.into_iter().map(|v| train_variant(s, v)).collect()
}

fn train_variant(s: &Session, v: Variant) -> Result<Outcome> {
    let stage = train_stage(v);
    let inputs = s.model_inputs(v)?;
    let Some(digest) = s.begin(&stage, &inputs, "")? else {
        return Ok(Outcome { stage, skipped: true });
    };
    let data = s.load_processed()?;
    let (space, sid_hash) = s.space(v, &data)?;
    let cfg = &s.cfg.config;
    let model = SeqRecModel::new(cfg.model_config(v, s.seed), &space)?;
    let (parameters, rows) = (model.store.num_scalars(), model.learnable_embedding_rows());
    let t0 = Instant::now();
    let out = train(model, &space, &data.split, &cfg.train_config(s.seed), &cfg.inference.base())?;
    if let StopReason::Diverged { epoch } = out.stop {
        log::warn!("{stage}: loss diverged in epoch {epoch}; keeping the best earlier checkpoint");
    }
    info!(
        "{stage}: {} epochs in {:.1?}, best validation NDCG {:.4} at epoch {}",
        out.history.len(),
        t0.elapsed(),
        out.best.metric,
        out.best.epoch
    );
    let mut best = out.best;
    best.sid_hash = sid_hash;
    let prov = s.provenance();
    let history = to_jsonl(out.history.iter().map(|h| EpochLine {
        provenance: prov.clone(),
        variant: v.to_string(),
        epoch: h.epoch,
        train_loss: h.train_loss,
        val_ndcg: h.val_metric,
        lr: h.lr,
    }));
    let summary = TrainSummary {
        variant: v.to_string(),
        stop: format!("{:?}", out.stop),
        epochs_run: out.history.len(),
        best_epoch: best.epoch,
        best_val_ndcg: best.metric,
        parameters,
        learnable_embedding_rows: rows,
    };
    s.run.commit(
        &stage,
        &digest,
        &[
            (model_checkpoint(v), encode_model(&best)),
            (model_history(v), history),
            (model_summary(v), to_json_pretty(&summary)),
        ],
    )?;
    Ok(Outcome { stage, skipped: false })
}

pub fn cmd_evaluate(s: &Session) -> Result<Outcome> {
    let stage = "evaluate";
    let variants = s.cfg.config.variants.clone();
    let mut inputs = s.processed_paths()?;
    for &v in &variants {
        inputs.extend(s.model_inputs(v)?);
        inputs.push(s.trained_path(v)?);
    }
    let Some(digest) = s.begin(stage, &inputs, "")? else {
        return Ok(Outcome { stage: stage.into(), skipped: true });
    };
    let data = s.load_processed()?;
    let base = s.cfg.config.inference.base();
    let prov = s.provenance();
    let cold = data.catalog.cold_flags().to_vec();
    let (mut rows, mut lines) = (Vec::new(), Vec::new());
    for v in variants {
        let (model, space) = s.load_model(v, &data)?;
        let frozen = Frozen::new(&model, &space)?;
        let t0 = Instant::now();
        let report = evaluate(&data.split.test, &cold, base.final_k, |ex| recommend(&frozen, &ex.history, &base))?;
        info!(
            "{stage}: {v} in-set R@{k} {:.4} NDCG@{k} {:.4}, cold R@{k} {:.4} ({:.1?})",
            report.in_set.recall,
            report.in_set.ndcg,
            report.cold.recall,
            t0.elapsed(),
            k = base.final_k
        );
        for (split, m) in [("in_set", report.in_set), ("cold", report.cold), ("all", report.overall)] {
            for (metric, value) in [("recall", m.recall), ("ndcg", m.ndcg)] {
                rows.push(EvalRow {
                    config_hash: prov.config_hash.clone(),
                    seed: prov.seed,
                    git_describe: prov.git_describe.clone(),
                    variant: v.to_string(),
                    split: split.into(),
                    metric: metric.into(),
                    k: report.k,
                    value,
                    queries: m.count,
                });
            }
        }
        for (ex, r) in data.split.test.iter().zip(&report.records) {
            lines.push(EvalQueryLine {
                provenance: prov.clone(),
                variant: v.to_string(),
                user: data.user(ex),
                label: data.key(r.label),
                cold: r.cold,
                rank: r.rank,
                recall: r.recall,
                ndcg: r.ndcg,
            });
        }
    }
    s.run.commit(stage, &digest, &[(EVAL_CSV.into(), to_csv(&rows)), (EVAL_QUERIES.into(), to_jsonl(lines))])?;
    Ok(Outcome { stage: stage.into(), skipped: false })
}

fn ks_extra(ks: &[usize]) -> String {
    ks.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// Generation probabilities of cold test labels under the generative
/// reference model.
pub fn cmd_coldstart(s: &Session, ks: Option<Vec<usize>>) -> Result<Outcome> {
    let stage = "coldstart";
    let inf = &s.cfg.config.inference;
    let v = inf.npg.generative;
    let ks = ks.unwrap_or_else(|| inf.coldstart_ks.clone());
    if ks.is_empty() || ks.contains(&0) {
        return Err(LabError::Config("beam sizes must be ≥ 1".into()));
    }
    let mut inputs = s.model_inputs(v)?;
    inputs.push(s.trained_path(v)?);
    let Some(digest) = s.begin(stage, &inputs, &ks_extra(&ks))? else {
        return Ok(Outcome { stage: stage.into(), skipped: true });
    };
    let data = s.load_processed()?;
    let (model, space) = s.load_model(v, &data)?;
    let frozen = Frozen::new(&model, &space)?;
    let queries: Vec<Example> = data.split.test.iter().filter(|e| data.catalog.is_cold(e.label)).cloned().collect();
    if queries.is_empty() {
        return Err(LabError::Config("the test split has no cold-start queries".into()));
    }
    let report = coldstart_probability_analysis(&frozen, &queries, &ks)?;
    let prov = s.provenance();
    let rows: Vec<ColdStartRow> = ks
        .iter()
        .map(|&k| {
            let at: Vec<_> = report.records.iter().filter(|r| r.k == k).collect();
            let col = |f: fn(&seqrec_core::eval::ColdStartRecord) -> f64| median(&at.iter().map(|r| f(r)).collect::<Vec<_>>());
            ColdStartRow {
                config_hash: prov.config_hash.clone(),
                seed: prov.seed,
                git_describe: prov.git_describe.clone(),
                variant: v.to_string(),
                k,
                queries: at.len(),
                missed_fraction: report.fraction_missed(k),
                exhausted: at.iter().filter(|r| r.exhausted).count(),
                median_p_k: col(|r| r.p_k),
                median_p_star: col(|r| r.p_star),
                median_p_diff: col(|r| r.p_diff),
            }
        })
        .collect();
    for r in &rows {
        info!("{stage}: K={} label missed in {:.1}% of {} cold queries", r.k, 100.0 * r.missed_fraction, r.queries);
    }
    let lines = report.records.iter().map(|r| ColdStartLine {
        provenance: prov.clone(),
        variant: v.to_string(),
        user: data.log.sequences[r.user].user.clone(),
        label: data.key(r.label),
        k: r.k,
        p_k: r.p_k,
        p_star: r.p_star,
        p_diff: r.p_diff,
        exhausted: r.exhausted,
    });
    let hist = HistogramReport {
        provenance: prov.clone(),
        variant: v.to_string(),
        histograms: report
            .histograms
            .iter()
            .map(|h| HistogramSet { k: h.k, p_k: h.p_k.clone(), p_star: h.p_star.clone(), p_diff: h.p_diff.clone() })
            .collect(),
    };
    s.run.commit(
        stage,
        &digest,
        &[
            (COLDSTART_CSV.into(), to_csv(&rows)),
            (COLDSTART_QUERIES.into(), to_jsonl(lines)),
            (COLDSTART_HISTOGRAMS.into(), to_json_pretty(&hist)),
        ],
    )?;
    Ok(Outcome { stage: stage.into(), skipped: false })
}

/// In-set recall of `variant` from the evaluation report.
pub fn in_set_recall(rows: &[EvalRow], variant: Variant) -> Option<f64> {
    rows.iter().find(|r| r.variant == variant.name() && r.split == "in_set" && r.metric == "recall").map(|r| r.value)
}

/// Hybrid inference swept over beam sizes, normalized between the
/// generative and dense reference models.
pub fn cmd_npg(s: &Session, ks: Option<Vec<usize>>) -> Result<Outcome> {
    let stage = "npg";
    let inf = &s.cfg.config.inference;
    let v = inf.npg.hybrid;
    let eval_path = s.run.require("evaluate", EVAL_CSV, "evaluation report", "evaluate")?;
    let mut inputs = s.model_inputs(v)?;
    inputs.push(s.trained_path(v)?);
    inputs.push(eval_path.clone());
    let data_items = read_json::<ProcessedSummary>(&s.run.path(PROCESSED_SUMMARY))?.items;
    let ks = match ks {
        Some(ks) => ks,
        None => {
            let mut ks = inf.sweep_ks.clone();
            if !ks.contains(&data_items) {
                ks.push(data_items);
            }
            ks
        }
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(LabError::Config("beam sizes must be ≥ 1".into()));
    }
    let Some(digest) = s.begin(stage, &inputs, &ks_extra(&ks))? else {
        return Ok(Outcome { stage: stage.into(), skipped: true });
    };
    let rows: Vec<EvalRow> = read_csv(&eval_path)?;
    let reference = |role: &str, rv: Variant| {
        in_set_recall(&rows, rv)
            .ok_or_else(|| LabError::Config(format!("{role} reference {rv} is missing from the evaluation report")))
    };
    let r_gen = reference("generative", inf.npg.generative)?;
    let r_dense = reference("dense", inf.npg.dense)?;
    let data = s.load_processed()?;
    let (model, space) = s.load_model(v, &data)?;
    let frozen = Frozen::new(&model, &space)?;
    let sweep =
        npg_sweep(&frozen, &data.split.test, data.catalog.cold_flags(), &ks, &inf.base(), r_gen, r_dense)?;
    let prov = s.provenance();
    let out_rows: Vec<NpgRow> = sweep
        .points
        .iter()
        .map(|p| NpgRow {
            config_hash: prov.config_hash.clone(),
            seed: prov.seed,
            git_describe: prov.git_describe.clone(),
            variant: v.to_string(),
            k: p.k,
            recall: p.recall,
            npg: p.npg,
            coverage: p.coverage,
            r_generative: r_gen,
            r_dense,
        })
        .collect();
    for r in &out_rows {
        info!("{stage}: K={} recall {:.4} coverage {:.3} NPG {:.3}", r.k, r.recall, r.coverage, r.npg);
    }
    let mut lines = Vec::new();
    for q in &sweep.queries {
        for (i, &k) in ks.iter().enumerate() {
            lines.push(NpgQueryLine {
                provenance: prov.clone(),
                variant: v.to_string(),
                user: data.log.sequences[q.user].user.clone(),
                label: data.key(q.label),
                k,
                candidates: q.candidates[i].len(),
                covered: q.candidates[i].binary_search(&q.label).is_ok(),
                rank: q.rankings[i].iter().position(|&x| x == q.label).map(|r| r + 1),
            });
        }
    }
    s.run.commit(stage, &digest, &[(NPG_CSV.into(), to_csv(&out_rows)), (NPG_QUERIES.into(), to_jsonl(lines))])?;
    Ok(Outcome { stage: stage.into(), skipped: false })
}

/// Mean ± std of every evaluation metric over the configured seeds.
pub fn cmd_report(cfg: &LoadedConfig, root: &Path, mode: WriteMode) -> Result<Outcome> {
    let stage = "report";
    info!("{stage}: config {}", cfg.hash);
    let mut inputs = Vec::new();
    for &seed in &cfg.config.seeds {
        let path = seed_dir(root, cfg, seed).join(EVAL_CSV);
        if !path.exists() {
            return Err(LabError::MissingArtifact {
                artifact: format!("evaluation report for seed {seed}"),
                path,
                command: format!("evaluate --seed {seed}"),
            });
        }
        inputs.push(path);
    }
    let dir = StageDir::open(config_dir(root, cfg), &cfg.hash, mode)?;
    let digest = dir.digest_inputs(stage, &inputs, "")?;
    let digest = match dir.plan(stage, digest)? {
        Plan::Run { inputs } => inputs,
        Plan::Skip => return Ok(Outcome { stage: stage.into(), skipped: true }),
    };
    let mut groups: BTreeMap<(usize, String, String, usize), Vec<f64>> = BTreeMap::new();
    let order: BTreeMap<String, usize> =
        cfg.config.variants.iter().enumerate().map(|(i, v)| (v.to_string(), i)).collect();
    for p in &inputs {
        for r in read_csv::<EvalRow>(p)? {
            let vi = order.get(&r.variant).copied().unwrap_or(usize::MAX);
            groups.entry((vi, r.split, r.metric, r.k)).or_default().push(r.value);
        }
    }
    let seeds = cfg.config.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
    let rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((vi, split, metric, k), values)| {
            let ms = mean_std(&values);
            SummaryRow {
                config_hash: cfg.hash.clone(),
                seeds: seeds.clone(),
                git_describe: git_describe().to_string(),
                variant: cfg.config.variants.get(vi).map_or_else(|| "?".into(), |v| v.to_string()),
                split,
                metric,
                k,
                mean: ms.mean,
                std: ms.std,
                runs: values.len(),
            }
        })
        .collect();
    dir.commit(stage, &digest, &[(SUMMARY_CSV.into(), to_csv(&rows))])?;
    Ok(Outcome { stage: stage.into(), skipped: false })
}

/// Every stage in order. Stages that the configured variants do not need
/// are left out: quantizer and SIDs without SID variants, the cold-start
/// analysis without the generative reference, the NPG sweep without all
/// three references.
pub fn run_pipeline(s: &Session) -> Result<Vec<Outcome>> {
    let mut out = vec![cmd_preprocess(s)?];
    if !s.variants_with(Variant::uses_sids).is_empty() {
        out.push(cmd_train_rqvae(s)?);
        out.push(cmd_assign_sids(s)?);
    }
    out.extend(cmd_train(s, None)?);
    out.push(cmd_evaluate(s)?);
    let npg = s.cfg.config.inference.npg;
    let has = |v| s.cfg.config.variants.contains(&v);
    if has(npg.generative) {
        out.push(cmd_coldstart(s, None)?);
    }
    if has(npg.generative) && has(npg.dense) && has(npg.hybrid) {
        out.push(cmd_npg(s, None)?);
    }
    Ok(out)
}
