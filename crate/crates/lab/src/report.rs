//! Report rows. Every CSV row and JSON line carries the config hash, the
//! seed and the source revision that produced it.

use std::path::Path;
use std::sync::OnceLock;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::io::read_bytes;

pub const GIT_ENV: &str = "SEQREC_GIT_DESCRIBE";

/// `$SEQREC_GIT_DESCRIBE`, else `git describe --always --dirty` of the
/// source tree, else "unknown".
pub fn git_describe() -> &'static str {
    static CELL: OnceLock<String> = OnceLock::new();
    CELL.get_or_init(|| {
        if let Ok(v) = std::env::var(GIT_ENV) {
            return v;
        }
        std::process::Command::new("git")
            .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .and_then(|o| String::from_utf8(o.stdout).ok())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| "unknown".into())
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
}

/// One metric of one model on one query split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub variant: String,
    /// `in_set`, `cold` or `all`.
    pub split: String,
    /// `recall` or `ndcg`.
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalQueryLine {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub variant: String,
    pub user: String,
    pub label: String,
    pub cold: bool,
    pub rank: Option<usize>,
    pub recall: f64,
    pub ndcg: f64,
}

/// Cold-start generation-probability statistics at one beam size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartRow {
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub variant: String,
    pub k: usize,
    pub queries: usize,
    /// Share of queries with `p_K > p*` (label not generated).
    pub missed_fraction: f64,
    pub exhausted: usize,
    pub median_p_k: f64,
    pub median_p_star: f64,
    pub median_p_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartLine {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub variant: String,
    pub user: String,
    pub label: String,
    pub k: usize,
    pub p_k: f64,
    pub p_star: f64,
    pub p_diff: f64,
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpgRow {
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub variant: String,
    pub k: usize,
    /// In-set Recall@final_k of hybrid inference at this K.
    pub recall: f64,
    pub npg: f64,
    /// Share of in-set queries whose label is among the candidates.
    pub coverage: f64,
    pub r_generative: f64,
    pub r_dense: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpgQueryLine {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub variant: String,
    pub user: String,
    pub label: String,
    pub k: usize,
    pub candidates: usize,
    pub covered: bool,
    pub rank: Option<usize>,
}

/// Mean and sample standard deviation of an [`EvalRow`] over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config_hash: String,
    /// Seeds joined with `;`.
    pub seeds: String,
    pub git_describe: String,
    pub variant: String,
    pub split: String,
    pub metric: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("serializable row");
    }
    w.into_inner().expect("in-memory writer")
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_bytes(path)?;
    csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| LabError::format(path, e.to_string()))
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
