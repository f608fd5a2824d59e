//! Ranking metrics, in-set / cold-start evaluation, and the generation
//! probability analysis for cold-start labels.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::datasets::{Example, ItemId};
use crate::error::{Error, Result};
use crate::genret::BeamOptions;
use crate::infer::Frozen;

/// Items ranked by score descending; equal scores keep ascending item order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateList {
    pub items: Vec<ItemId>,
    pub scores: Vec<f64>,
    /// More items were requested than were available.
    pub truncated: bool,
}

impl CandidateList {
    /// Sorts `(item, score)` pairs and keeps the first `k`.
    pub fn ranked(items: Vec<ItemId>, scores: Vec<f64>, k: usize) -> Self {
        let mut pairs: Vec<(ItemId, f64)> = items.into_iter().zip(scores).collect();
        pairs.sort_by(|a, b| rank_order(a, b));
        let truncated = k > pairs.len();
        pairs.truncate(k);
        let (items, scores) = pairs.into_iter().unzip();
        CandidateList { items, scores, truncated }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// 1-based rank of `item`, if present.
    pub fn rank_of(&self, item: ItemId) -> Option<usize> {
        self.items.iter().position(|&i| i == item).map(|p| p + 1)
    }
}

fn rank_order(a: &(ItemId, f64), b: &(ItemId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// 1 if `label` is among the first `k` items, else 0.
pub fn recall_at_k(list: &[ItemId], label: ItemId, k: usize) -> f64 {
    if list.iter().take(k).any(|&i| i == label) {
        1.0
    } else {
        0.0
    }
}

/// `1/log2(rank+1)` if `label` is ranked within the first `k`, else 0.
pub fn ndcg_at_k(list: &[ItemId], label: ItemId, k: usize) -> f64 {
    match list.iter().take(k).position(|&i| i == label) {
        Some(p) => 1.0 / libm::log2(p as f64 + 2.0),
        None => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub recall: f64,
    pub ndcg: f64,
    pub count: usize,
}

/// Outcome of one test query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub user: usize,
    pub label: ItemId,
    pub cold: bool,
    /// 1-based rank within the returned list, if present.
    pub rank: Option<usize>,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub in_set: Metrics,
    pub cold: Metrics,
    pub overall: Metrics,
    pub records: Vec<QueryRecord>,
}

fn average(records: &[&QueryRecord]) -> Metrics {
    if records.is_empty() {
        return Metrics::default();
    }
    let n = records.len() as f64;
    Metrics {
        recall: records.iter().map(|r| r.recall).sum::<f64>() / n,
        ndcg: records.iter().map(|r| r.ndcg).sum::<f64>() / n,
        count: records.len(),
    }
}

/// Runs `rank` on every example and aggregates Recall@k / NDCG@k over all
/// queries, in-set queries and cold-label queries.
pub fn evaluate(
    examples: &[Example],
    cold: &[bool],
    k: usize,
    mut rank: impl FnMut(&Example) -> Result<CandidateList>,
) -> Result<EvalReport> {
    if k == 0 {
        return Err(Error::Config("metric depth k must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let list = rank(ex)?;
        records.push(QueryRecord {
            user: ex.user,
            label: ex.label,
            cold: cold.get(ex.label.index()).copied().unwrap_or(false),
            rank: list.rank_of(ex.label),
            recall: recall_at_k(&list.items, ex.label, k),
            ndcg: ndcg_at_k(&list.items, ex.label, k),
        });
    }
    let all: Vec<&QueryRecord> = records.iter().collect();
    let ins: Vec<&QueryRecord> = records.iter().filter(|r| !r.cold).collect();
    let cs: Vec<&QueryRecord> = records.iter().filter(|r| r.cold).collect();
    Ok(EvalReport { k, in_set: average(&ins), cold: average(&cs), overall: average(&all), records })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0))
    } else {
        0.0
    };
    MeanStd { mean, std }
}

/// Per-seed reports summarized metric by metric.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SeedSummary {
    pub seeds: usize,
    pub in_set_recall: MeanStd,
    pub in_set_ndcg: MeanStd,
    pub cold_recall: MeanStd,
    pub cold_ndcg: MeanStd,
}

pub fn summarize(reports: &[EvalReport]) -> SeedSummary {
    let pick = |f: fn(&EvalReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    SeedSummary {
        seeds: reports.len(),
        in_set_recall: pick(|r| r.in_set.recall),
        in_set_ndcg: pick(|r| r.in_set.ndcg),
        cold_recall: pick(|r| r.cold.recall),
        cold_ndcg: pick(|r| r.cold.ndcg),
    }
}

/// Generation-probability record of one cold query at one beam size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColdStartRecord {
    pub user: usize,
    pub label: ItemId,
    pub k: usize,
    /// Smallest generation probability among the top-K results.
    pub p_k: f64,
    /// Generation probability of the label.
    pub p_star: f64,
    pub p_diff: f64,
    /// Fewer than K items could be generated.
    pub exhausted: bool,
}

/// Counts over bins delimited by `edges` (`edges.len() == counts.len() + 1`).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` log-spaced bins spanning the positive values given.
    pub fn log_spaced(values: &[f64], bins: usize) -> Self {
        let pos: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0 && v.is_finite()).collect();
        if pos.is_empty() || bins == 0 {
            return Histogram { edges: Vec::new(), counts: Vec::new() };
        }
        let lo = libm::log10(pos.iter().copied().fold(f64::INFINITY, f64::min));
        let hi = libm::log10(pos.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let hi = if hi > lo { hi } else { lo + 1e-12 };
        let edges: Vec<f64> = (0..=bins).map(|b| libm::pow(10.0, lo + (hi - lo) * b as f64 / bins as f64)).collect();
        let mut counts = vec![0; bins];
        for v in pos {
            let t = (libm::log10(v) - lo) / (hi - lo) * bins as f64;
            counts[(t as usize).min(bins - 1)] += 1;
        }
        Histogram { edges, counts }
    }

    /// `bins` equal-width bins spanning the values given.
    pub fn linear(values: &[f64], bins: usize) -> Self {
        let vals: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if vals.is_empty() || bins == 0 {
            return Histogram { edges: Vec::new(), counts: Vec::new() };
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let hi = if hi > lo { hi } else { lo + 1e-12 };
        let edges: Vec<f64> = (0..=bins).map(|b| lo + (hi - lo) * b as f64 / bins as f64).collect();
        let mut counts = vec![0; bins];
        for v in vals {
            let t = (v - lo) / (hi - lo) * bins as f64;
            counts[(t as usize).min(bins - 1)] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartHistograms {
    pub k: usize,
    pub p_k: Histogram,
    pub p_star: Histogram,
    pub p_diff: Histogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartReport {
    pub records: Vec<ColdStartRecord>,
    pub histograms: Vec<ColdStartHistograms>,
}

impl ColdStartReport {
    /// Share of records at beam size `k` with `p_diff > 0` (label not generated).
    pub fn fraction_missed(&self, k: usize) -> f64 {
        let at: Vec<_> = self.records.iter().filter(|r| r.k == k).collect();
        if at.is_empty() {
            return 0.0;
        }
        at.iter().filter(|r| r.p_diff > 0.0).count() as f64 / at.len() as f64
    }
}

/// For each query and each beam size: `p_K` (smallest probability in the
/// exact top-K), `p*` (probability of the label) and `p_K − p*`.
pub fn coldstart_probability_analysis(
    frozen: &Frozen,
    examples: &[Example],
    ks: &[usize],
) -> Result<ColdStartReport> {
    let kmax = ks.iter().copied().max().ok_or_else(|| Error::Config("no beam sizes given".into()))?;
    if ks.contains(&0) {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(examples.len() * ks.len());
    for ex in examples {
        let memory = frozen.encode(&ex.history)?;
        let beam = frozen.beam(&memory, kmax, BeamOptions::default())?;
        let p_star = libm::exp(frozen.item_log_prob_from(&memory, ex.label)?);
        for &k in ks {
            let top = &beam.hyps[..k.min(beam.hyps.len())];
            let min_lp = top.iter().map(|h| h.log_prob).fold(f64::INFINITY, f64::min);
            let p_k = libm::exp(min_lp);
            records.push(ColdStartRecord {
                user: ex.user,
                label: ex.label,
                k,
                p_k,
                p_star,
                p_diff: p_k - p_star,
                exhausted: top.len() < k,
            });
        }
    }
    let histograms = ks
        .iter()
        .map(|&k| {
            let at: Vec<&ColdStartRecord> = records.iter().filter(|r| r.k == k).collect();
            let col = |f: fn(&ColdStartRecord) -> f64| at.iter().map(|r| f(r)).collect::<Vec<_>>();
            ColdStartHistograms {
                k,
                p_k: Histogram::log_spaced(&col(|r| r.p_k), HISTOGRAM_BINS),
                p_star: Histogram::log_spaced(&col(|r| r.p_star), HISTOGRAM_BINS),
                p_diff: Histogram::linear(&col(|r| r.p_diff), HISTOGRAM_BINS),
            }
        })
        .collect();
    Ok(ColdStartReport { records, histograms })
}

/// `(r_K − r_generative) / (r_dense − r_generative)`.
pub fn npg(r_k: f64, r_generative: f64, r_dense: f64) -> Result<f64> {
    let denom = r_dense - r_generative;
    if denom == 0.0 || !denom.is_finite() || !r_k.is_finite() {
        return Err(Error::UndefinedMetric("dense and generative reference metrics coincide"));
    }
    Ok((r_k - r_generative) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn metric_closed_forms() {
        let list = ids(&[4, 7, 9, 1]);
        assert_eq!(ndcg_at_k(&list, ItemId(4), 10), 1.0);
        assert_eq!(ndcg_at_k(&list, ItemId(9), 10), 0.5);
        assert_eq!(recall_at_k(&list, ItemId(1), 3), 0.0);
        let eleven: Vec<ItemId> = (0..11).map(ItemId).collect();
        assert_eq!(recall_at_k(&eleven, ItemId(10), 10), 0.0);
        assert_eq!(recall_at_k(&eleven, ItemId(0), 10), 1.0);
    }

    #[test]
    fn ranked_breaks_ties_by_item() {
        let c = CandidateList::ranked(ids(&[5, 2, 8]), vec![0.5, 0.5, 0.9], 5);
        assert_eq!(c.items, ids(&[8, 2, 5]));
        assert!(c.truncated);
    }

    #[test]
    fn npg_linear_and_degenerate() {
        assert_eq!(npg(0.2, 0.2, 0.6).unwrap(), 0.0);
        assert_eq!(npg(0.6, 0.2, 0.6).unwrap(), 1.0);
        assert!((npg(0.4, 0.2, 0.6).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(npg(0.4, 0.3, 0.3), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (1..=100).map(|i| 1e-6 * i as f64).collect();
        let h = Histogram::log_spaced(&v, 50);
        assert_eq!(h.total(), 100);
        assert_eq!(h.edges.len(), 51);
        let l = Histogram::linear(&[-1.0, 0.0, 1.0], 50);
        assert_eq!(l.total(), 3);
    }

    #[test]
    fn seed_summary() {
        let m = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
    }
}
