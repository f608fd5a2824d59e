//! Hybrid inference: generated candidates plus cold items, re-ranked by the
//! dense head; per-variant inference dispatch; NPG sweeps.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::datasets::{Example, ItemId};
use crate::error::{Error, Result};
use crate::eval::{npg, recall_at_k, CandidateList};
use crate::genret::{BeamOptions, BeamResult};
use crate::infer::Frozen;
use crate::model::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct InferenceConfig {
    /// Number of generated candidates.
    pub k: usize,
    /// Add every cold item to the candidate set.
    pub include_cold: bool,
    /// Length of the returned ranking.
    pub final_k: usize,
    pub beam: BeamOptions,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { k: 20, include_cold: true, final_k: 10, beam: BeamOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridOutput {
    pub ranking: CandidateList,
    /// Generated candidates ∪ cold items, ascending.
    pub candidates: Vec<ItemId>,
    pub generated: Vec<ItemId>,
}

/// Items of the top-`k` generated SIDs. When `k` covers every SID in the
/// trie the result is the whole trie, which is what the search would return.
fn generate(frozen: &Frozen, memory: &crate::tensor::Tensor, k: usize, opts: BeamOptions) -> Result<Vec<ItemId>> {
    let trie = frozen.space.trie()?;
    if k >= trie.num_leaves() && opts.constrained {
        return Ok(trie.leaves().into_iter().map(|(_, it)| it).collect());
    }
    Ok(frozen.beam(memory, k, opts)?.items())
}

fn rank_candidates(frozen: &Frozen, query: &[f64], candidates: Vec<ItemId>, final_k: usize) -> Result<CandidateList> {
    let scores = frozen.index()?.scores_for(query, &candidates)?;
    Ok(CandidateList::ranked(candidates, scores, final_k))
}

fn combine(generated: &[ItemId], cold: &[ItemId], include_cold: bool) -> Vec<ItemId> {
    let mut set: BTreeSet<ItemId> = generated.iter().copied().collect();
    if include_cold {
        set.extend(cold.iter().copied());
    }
    set.into_iter().collect()
}

/// Generate `k` candidates, add the cold set, rank the union by cosine
/// similarity of the dense head and keep `final_k`.
pub fn liger_infer(frozen: &Frozen, history: &[ItemId], cfg: &InferenceConfig) -> Result<HybridOutput> {
    if !frozen.model.variant().has_decoder() || !frozen.model.variant().has_dense_head() {
        return Err(Error::Contract("hybrid inference needs both a decoder and a dense head".into()));
    }
    if cfg.k == 0 {
        return Err(Error::Config("candidate count K must be at least 1".into()));
    }
    let memory = frozen.encode(history)?;
    let query = memory.row(memory.rows() - 1).to_vec();
    let generated = generate(frozen, &memory, cfg.k, cfg.beam)?;
    let candidates = combine(&generated, &frozen.space.cold, cfg.include_cold);
    let ranking = rank_candidates(frozen, &query, candidates.clone(), cfg.final_k)?;
    Ok(HybridOutput { ranking, candidates, generated })
}

fn beam_list(beam: &BeamResult, final_k: usize) -> CandidateList {
    let (items, scores): (Vec<ItemId>, Vec<f64>) =
        beam.hyps.iter().filter_map(|h| h.item.map(|i| (i, h.log_prob))).take(final_k).unzip();
    CandidateList { truncated: beam.exhausted || items.len() < final_k, items, scores }
}

/// The variant's own inference path: beam search for generative models,
/// full-catalog cosine ranking for dense models, hybrid for the rest.
pub fn recommend(frozen: &Frozen, history: &[ItemId], cfg: &InferenceConfig) -> Result<CandidateList> {
    match frozen.model.variant() {
        Variant::Tiger | Variant::TigerT => {
            let beam = frozen.beam_search(history, cfg.k, cfg.beam)?;
            Ok(beam_list(&beam, cfg.final_k))
        }
        Variant::DenseId | Variant::DenseSid => frozen.dense_top_k(history, cfg.final_k),
        Variant::Liger | Variant::LigerDetach => Ok(liger_infer(frozen, history, cfg)?.ranking),
    }
}

/// Ranking used for model selection: the dense head over the full catalog
/// for models that have one, otherwise beam search.
pub fn validation_ranking(frozen: &Frozen, history: &[ItemId], cfg: &InferenceConfig) -> Result<CandidateList> {
    if frozen.model.variant().has_dense_head() {
        frozen.dense_top_k(history, cfg.final_k)
    } else {
        recommend(frozen, history, cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NpgPoint {
    pub k: usize,
    /// In-set Recall@final_k of hybrid inference with `k` candidates.
    pub recall: f64,
    pub npg: f64,
    /// Share of in-set queries whose label is in the candidate set.
    pub coverage: f64,
}

/// Per-query candidate sets of one NPG sweep, kept for auditing.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepQuery {
    pub user: usize,
    pub label: ItemId,
    /// Candidate set for each K, in sweep order.
    pub candidates: Vec<Vec<ItemId>>,
    pub rankings: Vec<Vec<ItemId>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpgSweep {
    pub points: Vec<NpgPoint>,
    pub queries: Vec<SweepQuery>,
}

/// Hybrid inference at every K over the in-set queries, mapped through NPG
/// against the given generative and dense reference recalls. Candidates
/// for all K come from one exact search per query (top-K sets are prefixes).
pub fn npg_sweep(
    frozen: &Frozen,
    examples: &[Example],
    cold: &[bool],
    ks: &[usize],
    base: &InferenceConfig,
    r_generative: f64,
    r_dense: f64,
) -> Result<NpgSweep> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("NPG sweep needs beam sizes ≥ 1".into()));
    }
    let in_set: Vec<&Example> = examples.iter().filter(|e| !cold.get(e.label.index()).copied().unwrap_or(false)).collect();
    let n_leaves = frozen.space.trie()?.num_leaves();
    let search_k = ks.iter().copied().filter(|&k| k < n_leaves).max();
    let mut hits = alloc::vec![0.0; ks.len()];
    let mut covered = alloc::vec![0.0; ks.len()];
    let mut queries = Vec::with_capacity(in_set.len());
    for ex in &in_set {
        let memory = frozen.encode(&ex.history)?;
        let query = memory.row(memory.rows() - 1).to_vec();
        let beam = match search_k {
            Some(k) => Some(frozen.beam(&memory, k, BeamOptions { mode: crate::genret::DecodeMode::Exact, ..base.beam })?),
            None => None,
        };
        let mut rec = SweepQuery { user: ex.user, label: ex.label, candidates: Vec::new(), rankings: Vec::new() };
        for (i, &k) in ks.iter().enumerate() {
            let generated = if k >= n_leaves {
                generate(frozen, &memory, k, base.beam)?
            } else {
                let b = beam.as_ref().expect("search ran for K below the leaf count");
                b.hyps.iter().take(k).filter_map(|h| h.item).collect()
            };
            let candidates = combine(&generated, &frozen.space.cold, base.include_cold);
            if candidates.binary_search(&ex.label).is_ok() {
                covered[i] += 1.0;
            }
            let ranking = rank_candidates(frozen, &query, candidates.clone(), base.final_k)?;
            hits[i] += recall_at_k(&ranking.items, ex.label, base.final_k);
            rec.candidates.push(candidates);
            rec.rankings.push(ranking.items);
        }
        queries.push(rec);
    }
    let n = in_set.len().max(1) as f64;
    let points = ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let recall = hits[i] / n;
            Ok(NpgPoint { k, recall, npg: npg(recall, r_generative, r_dense)?, coverage: covered[i] / n })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NpgSweep { points, queries })
}
