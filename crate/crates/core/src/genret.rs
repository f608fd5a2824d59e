//! Semantic-ID generation: teacher-forced item probabilities and top-K
//! decoding over the SID trie.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::datasets::ItemId;
use crate::error::{Error, Result};
use crate::model::SeqRecModel;
use crate::nn::Fwd;
use crate::sid::SidTrie;
use crate::tensor::{log_softmax, Tensor};

/// How top-K SID sequences are searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum DecodeMode {
    /// Best-first search. Token log-probabilities are never positive, so
    /// complete sequences leave the frontier in exact score order: the
    /// result is the true top-K and results for smaller K are prefixes.
    #[default]
    Exact,
    /// Breadth-limited beam keeping K hypotheses per position.
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BeamOptions {
    pub mode: DecodeMode,
    /// Restrict expansions to prefixes of assigned SIDs.
    pub constrained: bool,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions { mode: DecodeMode::Exact, constrained: true }
    }
}

/// A complete generated SID with its total log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `None` only in unconstrained mode when the SID names no item.
    pub item: Option<ItemId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    /// Sorted by log-probability descending, ties by tokens ascending.
    pub hyps: Vec<Hypothesis>,
    /// Fewer than K complete sequences existed.
    pub exhausted: bool,
}

impl BeamResult {
    pub fn items(&self) -> Vec<ItemId> {
        self.hyps.iter().filter_map(|h| h.item).collect()
    }

    /// Smallest log-probability among the returned hypotheses.
    pub fn min_log_prob(&self) -> Option<f64> {
        self.hyps.iter().map(|h| h.log_prob).reduce(f64::min)
    }
}

/// Full-vocabulary log-softmax of every decoder row given `prefix`
/// (rows = `prefix.len() + 1`).
pub fn decoder_log_probs(model: &SeqRecModel, memory: &Tensor, prefix: &[usize]) -> Result<Tensor> {
    let mut f = Fwd::eval(&model.store);
    let mem = f.tape.constant(memory.clone());
    let logits = model.decoder_logits(&mut f, mem, prefix)?;
    let lv = f.tape.value(logits);
    let mut data = Vec::with_capacity(lv.len());
    for r in 0..lv.rows() {
        data.extend(log_softmax(lv.row(r)));
    }
    Tensor::matrix(lv.rows(), lv.cols(), data)
}

/// Log-probabilities of the token following `prefix`.
pub fn step_log_probs(model: &SeqRecModel, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
    let lp = decoder_log_probs(model, memory, prefix)?;
    Ok(lp.row(lp.rows() - 1).to_vec())
}

/// `Σ_j log p(token_j | history, token_<j)` for a full SID, teacher forced.
pub fn sequence_log_prob(model: &SeqRecModel, memory: &Tensor, tokens: &[usize]) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let lp = decoder_log_probs(model, memory, &tokens[..tokens.len() - 1])?;
    Ok(tokens.iter().enumerate().map(|(j, &t)| lp.row(j)[t]).sum())
}

#[derive(Debug, Clone)]
struct Frontier {
    score: f64,
    tokens: Vec<usize>,
    node: Option<usize>,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    /// Max-heap order: higher score first, then lexicographically smaller tokens.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.tokens.cmp(&self.tokens))
    }
}

struct Expander<'a> {
    model: &'a SeqRecModel,
    memory: &'a Tensor,
    trie: &'a SidTrie,
    constrained: bool,
}

impl Expander<'_> {
    fn depth(&self) -> usize {
        self.trie.depth()
    }

    /// `(token, next trie node)` pairs allowed after `node` at `position`.
    fn children(&self, node: Option<usize>, position: usize) -> Vec<(usize, Option<usize>)> {
        if self.constrained {
            return match node {
                Some(n) => self.trie.children(n).map(|(t, c)| (t, Some(c))).collect(),
                None => Vec::new(),
            };
        }
        let v = self.model.vocab.expect("decoder variants have a vocabulary");
        let width = if position < v.levels { v.codebook_size } else { v.dedup_range };
        (0..width)
            .map(|val| {
                let t = v.token(position, val);
                (t, node.and_then(|n| self.trie.child(n, t)))
            })
            .collect()
    }

    fn expand(&self, parent: &Frontier) -> Result<Vec<Frontier>> {
        let kids = self.children(parent.node, parent.tokens.len());
        if kids.is_empty() {
            return Ok(Vec::new());
        }
        let lp = step_log_probs(self.model, self.memory, &parent.tokens)?;
        Ok(kids
            .into_iter()
            .map(|(t, node)| {
                let mut tokens = parent.tokens.clone();
                tokens.push(t);
                Frontier { score: parent.score + lp[t], tokens, node }
            })
            .collect())
    }

    fn finish(&self, fr: Frontier) -> Hypothesis {
        let item = fr.node.and_then(|n| self.trie.item(n));
        Hypothesis { tokens: fr.tokens, log_prob: fr.score, item }
    }
}

/// Top-`k` SIDs for an encoded history.
pub fn search(model: &SeqRecModel, trie: &SidTrie, memory: &Tensor, k: usize, opts: BeamOptions) -> Result<BeamResult> {
    if k == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if !model.variant().has_decoder() {
        return Err(Error::Contract("variant has no decoder".into()));
    }
    let ex = Expander { model, memory, trie, constrained: opts.constrained };
    let root = Frontier { score: 0.0, tokens: Vec::new(), node: Some(SidTrie::ROOT) };
    let hyps = match opts.mode {
        DecodeMode::Exact => {
            let mut heap = BinaryHeap::new();
            heap.push(root);
            let mut out = Vec::with_capacity(k);
            while let Some(top) = heap.pop() {
                if top.tokens.len() == ex.depth() {
                    out.push(ex.finish(top));
                    if out.len() == k {
                        break;
                    }
                } else {
                    heap.extend(ex.expand(&top)?);
                }
            }
            out
        }
        DecodeMode::Beam => {
            let mut beam = alloc::vec![root];
            for _ in 0..ex.depth() {
                let mut next = Vec::new();
                for h in &beam {
                    next.extend(ex.expand(h)?);
                }
                next.sort_by(|a, b| b.cmp(a));
                next.truncate(k);
                beam = next;
            }
            beam.into_iter().map(|f| ex.finish(f)).collect()
        }
    };
    let exhausted = hyps.len() < k;
    Ok(BeamResult { hyps, exhausted })
}
