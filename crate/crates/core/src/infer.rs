//! Evaluation-mode view of a trained model with per-catalog quantities
//! (projected text, normalized dense targets) computed once.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::datasets::ItemId;
use crate::error::{Error, Result};
use crate::eval::CandidateList;
use crate::genret::{self, BeamOptions, BeamResult};
use crate::model::{ItemSpace, SeqRecModel};
use crate::nn::Fwd;
use crate::tensor::{dot, Tensor};

/// Unit-normalized dense targets for every catalog item.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetIndex {
    normalized: Tensor,
}

impl TargetIndex {
    pub fn from_targets(targets: &Tensor) -> Result<Self> {
        let mut normalized = targets.clone();
        let d = targets.cols();
        for row in normalized.data_mut().chunks_mut(d) {
            let n = libm::sqrt(dot(row, row));
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate("zero-norm dense target"));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(TargetIndex { normalized })
    }

    pub fn len(&self) -> usize {
        self.normalized.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cosine similarity of `query` with every target.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        let n = libm::sqrt(dot(query, query));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("zero-norm query embedding"));
        }
        Ok((0..self.len()).map(|i| dot(self.normalized.row(i), query) / n).collect())
    }

    /// Cosine similarity of `query` with the listed items only.
    pub fn scores_for(&self, query: &[f64], items: &[ItemId]) -> Result<Vec<f64>> {
        let n = libm::sqrt(dot(query, query));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate("zero-norm query embedding"));
        }
        Ok(items.iter().map(|i| dot(self.normalized.row(i.index()), query) / n).collect())
    }

    /// Exact top-`k` by cosine similarity, ties by item index.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<CandidateList> {
        let scores = self.scores(query)?;
        let items: Vec<ItemId> = (0..self.len()).map(ItemId::from).collect();
        Ok(CandidateList::ranked(items, scores, k))
    }
}

/// A model frozen for inference over a fixed item space.
pub struct Frozen<'a> {
    pub model: &'a SeqRecModel,
    pub space: &'a ItemSpace,
    text: Option<Arc<Tensor>>,
    index: Option<TargetIndex>,
}

impl<'a> Frozen<'a> {
    pub fn new(model: &'a SeqRecModel, space: &'a ItemSpace) -> Result<Self> {
        let mut f = Fwd::eval(&model.store);
        let text = model.project_all_text(&mut f, space)?;
        let index = if model.variant().has_dense_head() {
            let t = model.targets(&mut f, text)?;
            Some(TargetIndex::from_targets(f.tape.value(t))?)
        } else {
            None
        };
        let text = text.map(|t| f.tape.shared_value(t));
        Ok(Frozen { model, space, text, index })
    }

    pub fn index(&self) -> Result<&TargetIndex> {
        self.index.as_ref().ok_or_else(|| Error::Contract("variant has no dense head".into()))
    }

    /// Encoder output rows for a history.
    pub fn encode(&self, history: &[ItemId]) -> Result<Tensor> {
        let mut f = Fwd::eval(&self.model.store);
        let text = self.text.as_ref().map(|t| f.tape.constant_shared(Arc::clone(t)));
        let enc = self.model.encode(&mut f, self.space, text, history)?;
        Ok(f.tape.value(enc).clone())
    }

    /// Final-position encoder row.
    pub fn query(&self, history: &[ItemId]) -> Result<Vec<f64>> {
        let enc = self.encode(history)?;
        Ok(enc.row(enc.rows() - 1).to_vec())
    }

    pub fn dense_top_k(&self, history: &[ItemId], k: usize) -> Result<CandidateList> {
        let q = self.query(history)?;
        self.index()?.top_k(&q, k)
    }

    pub fn beam(&self, memory: &Tensor, k: usize, opts: BeamOptions) -> Result<BeamResult> {
        genret::search(self.model, self.space.trie()?, memory, k, opts)
    }

    pub fn beam_search(&self, history: &[ItemId], k: usize, opts: BeamOptions) -> Result<BeamResult> {
        let memory = self.encode(history)?;
        self.beam(&memory, k, opts)
    }

    pub fn item_log_prob_from(&self, memory: &Tensor, item: ItemId) -> Result<f64> {
        let tokens = self.space.sids()?.tokens(item)?;
        genret::sequence_log_prob(self.model, memory, &tokens)
    }

    pub fn item_log_prob(&self, history: &[ItemId], item: ItemId) -> Result<f64> {
        let memory = self.encode(history)?;
        self.item_log_prob_from(&memory, item)
    }
}
