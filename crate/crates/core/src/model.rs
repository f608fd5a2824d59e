//! The sequence model shared by every retrieval paradigm: input composition,
//! encoder, optional SID decoder, and the training losses.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::datasets::{Example, ItemCatalog, ItemId};
use crate::error::{Error, Result};
use crate::nn::{Decoder, Embedding, Encoder, Fwd, LayerNorm, Linear, TransformerConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::sid::{SidTable, SidTrie, SidVocab};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Which inputs, heads and losses a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Variant {
    /// SID-token inputs, next-token loss, beam-search inference.
    Tiger,
    /// `Tiger` with projected item text added to every input row.
    TigerT,
    /// One row per item: learnable item embedding + text; cosine loss.
    DenseId,
    /// SID-token + text inputs, cosine loss against projected text.
    DenseSid,
    /// SID-token + text inputs, cosine + next-token loss, hybrid inference.
    Liger,
    /// `Liger` with the next-token gradient kept out of shared parameters.
    LigerDetach,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Tiger, Variant::TigerT, Variant::DenseId, Variant::DenseSid, Variant::Liger, Variant::LigerDetach];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiger => "tiger",
            Variant::TigerT => "tiger_t",
            Variant::DenseId => "dense_id",
            Variant::DenseSid => "dense_sid",
            Variant::Liger => "liger",
            Variant::LigerDetach => "liger_detach",
        }
    }

    pub fn uses_sids(self) -> bool {
        self != Variant::DenseId
    }

    pub fn uses_text_input(self) -> bool {
        self != Variant::Tiger
    }

    pub fn has_decoder(self) -> bool {
        matches!(self, Variant::Tiger | Variant::TigerT | Variant::Liger | Variant::LigerDetach)
    }

    pub fn has_dense_head(self) -> bool {
        matches!(self, Variant::DenseId | Variant::DenseSid | Variant::Liger | Variant::LigerDetach)
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, Variant::Liger | Variant::LigerDetach)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Dropout inside attention/feed-forward blocks.
    pub dropout: f64,
    /// Dropout after the input LayerNorm.
    pub input_dropout: f64,
    /// Longest history (in items) the encoder accepts.
    pub max_items: usize,
    pub temperature: f64,
    /// Weight of the next-token term in the hybrid loss.
    pub ntp_weight: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size architecture; input dropout 0.5 for models with a dense
    /// head, the block dropout otherwise.
    pub fn standard(variant: Variant) -> Self {
        ModelConfig {
            variant,
            layers: 6,
            d_model: 128,
            heads: 6,
            ffn_hidden: 1024,
            dropout: 0.2,
            input_dropout: if variant.has_dense_head() { 0.5 } else { 0.2 },
            max_items: 20,
            temperature: 0.07,
            ntp_weight: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::Config("input dropout outside [0,1)".into()));
        }
        if self.max_items == 0 {
            return Err(Error::Config("max_items must be positive".into()));
        }
        Ok(())
    }

    fn transformer(&self, max_len: usize) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            dropout: self.dropout,
            max_len,
            final_norm: true,
        }
    }
}

/// Everything about the item universe a model reads at run time: text
/// embeddings (rows scaled to unit norm), semantic IDs (for SID variants)
/// and the cold set.
#[derive(Debug, Clone)]
pub struct ItemSpace {
    pub text: Arc<Tensor>,
    pub sids: Option<SidTable>,
    pub trie: Option<SidTrie>,
    pub cold: Vec<ItemId>,
}

impl ItemSpace {
    pub fn new(catalog: &ItemCatalog, sids: Option<SidTable>) -> Result<Self> {
        if let Some(t) = &sids {
            if t.len() != catalog.len() {
                return Err(Error::Config(format!("SID table covers {} items, catalog has {}", t.len(), catalog.len())));
            }
        }
        let trie = sids.as_ref().map(SidTable::trie);
        Ok(ItemSpace { text: Arc::new(unit_rows(catalog.text())), sids, trie, cold: catalog.cold_items() })
    }

    pub fn n_items(&self) -> usize {
        self.text.rows()
    }

    pub fn sids(&self) -> Result<&SidTable> {
        self.sids.as_ref().ok_or_else(|| Error::Lookup("no semantic IDs assigned".into()))
    }

    pub fn trie(&self) -> Result<&SidTrie> {
        self.trie.as_ref().ok_or_else(|| Error::Lookup("no semantic IDs assigned".into()))
    }
}

/// Rows scaled to unit L2 norm (zero rows stay zero).
fn unit_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        let norm = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
    out
}

/// Parameter handles of a [`SeqRecModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParts {
    pub text_proj: Option<Linear>,
    pub token_emb: Option<Embedding>,
    pub item_emb: Option<Embedding>,
    pub item_pos: Embedding,
    pub sid_pos: Option<Embedding>,
    pub input_ln: LayerNorm,
    pub encoder: Encoder,
    pub decoder: Option<Decoder>,
    pub lm_head: Option<Linear>,
}

#[derive(Debug, Clone)]
pub struct SeqRecModel {
    pub cfg: ModelConfig,
    pub vocab: Option<SidVocab>,
    pub n_items: usize,
    pub text_dim: usize,
    pub store: ParamStore,
    pub parts: ModelParts,
}

/// Per-batch forward results that the losses consume.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// Final-position encoder rows, one per example (B×d).
    pub query: Var,
    /// Cosine-loss targets for every catalog item (N×d), when the model has a dense head.
    pub targets: Option<Var>,
    /// Decoder logits for every SID position of every label ((m+1)·B × V).
    pub ntp_logits: Option<Var>,
    pub ntp_targets: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Values of the loss terms for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub dense: Option<f64>,
    pub ntp: Option<f64>,
}

impl SeqRecModel {
    pub fn new(cfg: ModelConfig, space: &ItemSpace) -> Result<Self> {
        cfg.validate()?;
        let variant = cfg.variant;
        let vocab = if variant.uses_sids() { Some(space.sids()?.vocab) } else { None };
        let tokens_per_item = vocab.map_or(1, |v| v.tokens_per_item());
        let mut rng = Rng::seed_from_u64(cfg.seed).fork(0x6d6f64656c);
        let mut store = ParamStore::new();
        let (d, n, text_dim) = (cfg.d_model, space.n_items(), space.text.cols());

        let text_proj = variant.uses_text_input().then(|| Linear::new(&mut store, "text_proj", text_dim, d, true, &mut rng));
        let token_emb = vocab.map(|v| Embedding::new(&mut store, "token_emb", v.size(), d, &mut rng));
        let item_emb = (!variant.uses_sids()).then(|| Embedding::new(&mut store, "item_emb", n, d, &mut rng));
        let item_pos = Embedding::new(&mut store, "item_pos", cfg.max_items, d, &mut rng);
        let sid_pos = vocab.map(|v| Embedding::new(&mut store, "sid_pos", v.tokens_per_item(), d, &mut rng));
        let input_ln = LayerNorm::new(&mut store, "input_ln", d);
        let encoder = Encoder::new(&mut store, "enc", cfg.transformer(cfg.max_items * tokens_per_item), &mut rng)?;
        let (decoder, lm_head) = if variant.has_decoder() {
            let v = vocab.expect("decoder variants use SIDs");
            let dec = Decoder::new(&mut store, "dec", cfg.transformer(v.tokens_per_item()), &mut rng)?;
            let head = Linear::new(&mut store, "lm_head", d, v.size(), true, &mut rng);
            (Some(dec), Some(head))
        } else {
            (None, None)
        };
        let parts = ModelParts { text_proj, token_emb, item_emb, item_pos, sid_pos, input_ln, encoder, decoder, lm_head };
        Ok(SeqRecModel { cfg, vocab, n_items: n, text_dim, store, parts })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    /// Rows of learnable per-item or per-token embedding tables (position
    /// tables excluded).
    pub fn learnable_embedding_rows(&self) -> usize {
        self.parts.token_emb.map_or(0, |e| e.rows) + self.parts.item_emb.map_or(0, |e| e.rows)
    }

    pub fn tokens_per_item(&self) -> usize {
        self.vocab.map_or(1, |v| v.tokens_per_item())
    }

    fn check_space(&self, space: &ItemSpace) -> Result<()> {
        if space.n_items() != self.n_items || space.text.cols() != self.text_dim {
            return Err(Error::Config(format!(
                "model built for {} items × {} dims, item space has {} × {}",
                self.n_items,
                self.text_dim,
                space.n_items(),
                space.text.cols()
            )));
        }
        if let (Some(v), Some(t)) = (self.vocab, &space.sids) {
            if v != t.vocab {
                return Err(Error::Config("SID vocabulary differs from the one the model was built with".into()));
            }
        }
        Ok(())
    }

    /// Projected text of every catalog item (N×d), if the variant uses text.
    pub fn project_all_text(&self, f: &mut Fwd, space: &ItemSpace) -> Result<Option<Var>> {
        match &self.parts.text_proj {
            Some(p) => {
                let t = f.tape.constant_shared(Arc::clone(&space.text));
                Ok(Some(p.forward(f, t)?))
            }
            None => Ok(None),
        }
    }

    /// Encoder input rows before normalization: for SID variants
    /// `e_token + item_pos + sid_pos (+ text)` per SID token, for the ID
    /// variant `e_item + text + item_pos` per item.
    pub fn build_inputs(&self, f: &mut Fwd, space: &ItemSpace, text: Option<Var>, history: &[ItemId]) -> Result<Var> {
        if history.is_empty() {
            return Err(Error::Contract("empty history".into()));
        }
        if history.len() > self.cfg.max_items {
            return Err(Error::Length { len: history.len(), max: self.cfg.max_items });
        }
        if let Some(bad) = history.iter().find(|i| i.index() >= self.n_items) {
            return Err(Error::Lookup(format!("unknown item index {}", bad.0)));
        }
        let per = self.tokens_per_item();
        let mut owner = Vec::with_capacity(history.len() * per);
        let mut item_pos = Vec::with_capacity(history.len() * per);
        for (p, &it) in history.iter().enumerate() {
            for _ in 0..per {
                owner.push(it.index());
                item_pos.push(p);
            }
        }
        let base = match (&self.parts.token_emb, &self.parts.item_emb) {
            (Some(tok), _) => {
                let sids = space.sids()?;
                let mut tokens = Vec::with_capacity(owner.len());
                for &it in history {
                    tokens.extend(sids.tokens(it)?);
                }
                let e = tok.lookup(f, &tokens)?;
                let sid_pos: Vec<usize> = (0..history.len()).flat_map(|_| 0..per).collect();
                let sp = self.parts.sid_pos.expect("SID variants have SID positions").lookup(f, &sid_pos)?;
                f.tape.add(e, sp)?
            }
            (None, Some(items)) => items.lookup(f, &owner)?,
            (None, None) => unreachable!("every variant has a token or item table"),
        };
        let ip = self.parts.item_pos.lookup(f, &item_pos)?;
        let mut x = f.tape.add(base, ip)?;
        if self.cfg.variant.uses_text_input() {
            let text = text.ok_or_else(|| Error::Contract("text projection required for this variant".into()))?;
            let t = f.tape.gather(text, &owner)?;
            x = f.tape.add(x, t)?;
        }
        Ok(x)
    }

    /// Encoder output for one history (rows = composed input rows).
    pub fn encode(&self, f: &mut Fwd, space: &ItemSpace, text: Option<Var>, history: &[ItemId]) -> Result<Var> {
        let x = self.build_inputs(f, space, text, history)?;
        let x = self.parts.input_ln.forward(f, x)?;
        let x = f.dropout(x, self.cfg.input_dropout)?;
        self.parts.encoder.forward(f, x)
    }

    /// Decoder input for (a prefix of) a SID: row 0 is the first SID
    /// position embedding alone; row `j ≥ 1` is `e_token[j-1] + sid_pos[j]`.
    pub fn decoder_inputs(&self, f: &mut Fwd, prefix: &[usize], detached: bool) -> Result<Var> {
        let tok = self.parts.token_emb.expect("decoder variants have token tables");
        let sp = self.parts.sid_pos.expect("decoder variants have SID positions");
        let rows: Vec<usize> = (0..=prefix.len()).collect();
        let pos = if detached { sp.lookup_detached(f, &rows)? } else { sp.lookup(f, &rows)? };
        if prefix.is_empty() {
            return Ok(pos);
        }
        let table = if detached { f.p_detached(tok.table) } else { f.p(tok.table) };
        let zero = f.tape.constant(Tensor::zeros(&[1, self.cfg.d_model]));
        let toks = f.tape.gather(table, prefix)?;
        let shifted = f.tape.concat_rows(&[zero, toks])?;
        f.tape.add(shifted, pos)
    }

    /// Next-token logits for every position of `prefix` plus one: row `j`
    /// scores the token at SID position `j`.
    pub fn decoder_logits(&self, f: &mut Fwd, memory: Var, prefix: &[usize]) -> Result<Var> {
        let detach = self.cfg.variant == Variant::LigerDetach;
        let x = self.decoder_inputs(f, prefix, detach)?;
        let mem = if detach { f.tape.detach(memory) } else { memory };
        let dec = self.parts.decoder.as_ref().ok_or_else(|| Error::Contract("variant has no decoder".into()))?;
        let h = dec.forward(f, x, Some(mem))?;
        self.parts.lm_head.expect("decoder variants have an LM head").forward(f, h)
    }

    /// Cosine-loss targets for every item: `e_item + text` for the ID
    /// variant, projected text otherwise.
    pub fn targets(&self, f: &mut Fwd, text: Option<Var>) -> Result<Var> {
        let text = text.ok_or_else(|| Error::Contract("dense targets need projected text".into()))?;
        match &self.parts.item_emb {
            Some(e) => {
                let t = f.p(e.table);
                f.tape.add(t, text)
            }
            None => Ok(text),
        }
    }

    pub fn forward_batch(&self, f: &mut Fwd, space: &ItemSpace, batch: &[Example]) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        self.check_space(space)?;
        let text = self.project_all_text(f, space)?;
        let mut query_rows = Vec::with_capacity(batch.len());
        let mut logits = Vec::new();
        let mut ntp_targets = Vec::new();
        for ex in batch {
            if ex.label.index() >= self.n_items {
                return Err(Error::Lookup(format!("unknown label index {}", ex.label.0)));
            }
            let enc = self.encode(f, space, text, &ex.history)?;
            let last = f.tape.value(enc).rows() - 1;
            query_rows.push(f.tape.gather(enc, &[last])?);
            if self.cfg.variant.has_decoder() {
                let tokens = space.sids()?.tokens(ex.label)?;
                let prefix = &tokens[..tokens.len() - 1];
                logits.push(self.decoder_logits(f, enc, prefix)?);
                ntp_targets.extend_from_slice(&tokens);
            }
        }
        let query = f.tape.concat_rows(&query_rows)?;
        let targets = if self.cfg.variant.has_dense_head() { Some(self.targets(f, text)?) } else { None };
        let ntp_logits = if logits.is_empty() { None } else { Some(f.tape.concat_rows(&logits)?) };
        Ok(BatchForward { query, targets, ntp_logits, ntp_targets, labels: batch.iter().map(|e| e.label.index()).collect() })
    }

    /// Mean over the batch of `−log softmax_i(cos(Ê, target_i)/τ)[label]`
    /// over the full catalog.
    pub fn dense_loss(&self, f: &mut Fwd, out: &BatchForward) -> Result<Var> {
        let targets = out.targets.ok_or_else(|| Error::Contract("variant has no dense head".into()))?;
        cosine_softmax_loss(f, out.query, targets, &out.labels, self.cfg.temperature)
    }

    /// Mean cross-entropy over every SID position of every label, teacher forced.
    pub fn next_token_loss(&self, f: &mut Fwd, out: &BatchForward) -> Result<Var> {
        let logits = out.ntp_logits.ok_or_else(|| Error::Contract("variant has no decoder".into()))?;
        f.tape.softmax_cross_entropy(logits, &out.ntp_targets)
    }

    /// The variant's training objective.
    pub fn loss(&self, f: &mut Fwd, space: &ItemSpace, batch: &[Example]) -> Result<(Var, LossParts)> {
        let out = self.forward_batch(f, space, batch)?;
        self.combine_losses(f, &out)
    }

    /// Builds the variant's loss terms on top of an existing batch forward.
    pub fn combine_losses(&self, f: &mut Fwd, out: &BatchForward) -> Result<(Var, LossParts)> {
        let dense = if self.cfg.variant.has_dense_head() { Some(self.dense_loss(f, out)?) } else { None };
        let ntp = if self.cfg.variant.has_decoder() { Some(self.next_token_loss(f, out)?) } else { None };
        let total = match (dense, ntp) {
            (Some(d), Some(n)) => {
                let w = f.tape.scale(n, self.cfg.ntp_weight);
                f.tape.add(d, w)?
            }
            (Some(d), None) => d,
            (None, Some(n)) => n,
            (None, None) => unreachable!("every variant has a head"),
        };
        let parts = LossParts {
            total: f.tape.value(total).item(),
            dense: dense.map(|v| f.tape.value(v).item()),
            ntp: ntp.map(|v| f.tape.value(v).item()),
        };
        Ok((total, parts))
    }

    /// Parameter names whose gradient a next-token term may reach.
    pub fn decoder_param_prefixes() -> [&'static str; 2] {
        ["dec.", "lm_head."]
    }

    pub fn describe(&self) -> String {
        format!(
            "{} d={} layers={} heads={} params={}",
            self.cfg.variant,
            self.cfg.d_model,
            self.cfg.layers,
            self.cfg.heads,
            self.store.num_scalars()
        )
    }
}

/// `−log softmax(cos(q_b, t_i)/τ)[label_b]`, averaged over rows of `query`.
pub fn cosine_softmax_loss(f: &mut Fwd, query: Var, targets: Var, labels: &[usize], temperature: f64) -> Result<Var> {
    let qn = f.tape.normalize_rows(query)?;
    let tn = f.tape.normalize_rows(targets)?;
    let sims = f.tape.matmul_nt(qn, tn)?;
    let logits = f.tape.scale(sims, 1.0 / temperature);
    f.tape.softmax_cross_entropy(logits, labels)
}
