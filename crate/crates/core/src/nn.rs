//! Transformer building blocks on top of the tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// Std of the normal initializer used for every weight matrix and table.
pub const INIT_STD: f64 = 0.02;

/// One forward pass: the tape, the parameters it reads, and (in training
/// mode) the dropout RNG.
pub struct Fwd<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    rng: Option<Rng>,
}

impl<'a> Fwd<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Fwd { tape: Tape::new(), store, rng: None }
    }

    pub fn train(store: &'a ParamStore, rng: Rng) -> Self {
        Fwd { tape: Tape::new(), store, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn p_detached(&mut self, id: ParamId) -> Var {
        self.tape.param_detached(self.store, id)
    }

    /// Identity outside training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) => self.tape.dropout(x, rate, rng),
            None => Ok(x),
        }
    }

    pub fn into_rng(self) -> Option<Rng> {
        self.rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = store.normal(format!("{name}.w"), &[fan_in, fan_out], INIT_STD, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), &[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let y = f.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = f.p(b);
                f.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm { gain: store.ones(format!("{name}.gain"), &[dim]), bias: store.zeros(format!("{name}.bias"), &[dim]) }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let g = f.p(self.gain);
        let b = f.p(self.bias);
        f.tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention. Each head has width
/// `d_model / heads` (floor); heads are concatenated and projected back to
/// `d_model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut Rng) -> Self {
        let head_dim = d_model / heads;
        let inner = head_dim * heads;
        Attention {
            q: Linear::new(store, &format!("{name}.q"), d_model, inner, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, inner, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, inner, true, rng),
            o: Linear::new(store, &format!("{name}.o"), inner, d_model, true, rng),
            heads,
            head_dim,
        }
    }

    /// Queries from `x`, keys/values from `memory`. `causal` masks key `j > i`
    /// for query `i` (self-attention only).
    pub fn forward(&self, f: &mut Fwd, x: Var, memory: Var, causal: bool) -> Result<Var> {
        let q = self.q.forward(f, x)?;
        let k = self.k.forward(f, memory)?;
        let v = self.v.forward(f, memory)?;
        let scale = 1.0 / libm::sqrt(self.head_dim as f64);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = f.tape.slice_cols(q, start, self.head_dim)?;
            let kh = f.tape.slice_cols(k, start, self.head_dim)?;
            let vh = f.tape.slice_cols(v, start, self.head_dim)?;
            let s = f.tape.matmul_nt(qh, kh)?;
            let s = f.tape.scale(s, scale);
            let p = f.tape.softmax_rows(s, causal);
            outs.push(f.tape.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { f.tape.concat_cols(&outs)? };
        self.o.forward(f, cat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, hidden: usize, rng: &mut Rng) -> Self {
        FeedForward {
            l1: Linear::new(store, &format!("{name}.l1"), d_model, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_model, true, rng),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var, dropout: f64) -> Result<Var> {
        let h = self.l1.forward(f, x)?;
        let h = f.tape.relu(h);
        let h = f.dropout(h, dropout)?;
        self.l2.forward(f, h)
    }
}

/// Size and regularization of an encoder–decoder stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Zero removes the feed-forward sublayer.
    pub ffn_hidden: usize,
    pub dropout: f64,
    /// Maximum number of rows an encoder or decoder input may have.
    pub max_len: usize,
    pub final_norm: bool,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model < self.heads {
            return Err(Error::Config(format!("d_model {} cannot host {} heads", self.d_model, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: Option<LayerNorm>,
    pub ffn: Option<FeedForward>,
}

/// Pre-norm bidirectional encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: Option<LayerNorm>,
    pub cfg: TransformerConfig,
}

fn check_len(f: &Fwd, x: Var, cfg: &TransformerConfig) -> Result<()> {
    let rows = f.tape.value(x).rows();
    if rows > cfg.max_len {
        return Err(Error::Length { len: rows, max: cfg.max_len });
    }
    if f.tape.value(x).cols() != cfg.d_model {
        return Err(shape_err("transformer input", format!("width {} != d_model {}", f.tape.value(x).cols(), cfg.d_model)));
    }
    Ok(())
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), cfg.d_model),
                    attn: Attention::new(store, &format!("{p}.attn"), cfg.d_model, cfg.heads, rng),
                    ln_ffn: (cfg.ffn_hidden > 0).then(|| LayerNorm::new(store, &format!("{p}.ln_ffn"), cfg.d_model)),
                    ffn: (cfg.ffn_hidden > 0)
                        .then(|| FeedForward::new(store, &format!("{p}.ffn"), cfg.d_model, cfg.ffn_hidden, rng)),
                }
            })
            .collect();
        let final_ln = cfg.final_norm.then(|| LayerNorm::new(store, &format!("{name}.final_ln"), cfg.d_model));
        Ok(Encoder { layers, final_ln, cfg })
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        check_len(f, x, &self.cfg)?;
        let mut h = x;
        for layer in &self.layers {
            let n = layer.ln_attn.forward(f, h)?;
            let a = layer.attn.forward(f, n, n, false)?;
            let a = f.dropout(a, self.cfg.dropout)?;
            h = f.tape.add(h, a)?;
            if let (Some(ln), Some(ffn)) = (&layer.ln_ffn, &layer.ffn) {
                let n = ln.forward(f, h)?;
                let y = ffn.forward(f, n, self.cfg.dropout)?;
                let y = f.dropout(y, self.cfg.dropout)?;
                h = f.tape.add(h, y)?;
            }
        }
        match &self.final_ln {
            Some(ln) => ln.forward(f, h),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: Option<LayerNorm>,
    pub ffn: Option<FeedForward>,
}

/// Pre-norm decoder with causal self-attention and cross-attention over
/// encoder memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub final_ln: Option<LayerNorm>,
    pub cfg: TransformerConfig,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                DecoderLayer {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), cfg.d_model),
                    self_attn: Attention::new(store, &format!("{p}.self_attn"), cfg.d_model, cfg.heads, rng),
                    ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), cfg.d_model),
                    cross_attn: Attention::new(store, &format!("{p}.cross_attn"), cfg.d_model, cfg.heads, rng),
                    ln_ffn: (cfg.ffn_hidden > 0).then(|| LayerNorm::new(store, &format!("{p}.ln_ffn"), cfg.d_model)),
                    ffn: (cfg.ffn_hidden > 0)
                        .then(|| FeedForward::new(store, &format!("{p}.ffn"), cfg.d_model, cfg.ffn_hidden, rng)),
                }
            })
            .collect();
        let final_ln = cfg.final_norm.then(|| LayerNorm::new(store, &format!("{name}.final_ln"), cfg.d_model));
        Ok(Decoder { layers, final_ln, cfg })
    }

    /// `memory == None` skips cross-attention (pure causal language model).
    pub fn forward(&self, f: &mut Fwd, x: Var, memory: Option<Var>) -> Result<Var> {
        check_len(f, x, &self.cfg)?;
        let mut h = x;
        for layer in &self.layers {
            let n = layer.ln_self.forward(f, h)?;
            let a = layer.self_attn.forward(f, n, n, true)?;
            let a = f.dropout(a, self.cfg.dropout)?;
            h = f.tape.add(h, a)?;
            if let Some(mem) = memory {
                let n = layer.ln_cross.forward(f, h)?;
                let a = layer.cross_attn.forward(f, n, mem, false)?;
                let a = f.dropout(a, self.cfg.dropout)?;
                h = f.tape.add(h, a)?;
            }
            if let (Some(ln), Some(ffn)) = (&layer.ln_ffn, &layer.ffn) {
                let n = ln.forward(f, h)?;
                let y = ffn.forward(f, n, self.cfg.dropout)?;
                let y = f.dropout(y, self.cfg.dropout)?;
                h = f.tape.add(h, y)?;
            }
        }
        match &self.final_ln {
            Some(ln) => ln.forward(f, h),
            None => Ok(h),
        }
    }
}

/// Learnable row table (token, item or position embeddings).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: impl Into<String>, rows: usize, dim: usize, rng: &mut Rng) -> Self {
        Embedding { table: store.normal(name, &[rows, dim], INIT_STD, rng), rows, dim }
    }

    pub fn lookup(&self, f: &mut Fwd, ids: &[usize]) -> Result<Var> {
        let t = f.p(self.table);
        f.tape.gather(t, ids)
    }

    pub fn lookup_detached(&self, f: &mut Fwd, ids: &[usize]) -> Result<Var> {
        let t = f.p_detached(self.table);
        f.tape.gather(t, ids)
    }
}
