//! Residual-quantized autoencoder over item text embeddings, semantic-ID
//! assignment with collision disambiguation, and the prefix trie used for
//! constrained decoding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::datasets::{ItemCatalog, ItemId};
use crate::error::{Error, Result};
use crate::nn::{Fwd, Linear};
use crate::optim::{adamw_step, param_grads, AdamState, AdamWConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Output of greedy residual quantization of one latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub codes: Vec<usize>,
    /// `residuals[j]` is the residual entering level `j`; the last entry is
    /// what remains after every level (`latent − quantized`).
    pub residuals: Vec<Vec<f64>>,
    pub quantized: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `book` (lowest index on ties).
pub fn nearest_codeword(v: &[f64], book: &Tensor) -> usize {
    let mut best = (0, f64::INFINITY);
    for c in 0..book.rows() {
        let d = sq_dist(v, book.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Greedy per-level nearest-codeword selection on the running residual.
pub fn rq_quantize(latent: &[f64], codebooks: &[&Tensor]) -> Quantized {
    let mut residual = latent.to_vec();
    let mut quantized = vec![0.0; latent.len()];
    let mut codes = Vec::with_capacity(codebooks.len());
    let mut residuals = Vec::with_capacity(codebooks.len() + 1);
    for book in codebooks {
        let c = nearest_codeword(&residual, book);
        residuals.push(residual.clone());
        for ((r, q), &w) in residual.iter_mut().zip(&mut quantized).zip(book.row(c)) {
            *r -= w;
            *q += w;
        }
        codes.push(c);
    }
    residuals.push(residual);
    Quantized { codes, residuals, quantized }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RqVaeConfig {
    pub input_dim: usize,
    /// Encoder widths after the input, ending in the latent width; the
    /// decoder mirrors them.
    pub hidden: Vec<usize>,
    pub levels: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for RqVaeConfig {
    fn default() -> Self {
        RqVaeConfig {
            input_dim: 768,
            hidden: vec![512, 256, 128],
            levels: 3,
            codebook_size: 256,
            beta: 0.25,
            lr: 1e-3,
            weight_decay: 0.1,
            epochs: 2000,
            batch_size: 256,
            kmeans_iters: 20,
            seed: 0,
        }
    }
}

impl RqVaeConfig {
    pub fn latent_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.input_dim == 0 {
            return Err(Error::Config("RQ-VAE layer widths must be positive".into()));
        }
        if self.levels == 0 || self.codebook_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("RQ-VAE needs ≥1 level, codeword and batch row".into()));
        }
        if self.beta < 0.0 || self.lr <= 0.0 {
            return Err(Error::Config("RQ-VAE beta must be ≥0 and lr >0".into()));
        }
        Ok(())
    }
}

/// Encoder/decoder MLPs (ReLU between layers, none after the last) and the
/// per-level codebooks, all held in one parameter store.
#[derive(Debug, Clone)]
pub struct RqVae {
    pub cfg: RqVaeConfig,
    pub store: ParamStore,
    pub encoder: Vec<Linear>,
    pub decoder: Vec<Linear>,
    pub codebooks: Vec<ParamId>,
}

fn mlp(f: &mut Fwd, layers: &[Linear], x: Var) -> Result<Var> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(f, h)?;
        if i + 1 < layers.len() {
            h = f.tape.relu(h);
        }
    }
    Ok(h)
}

/// Batch-mean loss terms as tape nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RqVaeLossTerms {
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
}

/// Value of each term of the quantizer loss, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RqVaeLossParts {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl RqVaeLossParts {
    pub fn total(&self, beta: f64) -> f64 {
        self.recon + self.codebook + beta * self.commitment
    }
}

impl RqVae {
    pub fn new(cfg: RqVaeConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let mut widths = vec![cfg.input_dim];
        widths.extend_from_slice(&cfg.hidden);
        let encoder = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("rq.enc.{i}"), w[0], w[1], true, &mut rng))
            .collect();
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        let decoder = rev
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("rq.dec.{i}"), w[0], w[1], true, &mut rng))
            .collect();
        let codebooks = (0..cfg.levels)
            .map(|j| store.normal(format!("rq.codebook.{j}"), &[cfg.codebook_size, cfg.latent_dim()], 0.02, &mut rng))
            .collect();
        Ok(RqVae { cfg, store, encoder, decoder, codebooks })
    }

    pub fn codebook(&self, level: usize) -> &Tensor {
        self.store.get(self.codebooks[level])
    }

    fn books(&self) -> Vec<&Tensor> {
        self.codebooks.iter().map(|&c| self.store.get(c)).collect()
    }

    /// Encoder outputs for a batch of rows.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut f = Fwd::eval(&self.store);
        let v = f.tape.constant(x.clone());
        let z = mlp(&mut f, &self.encoder, v)?;
        Ok(f.tape.value(z).clone())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut f = Fwd::eval(&self.store);
        let v = f.tape.constant(z.clone());
        let x = mlp(&mut f, &self.decoder, v)?;
        Ok(f.tape.value(x).clone())
    }

    pub fn quantize_rows(&self, x: &Tensor) -> Result<Vec<Quantized>> {
        let z = self.encode(x)?;
        let books = self.books();
        Ok((0..z.rows()).map(|i| rq_quantize(z.row(i), &books)).collect())
    }

    /// Builds the loss on `f.tape` for the rows of `x`:
    /// `‖x − dec(z + sg(q − z))‖² + Σ‖sg(r_j) − c_j‖² + β Σ‖r_j − sg(c_j)‖²`,
    /// each term summed over coordinates and averaged over rows. Residuals
    /// are formed from stopped codewords, so the commitment term reaches
    /// only the encoder.
    pub fn loss(&self, f: &mut Fwd, x: Var) -> Result<(Var, RqVaeLossParts)> {
        let terms = self.loss_terms(f, x)?;
        let cm_w = f.tape.scale(terms.commitment, self.cfg.beta);
        let total = f.tape.add(terms.recon, terms.codebook)?;
        let total = f.tape.add(total, cm_w)?;
        let parts = RqVaeLossParts {
            recon: f.tape.value(terms.recon).item(),
            codebook: f.tape.value(terms.codebook).item(),
            commitment: f.tape.value(terms.commitment).item(),
        };
        Ok((total, parts))
    }

    /// The three loss terms as separate batch-mean nodes.
    pub fn loss_terms(&self, f: &mut Fwd, x: Var) -> Result<RqVaeLossTerms> {
        let n = f.tape.value(x).rows() as f64;
        let z = mlp(f, &self.encoder, x)?;
        let zv = f.tape.value(z).clone();
        let books = self.books();
        let quant: Vec<Quantized> = (0..zv.rows()).map(|i| rq_quantize(zv.row(i), &books)).collect();

        // Straight-through decoder input.
        let mut shift = Vec::with_capacity(zv.len());
        for (i, q) in quant.iter().enumerate() {
            shift.extend(q.quantized.iter().zip(zv.row(i)).map(|(a, b)| a - b));
        }
        let shift = f.tape.constant(Tensor::matrix(zv.rows(), zv.cols(), shift)?);
        let zq = f.tape.add(z, shift)?;
        let xr = mlp(f, &self.decoder, zq)?;
        let diff = f.tape.sub(x, xr)?;
        let recon = f.tape.sum_squares(diff);

        let mut residual = z;
        let mut cb_terms = Vec::new();
        let mut commit_terms = Vec::new();
        for (j, &book_id) in self.codebooks.iter().enumerate() {
            let codes: Vec<usize> = quant.iter().map(|q| q.codes[j]).collect();
            let book = f.p(book_id);
            let c = f.tape.gather(book, &codes)?;
            let r_sg = f.tape.detach(residual);
            let d_cb = f.tape.sub(r_sg, c)?;
            cb_terms.push(f.tape.sum_squares(d_cb));
            let c_sg = f.tape.detach(c);
            let d_cm = f.tape.sub(residual, c_sg)?;
            commit_terms.push(f.tape.sum_squares(d_cm));
            residual = d_cm;
        }
        let cb = sum_vars(f, &cb_terms)?;
        let cm = sum_vars(f, &commit_terms)?;
        Ok(RqVaeLossTerms {
            recon: f.tape.scale(recon, 1.0 / n),
            codebook: f.tape.scale(cb, 1.0 / n),
            commitment: f.tape.scale(cm, 1.0 / n),
        })
    }

    /// Mean per-row reconstruction error of the straight-through path
    /// (evaluation mode).
    pub fn recon_loss(&self, x: &Tensor) -> Result<f64> {
        let mut f = Fwd::eval(&self.store);
        let v = f.tape.constant(x.clone());
        Ok(self.loss(&mut f, v)?.1.recon)
    }

    /// Lloyd's k-means on the encoder latents (then residuals) of `x`,
    /// level by level, written into the codebooks.
    pub fn kmeans_init(&mut self, x: &Tensor, rng: &mut Rng) -> Result<()> {
        let z = self.encode(x)?;
        let mut residual: Vec<Vec<f64>> = (0..z.rows()).map(|i| z.row(i).to_vec()).collect();
        for j in 0..self.cfg.levels {
            let book = kmeans(&residual, self.cfg.codebook_size, self.cfg.kmeans_iters, rng);
            for r in &mut residual {
                let c = nearest_codeword(r, &book);
                r.iter_mut().zip(book.row(c)).for_each(|(a, b)| *a -= b);
            }
            self.store.set(self.codebooks[j], book);
        }
        Ok(())
    }

    /// Re-seeds every codeword that no row of `x` selected to a randomly
    /// chosen residual at that level. Returns the number re-seeded.
    pub fn reseed_dead_codewords(&mut self, x: &Tensor, rng: &mut Rng) -> Result<usize> {
        let quant = self.quantize_rows(x)?;
        let mut reseeded = 0;
        for j in 0..self.cfg.levels {
            let mut used = vec![false; self.cfg.codebook_size];
            for q in &quant {
                used[q.codes[j]] = true;
            }
            let dead: Vec<usize> = (0..used.len()).filter(|&c| !used[c]).collect();
            if dead.is_empty() || quant.is_empty() {
                continue;
            }
            let book = self.store.get_mut(self.codebooks[j]);
            let d = book.cols();
            for c in dead {
                let src = &quant[rng.below(quant.len())].residuals[j];
                book.data_mut()[c * d..(c + 1) * d].copy_from_slice(src);
                reseeded += 1;
            }
        }
        Ok(reseeded)
    }
}

fn sum_vars(f: &mut Fwd, vs: &[Var]) -> Result<Var> {
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = f.tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Lloyd's algorithm with centers initialized from distinct random points.
/// Empty clusters are re-seeded from a random point. With fewer points than
/// `k`, the surplus centers duplicate random points.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut Rng) -> Tensor {
    let d = points.first().map_or(0, Vec::len);
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut centers: Vec<Vec<f64>> =
        (0..k).map(|c| if c < n { points[order[c]].clone() } else { points[rng.below(n)].clone() }).collect();
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, p) in points.iter().enumerate() {
            let mut best = (0, f64::INFINITY);
            for (c, ctr) in centers.iter().enumerate() {
                let dist = sq_dist(p, ctr);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            assign[i] = best.0;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            sums[assign[i]].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] == 0 {
                centers[c] = points[rng.below(n)].clone();
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let data = centers.into_iter().flatten().collect();
    Tensor::matrix(k, d, data).expect("kmeans shape")
}

/// Per-epoch record of quantizer training.
#[derive(Debug, Clone, PartialEq)]
pub struct RqVaeHistory {
    /// Mean reconstruction error over the training rows before the first
    /// update and after every epoch.
    pub recon: Vec<f64>,
    pub reseeded: Vec<usize>,
    /// Items whose rows formed the training set.
    pub trained_on: Vec<ItemId>,
}

/// Trains a fresh quantizer on the non-cold catalog items.
pub fn train_rqvae(catalog: &ItemCatalog, cfg: &RqVaeConfig) -> Result<(RqVae, RqVaeHistory)> {
    let items: Vec<ItemId> = (0..catalog.len()).map(ItemId::from).filter(|&i| !catalog.is_cold(i)).collect();
    if items.is_empty() {
        return Err(Error::Config("RQ-VAE training set is empty (every item is cold)".into()));
    }
    if catalog.dim() != cfg.input_dim {
        return Err(Error::Config(format!("catalog dim {} != RQ-VAE input dim {}", catalog.dim(), cfg.input_dim)));
    }
    let rows: Vec<&[f64]> = items.iter().map(|&i| catalog.text_row(i)).collect();
    let x = Tensor::from_rows(&rows)?;
    train_rqvae_on(x, items, cfg)
}

/// Trains on explicit rows; `items` labels the rows for auditing.
pub fn train_rqvae_on(x: Tensor, items: Vec<ItemId>, cfg: &RqVaeConfig) -> Result<(RqVae, RqVaeHistory)> {
    let mut model = RqVae::new(cfg.clone())?;
    let mut rng = Rng::seed_from_u64(cfg.seed).fork(1);
    model.kmeans_init(&x, &mut rng)?;
    let mut state = AdamState::new(&model.store);
    let opt = AdamWConfig::new(cfg.lr, cfg.weight_decay);
    let mut history = RqVaeHistory { recon: vec![model.recon_loss(&x)?], reseeded: Vec::new(), trained_on: items };
    let n = x.rows();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| x.row(i)).collect();
            let batch = Tensor::from_rows(&rows)?;
            let grads = {
                let mut f = Fwd::eval(&model.store);
                let xb = f.tape.constant(batch);
                let (loss, _) = model.loss(&mut f, xb)?;
                if !f.tape.value(loss).is_finite() {
                    return Err(Error::NonFinite("RQ-VAE loss".into()));
                }
                f.tape.backward(loss)?
            };
            let pg = param_grads(&grads);
            adamw_step(&mut model.store, &pg, &mut state, &opt, cfg.lr)?;
        }
        let re = model.reseed_dead_codewords(&x, &mut rng)?;
        history.reseeded.push(re);
        history.recon.push(model.recon_loss(&x)?);
    }
    Ok((model, history))
}

/// Vocabulary layout of SID tokens: level `j` code `c` is token `j·t + c`;
/// dedup index `d` is token `m·t + d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SidVocab {
    pub levels: usize,
    pub codebook_size: usize,
    pub dedup_range: usize,
}

impl SidVocab {
    pub fn size(&self) -> usize {
        self.levels * self.codebook_size + self.dedup_range
    }

    /// Tokens per item (codes plus dedup).
    pub fn tokens_per_item(&self) -> usize {
        self.levels + 1
    }

    pub fn token(&self, position: usize, value: usize) -> usize {
        position * self.codebook_size + value
    }

    /// Value encoded by `token` at `position`.
    pub fn value(&self, position: usize, token: usize) -> usize {
        token - position * self.codebook_size
    }
}

/// Codes plus dedup index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SemanticId {
    pub codes: Vec<usize>,
    pub dedup: usize,
}

impl SemanticId {
    pub fn as_tuple(&self) -> Vec<usize> {
        let mut t = self.codes.clone();
        t.push(self.dedup);
        t
    }
}

/// Semantic IDs of every catalog item in item order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidTable {
    pub vocab: SidVocab,
    pub ids: Vec<SemanticId>,
}

impl SidTable {
    /// Disambiguates colliding code tuples with dedup 0, 1, … in ascending
    /// item order. `codes[i]` belongs to item `i`.
    pub fn from_codes(codes: Vec<Vec<usize>>, levels: usize, codebook_size: usize) -> Result<Self> {
        let mut seen: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let mut ids = Vec::with_capacity(codes.len());
        for c in codes {
            if c.len() != levels || c.iter().any(|&v| v >= codebook_size) {
                return Err(Error::Config(format!("code tuple {c:?} outside {levels} levels × {codebook_size}")));
            }
            let slot = seen.entry(c.clone()).or_insert(0);
            ids.push(SemanticId { codes: c, dedup: *slot });
            *slot += 1;
        }
        let dedup_range = seen.values().copied().max().unwrap_or(1).max(1);
        Ok(SidTable { vocab: SidVocab { levels, codebook_size, dedup_range }, ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, item: ItemId) -> Result<&SemanticId> {
        self.ids.get(item.index()).ok_or_else(|| Error::Lookup(format!("item {} has no semantic ID", item.0)))
    }

    /// Vocabulary tokens of an item's SID.
    pub fn tokens(&self, item: ItemId) -> Result<Vec<usize>> {
        let sid = self.get(item)?;
        let mut t: Vec<usize> = sid.codes.iter().enumerate().map(|(j, &c)| self.vocab.token(j, c)).collect();
        t.push(self.vocab.token(self.vocab.levels, sid.dedup));
        Ok(t)
    }

    pub fn trie(&self) -> SidTrie {
        self.trie_over((0..self.len()).map(ItemId::from))
    }

    pub fn trie_over(&self, items: impl IntoIterator<Item = ItemId>) -> SidTrie {
        let mut trie = SidTrie::new(self.vocab.tokens_per_item());
        for it in items {
            trie.insert(&self.tokens(it).expect("item in table"), it);
        }
        trie
    }

    /// Fraction of items sharing their full code tuple (before dedup) with
    /// another item.
    pub fn collision_rate(&self) -> f64 {
        if self.ids.is_empty() {
            return 0.0;
        }
        let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
        for s in &self.ids {
            *counts.entry(&s.codes).or_default() += 1;
        }
        let collided: usize = counts.values().filter(|&&c| c > 1).sum();
        collided as f64 / self.ids.len() as f64
    }
}

/// Assigns every catalog item (cold ones included) a SID with the frozen quantizer.
pub fn assign_semantic_ids(catalog: &ItemCatalog, model: &RqVae) -> Result<SidTable> {
    let quant = model.quantize_rows(catalog.text())?;
    SidTable::from_codes(quant.into_iter().map(|q| q.codes).collect(), model.cfg.levels, model.cfg.codebook_size)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TrieNode {
    children: BTreeMap<usize, usize>,
    item: Option<ItemId>,
}

/// Prefix tree over token sequences; leaves carry items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidTrie {
    nodes: Vec<TrieNode>,
    depth: usize,
    leaves: usize,
}

impl SidTrie {
    pub const ROOT: usize = 0;

    pub fn new(depth: usize) -> Self {
        SidTrie { nodes: vec![TrieNode { children: BTreeMap::new(), item: None }], depth, leaves: 0 }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves
    }

    pub fn insert(&mut self, tokens: &[usize], item: ItemId) {
        debug_assert_eq!(tokens.len(), self.depth);
        let mut node = Self::ROOT;
        for &t in tokens {
            node = match self.nodes[node].children.get(&t) {
                Some(&c) => c,
                None => {
                    self.nodes.push(TrieNode { children: BTreeMap::new(), item: None });
                    let c = self.nodes.len() - 1;
                    self.nodes[node].children.insert(t, c);
                    c
                }
            };
        }
        if self.nodes[node].item.replace(item).is_none() {
            self.leaves += 1;
        }
    }

    /// `(token, child)` pairs in ascending token order.
    pub fn children(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&t, &c)| (t, c))
    }

    pub fn child(&self, node: usize, token: usize) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub fn item(&self, node: usize) -> Option<ItemId> {
        self.nodes[node].item
    }

    pub fn lookup(&self, tokens: &[usize]) -> Option<ItemId> {
        let mut node = Self::ROOT;
        for &t in tokens {
            node = self.child(node, t)?;
        }
        self.item(node)
    }

    /// Every `(tokens, item)` leaf in lexicographic token order.
    pub fn leaves(&self) -> Vec<(Vec<usize>, ItemId)> {
        let mut out = Vec::new();
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            if let Some(it) = self.nodes[node].item {
                out.push((prefix.clone(), it));
            }
            for (t, c) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(*t);
                stack.push((*c, p));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_nearest_hand_case() {
        let book = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 1.0]]).unwrap();
        let q = rq_quantize(&[0.9, 1.1], &[&book]);
        assert_eq!(q.codes, vec![1]);
        let r = &q.residuals[1];
        assert!((r[0] + 0.1).abs() < 1e-15 && (r[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn quantize_exact_hit_leaves_zero_residual() {
        let mut b1 = Tensor::zeros(&[8, 3]);
        b1.data_mut()[15..18].copy_from_slice(&[0.3, -0.2, 0.7]);
        let b2 = Tensor::zeros(&[4, 3]);
        let q = rq_quantize(&[0.3, -0.2, 0.7], &[&b1, &b2]);
        assert_eq!(q.codes[0], 5);
        assert_eq!(q.residuals[1], vec![0.0; 3]);
    }

    #[test]
    fn forced_collision_dedups_in_item_order() {
        let t = SidTable::from_codes(vec![vec![1, 2, 3], vec![0, 0, 0], vec![1, 2, 3]], 3, 4).unwrap();
        assert_eq!(t.ids[0].dedup, 0);
        assert_eq!(t.ids[2].dedup, 1);
        assert_eq!(t.vocab.dedup_range, 2);
        let distinct = SidTable::from_codes(vec![vec![1, 2, 3], vec![0, 0, 0]], 3, 4).unwrap();
        assert!(distinct.ids.iter().all(|s| s.dedup == 0));
        assert_eq!(distinct.vocab.size(), 13);
    }

    #[test]
    fn trie_resolves_every_item() {
        let t = SidTable::from_codes(vec![vec![1, 2], vec![1, 3], vec![1, 2], vec![0, 0]], 2, 4).unwrap();
        let trie = t.trie();
        assert_eq!(trie.num_leaves(), 4);
        for i in 0..4 {
            assert_eq!(trie.lookup(&t.tokens(ItemId(i)).unwrap()), Some(ItemId(i)));
        }
        let leaves = trie.leaves();
        assert_eq!(leaves.len(), 4);
        assert!(leaves.iter().all(|(p, _)| p.len() == 3));
        assert!(leaves.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![if i < 10 { -5.0 } else { 5.0 } + i as f64 * 0.01]).collect();
        let c = kmeans(&pts, 2, 10, &mut Rng::seed_from_u64(1));
        let mut v = [c.data()[0], c.data()[1]];
        v.sort_by(f64::total_cmp);
        assert!(v[0] < -4.0 && v[1] > 4.0);
    }
}
