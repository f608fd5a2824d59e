//! Interaction logs, item catalogs, preprocessing and the leave-one-out split.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Dense internal item index into an [`ItemCatalog`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ItemId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for ItemId {
    fn from(i: usize) -> Self {
        ItemId(i as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: String,
    /// Chronological.
    pub items: Vec<ItemId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    pub sequences: Vec<UserSequence>,
}

impl InteractionLog {
    pub fn new(sequences: Vec<UserSequence>) -> Self {
        InteractionLog { sequences }
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }

    pub fn item_set(&self) -> BTreeSet<ItemId> {
        self.sequences.iter().flat_map(|s| s.items.iter().copied()).collect()
    }

    /// Keeps every `k`-th sequence (indices 0, k, 2k, …).
    pub fn subsample_every(&self, k: usize) -> Self {
        let k = k.max(1);
        InteractionLog { sequences: self.sequences.iter().step_by(k).cloned().collect() }
    }

    /// Repeatedly drops items seen by fewer than `k` distinct users and users
    /// with fewer than `k` interactions until neither rule removes anything.
    pub fn k_core(&self, k: usize) -> Self {
        let mut seqs: Vec<UserSequence> = self.sequences.clone();
        loop {
            let mut users_per_item: BTreeMap<ItemId, usize> = BTreeMap::new();
            for s in &seqs {
                let distinct: BTreeSet<ItemId> = s.items.iter().copied().collect();
                for it in distinct {
                    *users_per_item.entry(it).or_default() += 1;
                }
            }
            let mut changed = false;
            for s in &mut seqs {
                let before = s.items.len();
                s.items.retain(|it| users_per_item[it] >= k);
                changed |= s.items.len() != before;
            }
            let before = seqs.len();
            seqs.retain(|s| s.items.len() >= k);
            changed |= seqs.len() != before;
            if !changed {
                return InteractionLog { sequences: seqs };
            }
        }
    }

    pub fn five_core(&self) -> Self {
        self.k_core(5)
    }

    /// Keeps the most recent `max_len` interactions of every sequence.
    pub fn truncate(&self, max_len: usize) -> Self {
        let max_len = max_len.max(1);
        let sequences = self
            .sequences
            .iter()
            .map(|s| {
                let start = s.items.len().saturating_sub(max_len);
                UserSequence { user: s.user.clone(), items: s.items[start..].to_vec() }
            })
            .collect();
        InteractionLog { sequences }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ItemAttributes {
    pub title: Option<String>,
    pub brand: Option<String>,
    pub price: Option<String>,
    pub category: Option<String>,
}

/// Items with their precomputed text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemCatalog {
    keys: Vec<String>,
    text: Tensor,
    cold: Vec<bool>,
    attributes: Vec<Option<ItemAttributes>>,
}

impl ItemCatalog {
    pub fn new(keys: Vec<String>, text: Tensor) -> Result<Self> {
        if text.shape().len() != 2 || text.rows() != keys.len() {
            return Err(Error::Config(format!(
                "catalog has {} keys but embedding matrix shape {:?}",
                keys.len(),
                text.shape()
            )));
        }
        for i in 0..text.rows() {
            if !text.row(i).iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("text embedding of item {}", keys[i])));
            }
        }
        let n = keys.len();
        Ok(ItemCatalog { keys, text, cold: vec![false; n], attributes: vec![None; n] })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    pub fn key(&self, item: ItemId) -> &str {
        &self.keys[item.index()]
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn lookup(&self, key: &str) -> Option<ItemId> {
        self.keys.iter().position(|k| k == key).map(ItemId::from)
    }

    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn text_row(&self, item: ItemId) -> &[f64] {
        self.text.row(item.index())
    }

    pub fn is_cold(&self, item: ItemId) -> bool {
        self.cold[item.index()]
    }

    pub fn cold_flags(&self) -> &[bool] {
        &self.cold
    }

    pub fn cold_items(&self) -> Vec<ItemId> {
        (0..self.len()).filter(|&i| self.cold[i]).map(ItemId::from).collect()
    }

    pub fn set_cold(&mut self, cold: &BTreeSet<ItemId>) {
        for (i, c) in self.cold.iter_mut().enumerate() {
            *c = cold.contains(&ItemId::from(i));
        }
    }

    pub fn attributes(&self, item: ItemId) -> Option<&ItemAttributes> {
        self.attributes[item.index()].as_ref()
    }

    pub fn set_attributes(&mut self, item: ItemId, attrs: ItemAttributes) {
        self.attributes[item.index()] = Some(attrs);
    }

    /// Catalog restricted to `keep` (ascending), plus the old→new id map.
    pub fn restrict(&self, keep: &BTreeSet<ItemId>) -> (ItemCatalog, BTreeMap<ItemId, ItemId>) {
        let mut keys = Vec::with_capacity(keep.len());
        let mut data = Vec::with_capacity(keep.len() * self.dim());
        let mut cold = Vec::with_capacity(keep.len());
        let mut attributes = Vec::with_capacity(keep.len());
        let mut remap = BTreeMap::new();
        for (new, &old) in keep.iter().enumerate() {
            remap.insert(old, ItemId::from(new));
            keys.push(self.keys[old.index()].clone());
            data.extend_from_slice(self.text.row(old.index()));
            cold.push(self.cold[old.index()]);
            attributes.push(self.attributes[old.index()].clone());
        }
        let text = Tensor::matrix(keys.len(), self.dim(), data).expect("restricted shape");
        (ItemCatalog { keys, text, cold, attributes }, remap)
    }
}

/// One next-item prediction query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub history: Vec<ItemId>,
    pub label: ItemId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Sequences shorter than 3 that could not be split.
    pub dropped_short: usize,
}

/// Last item → test, second to last → validation, every next-item pair
/// inside the remaining prefix → training.
pub fn leave_one_out_split(log: &InteractionLog) -> SplitDataset {
    let mut split = SplitDataset::default();
    for (user, s) in log.sequences.iter().enumerate() {
        let n = s.items.len();
        if n < 3 {
            split.dropped_short += 1;
            continue;
        }
        for k in 1..=n - 3 {
            split.train.push(Example { user, history: s.items[..k].to_vec(), label: s.items[k] });
        }
        split.valid.push(Example { user, history: s.items[..n - 2].to_vec(), label: s.items[n - 2] });
        split.test.push(Example { user, history: s.items[..n - 1].to_vec(), label: s.items[n - 1] });
    }
    split
}

/// Items of the catalog that occur in no training pair.
pub fn identify_cold_items(split: &SplitDataset, n_items: usize) -> BTreeSet<ItemId> {
    let mut seen = vec![false; n_items];
    for ex in &split.train {
        for it in ex.history.iter().chain(core::iter::once(&ex.label)) {
            seen[it.index()] = true;
        }
    }
    (0..n_items).filter(|&i| !seen[i]).map(ItemId::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PreprocessConfig {
    /// Keep every k-th raw sequence before filtering (1 keeps all).
    pub subsample_every: usize,
    pub min_count: usize,
    pub max_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { subsample_every: 1, min_count: 5, max_len: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub log: InteractionLog,
    pub catalog: ItemCatalog,
    pub split: SplitDataset,
}

impl Preprocessed {
    pub fn cold_items(&self) -> Vec<ItemId> {
        self.catalog.cold_items()
    }
}

/// Subsample, k-core filter, truncate, drop sequences too short to split,
/// compact the catalog to the surviving items, split, and flag cold items.
pub fn preprocess(log: &InteractionLog, catalog: &ItemCatalog, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    if cfg.max_len < 3 {
        return Err(Error::Config(format!("max_len {} cannot hold a leave-one-out split", cfg.max_len)));
    }
    for s in &log.sequences {
        if let Some(bad) = s.items.iter().find(|it| it.index() >= catalog.len()) {
            return Err(Error::Lookup(format!("user {} references unknown item index {}", s.user, bad.0)));
        }
    }
    let filtered = log.subsample_every(cfg.subsample_every).k_core(cfg.min_count).truncate(cfg.max_len);
    let mut short = 0;
    let sequences: Vec<UserSequence> = filtered
        .sequences
        .into_iter()
        .filter(|s| {
            let keep = s.items.len() >= 3;
            short += usize::from(!keep);
            keep
        })
        .collect();
    let kept = InteractionLog { sequences };
    let (mut catalog, remap) = catalog.restrict(&kept.item_set());
    let log = InteractionLog {
        sequences: kept
            .sequences
            .into_iter()
            .map(|s| UserSequence { user: s.user, items: s.items.iter().map(|it| remap[it]).collect() })
            .collect(),
    };
    let mut split = leave_one_out_split(&log);
    split.dropped_short += short;
    let cold = identify_cold_items(&split, catalog.len());
    catalog.set_cold(&cold);
    Ok(Preprocessed { log, catalog, split })
}

/// Parameters of the clustered synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub dim: usize,
    /// Per-coordinate std of cluster centers.
    pub center_scale: f64,
    /// Radius of the per-cluster ring that orders items within a cluster.
    pub ring_radius: f64,
    /// Per-coordinate std of item noise around its ring position.
    pub noise: f64,
    /// Probability that a transition stays inside the current cluster.
    pub cluster_bias: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// In-cluster transitions advance 1..=max_step ring slots.
    pub max_step: usize,
    /// Items that only ever appear as the final interaction of a sequence.
    pub n_cold: usize,
    pub cold_users_per_item: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::new(0, 600, 240, 8)
    }
}

impl SynthConfig {
    pub fn new(seed: u64, n_users: usize, n_items: usize, n_clusters: usize) -> Self {
        SynthConfig {
            seed,
            n_users,
            n_items,
            n_clusters,
            dim: 768,
            center_scale: 1.0,
            ring_radius: 12.0,
            noise: 0.1,
            cluster_bias: 0.9,
            min_len: 6,
            max_len: 14,
            max_step: 2,
            n_cold: 0,
            cold_users_per_item: 5,
        }
    }

    /// RMS per-coordinate distance of an item from its cluster center.
    pub fn within_cluster_rms(&self) -> f64 {
        libm::sqrt(self.noise * self.noise + self.ring_radius * self.ring_radius / self.dim as f64)
    }
}

/// Generator-side facts about a synthetic dataset (for audits in tests).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub cluster_of: Vec<usize>,
    pub centers: Tensor,
    pub cold: Vec<ItemId>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<(InteractionLog, ItemCatalog, SynthTruth)> {
    if cfg.n_clusters == 0 || cfg.n_items < cfg.n_clusters {
        return Err(Error::Config(format!("need n_items ({}) >= n_clusters ({}) >= 1", cfg.n_items, cfg.n_clusters)));
    }
    if cfg.n_users == 0 || cfg.dim < 2 || cfg.min_len < 2 || cfg.max_len < cfg.min_len || cfg.max_step == 0 {
        return Err(Error::Config("invalid synthetic sequence/embedding sizes".into()));
    }
    if !(0.0..=1.0).contains(&cfg.cluster_bias) {
        return Err(Error::Config("cluster_bias must be in [0,1]".into()));
    }
    if cfg.n_cold > 0 && cfg.n_cold * cfg.cold_users_per_item > cfg.n_users {
        return Err(Error::Config("not enough users to host every cold item".into()));
    }
    if cfg.n_items - cfg.n_cold < cfg.n_clusters {
        return Err(Error::Config("every cluster needs at least one warm item".into()));
    }
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let (k, d) = (cfg.n_clusters, cfg.dim);

    let mut centers = Tensor::zeros(&[k, d]);
    for v in centers.data_mut() {
        *v = rng.normal() * cfg.center_scale;
    }
    // Orthonormal ring plane per cluster.
    let mut planes: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let nu = crate::tensor::l2_norm(&u);
        u.iter_mut().for_each(|x| *x /= nu);
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let proj = crate::tensor::dot(&u, &v);
        v.iter_mut().zip(&u).for_each(|(x, ux)| *x -= proj * ux);
        let nv = crate::tensor::l2_norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        planes.push((u, v));
    }

    let cluster_of: Vec<usize> = (0..cfg.n_items).map(|i| i % k).collect();
    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    rng.shuffle(&mut order);
    // Cold items spread over clusters: first pick per cluster round-robin.
    let mut cold_flag = vec![false; cfg.n_items];
    {
        let mut per_cluster: Vec<Vec<usize>> = vec![Vec::new(); k];
        for &i in &order {
            per_cluster[cluster_of[i]].push(i);
        }
        let mut picked = 0;
        let mut round = 0;
        while picked < cfg.n_cold {
            for members in per_cluster.iter() {
                if picked == cfg.n_cold {
                    break;
                }
                // Keep at least one warm item per cluster.
                if round + 1 < members.len() {
                    cold_flag[members[round]] = true;
                    picked += 1;
                }
            }
            round += 1;
        }
    }

    // Ring slot of every item within its cluster (ascending item index).
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..cfg.n_items {
        members[cluster_of[i]].push(i);
    }
    let mut angle = vec![0.0; cfg.n_items];
    for m in &members {
        for (slot, &i) in m.iter().enumerate() {
            angle[i] = core::f64::consts::TAU * slot as f64 / m.len() as f64;
        }
    }
    let mut text = Tensor::zeros(&[cfg.n_items, d]);
    for i in 0..cfg.n_items {
        let c = cluster_of[i];
        let (u, v) = &planes[c];
        let (ca, sa) = (libm::cos(angle[i]), libm::sin(angle[i]));
        let row = &mut text.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = centers.row(c)[j] + cfg.ring_radius * (ca * u[j] + sa * v[j]) + cfg.noise * rng.normal();
        }
    }

    let warm: Vec<Vec<usize>> = members.iter().map(|m| m.iter().copied().filter(|&i| !cold_flag[i]).collect()).collect();
    let warm_all: Vec<usize> = (0..cfg.n_items).filter(|&i| !cold_flag[i]).collect();
    let ring_pos = |i: usize| warm[cluster_of[i]].iter().position(|&x| x == i);

    let mut sequences = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
        let mut items = Vec::with_capacity(len);
        let mut cur = warm_all[rng.below(warm_all.len())];
        items.push(cur);
        while items.len() < len {
            let c = cluster_of[cur];
            let stay = k == 1 || rng.uniform() < cfg.cluster_bias;
            cur = if stay {
                let ring = &warm[c];
                let p = ring_pos(cur).expect("walk stays on warm items");
                ring[(p + 1 + rng.below(cfg.max_step)) % ring.len()]
            } else {
                loop {
                    let cand = warm_all[rng.below(warm_all.len())];
                    if cluster_of[cand] != c {
                        break cand;
                    }
                }
            };
            items.push(cur);
        }
        sequences.push(items);
        let _ = u;
    }

    // Attach every cold item as the final interaction of distinct users,
    // preceded by its warm ring predecessor.
    let cold: Vec<usize> = (0..cfg.n_items).filter(|&i| cold_flag[i]).collect();
    let mut hosts: Vec<usize> = (0..cfg.n_users).collect();
    rng.shuffle(&mut hosts);
    let mut host = hosts.into_iter();
    for &c in &cold {
        let cl = cluster_of[c];
        let pred = warm[cl]
            .iter()
            .copied()
            .filter(|&w| angle[w] < angle[c])
            .last()
            .unwrap_or_else(|| *warm[cl].last().expect("warm member"));
        for _ in 0..cfg.cold_users_per_item {
            let u = host.next().expect("enough hosts");
            // The host's whole sequence becomes an in-cluster walk ending
            // pred → c, generated backwards along the ring.
            let s = &mut sequences[u];
            let n = s.len();
            let ring = &warm[cl];
            s[n - 1] = c;
            s[n - 2] = pred;
            for k in (0..n - 2).rev() {
                let p = ring_pos(s[k + 1]).expect("warm ring member");
                let back = 1 + rng.below(cfg.max_step);
                s[k] = ring[(p + ring.len() * cfg.max_step - back) % ring.len()];
            }
        }
    }

    let log = InteractionLog {
        sequences: sequences
            .into_iter()
            .enumerate()
            .map(|(u, items)| UserSequence {
                user: format!("user{u}"),
                items: items.into_iter().map(ItemId::from).collect(),
            })
            .collect(),
    };
    let keys = (0..cfg.n_items).map(|i| format!("item{i}")).collect();
    let catalog = ItemCatalog::new(keys, text)?;
    let truth = SynthTruth { cluster_of, centers, cold: cold.into_iter().map(ItemId::from).collect() };
    Ok((log, catalog, truth))
}
