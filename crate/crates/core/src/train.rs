//! Training loop shared by every variant: AdamW, cosine schedule, early
//! stopping on validation in-set NDCG@10, best-checkpoint tracking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::datasets::{Example, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::hybrid::{validation_ranking, InferenceConfig};
use crate::infer::Frozen;
use crate::model::{ItemSpace, ModelConfig, SeqRecModel};
use crate::nn::Fwd;
use crate::optim::{adamw_step, cosine_lr, param_grads, AdamState, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::{Rng, RngState};
use crate::sid::SidVocab;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Validate on at most this many in-set queries (all when `None`).
    pub max_val_queries: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            lr_min: 0.0,
            weight_decay: 0.035,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            max_val_queries: None,
        }
    }
}

/// Everything needed to rebuild a model and resume its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub vocab: Option<SidVocab>,
    pub n_items: usize,
    pub text_dim: usize,
    pub params: Vec<(String, Tensor)>,
    pub optim: AdamState,
    pub rng: RngState,
    pub epoch: usize,
    pub metric: f64,
    /// Hash of the SID table the model was trained with ("" for ID models).
    pub sid_hash: String,
}

impl Checkpoint {
    pub fn capture(model: &SeqRecModel, optim: &AdamState, rng: &Rng, epoch: usize, metric: f64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model.cfg.clone(),
            vocab: model.vocab,
            n_items: model.n_items,
            text_dim: model.text_dim,
            params: model.store.iter().map(|(_, n, t)| (n.into(), t.clone())).collect(),
            optim: optim.clone(),
            rng: rng.state(),
            epoch,
            metric,
            sid_hash: String::new(),
        }
    }

    /// Rebuilds the model over `space` with the stored parameter values.
    pub fn restore(&self, space: &ItemSpace) -> Result<SeqRecModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut model = SeqRecModel::new(self.model.clone(), space)?;
        if model.vocab != self.vocab || model.n_items != self.n_items || model.text_dim != self.text_dim {
            return Err(Error::Config("checkpoint does not match the item space".into()));
        }
        load_params(&mut model.store, &self.params)?;
        Ok(model)
    }
}

/// Overwrites every parameter of `store` from `(name, value)` pairs in store order.
pub fn load_params(store: &mut ParamStore, params: &[(String, Tensor)]) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::Config(format!("checkpoint has {} tensors, model {}", params.len(), store.len())));
    }
    for (id, (name, value)) in store.ids().collect::<Vec<_>>().into_iter().zip(params) {
        if store.name(id) != name || store.get(id).shape() != value.shape() {
            return Err(Error::Config(format!(
                "checkpoint tensor {name} {:?} does not match model tensor {} {:?}",
                value.shape(),
                store.name(id),
                store.get(id).shape()
            )));
        }
        store.set(id, value.clone());
    }
    Ok(())
}

/// Stops once `patience` epochs have passed without improvement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    NoImprovement,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::NEG_INFINITY, best_epoch: None, since_best: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Progress {
        if metric > self.best || self.best_epoch.is_none() {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            Progress::Improved
        } else {
            self.since_best += 1;
            Progress::NoImprovement
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Patience,
    MaxEpochs,
    /// A loss or gradient became non-finite during this epoch.
    Diverged { epoch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochLog>,
    pub stop: StopReason,
}

/// Validation in-set NDCG@`final_k` through the model's selection ranking.
pub fn validation_metric(frozen: &Frozen, valid: &[Example], cold: &[bool], infer: &InferenceConfig) -> Result<f64> {
    let report = evaluate(valid, cold, infer.final_k, |ex| validation_ranking(frozen, &ex.history, infer))?;
    Ok(report.in_set.ndcg)
}

/// One optimizer step on `batch`; returns the loss value.
pub fn train_step(
    model: &mut SeqRecModel,
    space: &ItemSpace,
    batch: &[Example],
    state: &mut AdamState,
    opt: &AdamWConfig,
    lr: f64,
    dropout_rng: Rng,
) -> Result<f64> {
    let (value, grads) = {
        let mut f = Fwd::train(&model.store, dropout_rng);
        let (loss, parts) = model.loss(&mut f, space, batch)?;
        if !parts.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {}", parts.total)));
        }
        (parts.total, f.tape.backward(loss)?)
    };
    adamw_step(&mut model.store, &param_grads(&grads), state, opt, lr)?;
    Ok(value)
}

pub fn train(
    mut model: SeqRecModel,
    space: &ItemSpace,
    split: &SplitDataset,
    cfg: &TrainConfig,
    infer: &InferenceConfig,
) -> Result<TrainOutcome> {
    if split.train.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch size and epoch budget must be positive".into()));
    }
    let mut cold = alloc::vec![false; space.n_items()];
    for c in &space.cold {
        cold[c.index()] = true;
    }
    let valid: Vec<Example> = {
        let v = split.valid.iter().filter(|e| !cold[e.label.index()]).cloned();
        match cfg.max_val_queries {
            Some(m) => v.take(m).collect(),
            None => v.collect(),
        }
    };
    let opt = AdamWConfig::new(cfg.lr, cfg.weight_decay);
    let mut state = AdamState::new(&model.store);
    let mut rng = Rng::seed_from_u64(cfg.seed).fork(0x747261696e);
    let steps_per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * steps_per_epoch;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut step = 0usize;
    let mut stop = StopReason::MaxEpochs;
    'epochs: for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| split.train[i].clone()).collect();
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min);
            let drop_rng = rng.fork(step as u64);
            match train_step(&mut model, space, &batch, &mut state, &opt, lr, drop_rng) {
                Ok(l) => loss_sum += l * batch.len() as f64,
                Err(Error::NonFinite(_)) => {
                    stop = StopReason::Diverged { epoch };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let metric = {
            let frozen = Frozen::new(&model, space)?;
            validation_metric(&frozen, &valid, &cold, infer)?
        };
        history.push(EpochLog { epoch, train_loss: loss_sum / split.train.len() as f64, val_metric: metric, lr });
        if stopper.observe(epoch, metric) == Progress::Improved {
            best = Some(Checkpoint::capture(&model, &state, &rng, epoch, metric));
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
    }
    let best = match best {
        Some(b) => b,
        None => {
            return Err(Error::NonFinite("training diverged before the first validation".into()));
        }
    };
    Ok(TrainOutcome { best, history, stop })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_zero_stops_after_first_epoch() {
        let mut s = EarlyStopper::new(0);
        s.observe(0, 0.1);
        assert!(s.should_stop());
    }

    #[test]
    fn scripted_plateau() {
        let script = [0.1, 0.2, 0.3, 0.3, 0.29, 0.3, 0.5];
        let mut s = EarlyStopper::new(3);
        let mut last = 0;
        for (e, &m) in script.iter().enumerate() {
            s.observe(e, m);
            last = e;
            if s.should_stop() {
                break;
            }
        }
        assert_eq!(last, 5);
        assert_eq!(s.best_epoch, Some(2));
    }

    #[test]
    fn monotone_run_keeps_last() {
        let mut s = EarlyStopper::new(2);
        for e in 0..5 {
            s.observe(e, e as f64);
            assert!(!s.should_stop());
        }
        assert_eq!(s.best_epoch, Some(4));
    }
}
