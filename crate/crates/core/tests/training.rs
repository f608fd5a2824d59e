mod common;

use common::tiny_sids;
use seqrec_core::datasets::{preprocess, synth_generate, Example, ItemId, PreprocessConfig, Preprocessed, SynthConfig};
use seqrec_core::eval::evaluate;
use seqrec_core::hybrid::{recommend, InferenceConfig};
use seqrec_core::infer::Frozen;
use seqrec_core::model::{ItemSpace, ModelConfig, SeqRecModel, Variant};
use seqrec_core::nn::Fwd;
use seqrec_core::optim::{AdamState, AdamWConfig};
use seqrec_core::train::{train, train_step, StopReason, TrainConfig};
use seqrec_core::Rng;

fn data() -> (Preprocessed, ItemSpace) {
    let mut cfg = SynthConfig::new(9, 150, 40, 4);
    cfg.dim = 12;
    cfg.n_cold = 3;
    let (log, cat, _) = synth_generate(&cfg).unwrap();
    let p = preprocess(&log, &cat, &PreprocessConfig::default()).unwrap();
    let sids = tiny_sids(p.catalog.len(), 4, 2, 10);
    let space = ItemSpace::new(&p.catalog, Some(sids)).unwrap();
    (p, space)
}

fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig { max_items: 20, ..common::tiny_config(variant) }
}

fn quick(seed: u64, epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig { lr: 5e-3, batch_size: 32, max_epochs: epochs, patience, seed, max_val_queries: Some(40), ..Default::default() }
}

fn infer() -> InferenceConfig {
    InferenceConfig { k: 5, ..Default::default() }
}

#[test]
fn initial_next_token_loss_is_near_uniform() {
    let (p, space) = data();
    let model = SeqRecModel::new(tiny_config(Variant::Tiger), &space).unwrap();
    let mut f = Fwd::eval(&model.store);
    let out = model.forward_batch(&mut f, &space, &p.split.train[..32]).unwrap();
    let l = model.next_token_loss(&mut f, &out).unwrap();
    let uniform = (model.vocab.unwrap().size() as f64).ln();
    let got = f.tape.value(l).item();
    assert!((got - uniform).abs() < 0.05 * uniform, "{got} vs ln V = {uniform}");
}

#[test]
fn single_example_is_memorized() {
    let (_, space) = data();
    for variant in [Variant::Tiger, Variant::DenseSid, Variant::Liger] {
        let mut model = SeqRecModel::new(tiny_config(variant), &space).unwrap();
        let batch = [Example { user: 0, history: vec![ItemId(1), ItemId(4), ItemId(2)], label: ItemId(7) }];
        let opt = AdamWConfig::new(1e-2, 0.0);
        let mut state = AdamState::new(&model.store);
        let mut last = f64::INFINITY;
        for step in 0..500 {
            last = train_step(&mut model, &space, &batch, &mut state, &opt, 1e-2, Rng::seed_from_u64(step)).unwrap();
        }
        let mut f = Fwd::eval(&model.store);
        let (_, parts) = model.loss(&mut f, &space, &batch).unwrap();
        assert!(parts.total < 0.01, "{variant}: eval loss {} (last train loss {last})", parts.total);
    }
}

#[test]
fn loss_decreases_on_synthetic_data() {
    let (p, space) = data();
    let mut model = SeqRecModel::new(tiny_config(Variant::Liger), &space).unwrap();
    let opt = AdamWConfig::new(3e-3, 0.035);
    let mut state = AdamState::new(&model.store);
    let eval_loss = |m: &SeqRecModel| {
        let mut f = Fwd::eval(&m.store);
        m.loss(&mut f, &space, &p.split.valid).unwrap().1.total
    };
    let initial = eval_loss(&model);
    let mut rng = Rng::seed_from_u64(3);
    let mut order: Vec<usize> = (0..p.split.train.len()).collect();
    for step in 0..200u64 {
        if step as usize % (order.len() / 32) == 0 {
            rng.shuffle(&mut order);
        }
        let start = (step as usize * 32) % (order.len() - 32);
        let batch: Vec<Example> = order[start..start + 32].iter().map(|&i| p.split.train[i].clone()).collect();
        train_step(&mut model, &space, &batch, &mut state, &opt, 3e-3, rng.fork(step)).unwrap();
    }
    let fin = eval_loss(&model);
    assert!(fin < 0.8 * initial, "{initial} -> {fin}");
}

#[test]
fn training_is_deterministic_and_checkpoints_restore_exactly() {
    let (p, space) = data();
    let run = || train(SeqRecModel::new(tiny_config(Variant::Liger), &space).unwrap(), &space, &p.split, &quick(4, 3, 5), &infer()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.best, b.best);
    assert_eq!(a.history, b.history);
    assert_eq!(a.stop, StopReason::MaxEpochs);
    let best_epoch = a.history.iter().enumerate().max_by(|x, y| x.1.val_metric.total_cmp(&y.1.val_metric).then(y.0.cmp(&x.0))).unwrap().0;
    assert_eq!(a.best.epoch, best_epoch);

    let model = a.best.restore(&space).unwrap();
    let cold = p.catalog.cold_flags().to_vec();
    let metrics = |m: &SeqRecModel| {
        let frozen = Frozen::new(m, &space).unwrap();
        evaluate(&p.split.test, &cold, 10, |ex| recommend(&frozen, &ex.history, &infer())).unwrap()
    };
    let again = b.best.restore(&space).unwrap();
    assert_eq!(metrics(&model), metrics(&again));
}

#[test]
fn zero_patience_stops_after_one_epoch() {
    let (p, space) = data();
    let out = train(SeqRecModel::new(tiny_config(Variant::DenseSid), &space).unwrap(), &space, &p.split, &quick(1, 10, 0), &infer()).unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.stop, StopReason::Patience);
    assert_eq!(out.best.epoch, 0);
}

#[test]
fn different_seeds_change_the_run() {
    let (p, space) = data();
    let run = |s| train(SeqRecModel::new(tiny_config(Variant::Tiger), &space).unwrap(), &space, &p.split, &quick(s, 1, 5), &infer()).unwrap();
    assert_ne!(run(1).best.params, run(2).best.params);
}

#[test]
fn restore_rejects_mismatched_space() {
    let (p, space) = data();
    let out = train(SeqRecModel::new(tiny_config(Variant::Tiger), &space).unwrap(), &space, &p.split, &quick(1, 1, 5), &infer()).unwrap();
    let other = ItemSpace::new(&p.catalog, Some(tiny_sids(p.catalog.len(), 5, 2, 11))).unwrap();
    assert!(out.best.restore(&other).is_err());
}
