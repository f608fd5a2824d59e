//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use seqrec_core::datasets::{preprocess, synth_generate, Example, ItemCatalog, ItemId, PreprocessConfig, SynthConfig};
use seqrec_core::eval::{ndcg_at_k, recall_at_k};
use seqrec_core::genret::{search, sequence_log_prob, BeamOptions};
use seqrec_core::gradcheck::{check_inputs, check_params, GradCheckReport};
use seqrec_core::hybrid::{liger_infer, InferenceConfig};
use seqrec_core::infer::Frozen;
use seqrec_core::model::{BatchForward, ItemSpace, ModelConfig, SeqRecModel, Variant};
use seqrec_core::nn::{Encoder, Fwd, TransformerConfig};
use seqrec_core::optim::{AdamState, AdamWConfig};
use seqrec_core::sid::{assign_semantic_ids, train_rqvae, RqVae, RqVaeConfig, SidTable};
use seqrec_core::train::train_step;
use seqrec_core::{ParamId, ParamStore, Result as CoreResult, Rng, Tape, Tensor, Var};
use seqrec_lab::pipeline::{self, Session, COLDSTART_CSV, EVAL_CSV, NPG_CSV};
use seqrec_lab::report::{read_csv, ColdStartRow, EvalRow, NpgRow};
use seqrec_lab::{LoadedConfig, WriteMode};

type Check = Result<String, String>;

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform() * 2.0 - 1.0;
    }
    t
}

fn random_examples(n_items: usize, count: usize, max_len: usize, seed: u64) -> Vec<Example> {
    let mut rng = Rng::seed_from_u64(seed);
    (0..count)
        .map(|user| {
            let len = 1 + rng.below(max_len);
            Example {
                user,
                history: (0..len).map(|_| ItemId::from(rng.below(n_items))).collect(),
                label: ItemId::from(rng.below(n_items)),
            }
        })
        .collect()
}

fn tiny_space(n: usize, levels: usize, t: usize, seed: u64, cold: &[usize]) -> ItemSpace {
    let keys = (0..n).map(|i| format!("i{i}")).collect();
    let mut cat = ItemCatalog::new(keys, random_tensor(&[n, 6], seed)).unwrap();
    cat.set_cold(&cold.iter().map(|&i| ItemId::from(i)).collect());
    let mut rng = Rng::seed_from_u64(seed + 1);
    let codes = (0..n).map(|_| (0..levels).map(|_| rng.below(t)).collect()).collect();
    ItemSpace::new(&cat, Some(SidTable::from_codes(codes, levels, t).unwrap())).unwrap()
}

fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        ffn_hidden: 12,
        dropout: 0.1,
        input_dropout: 0.1,
        max_items: 5,
        seed: 11,
        ..ModelConfig::standard(variant)
    }
}

// ---------------------------------------------------------------- 1

struct GradTally {
    worst: f64,
    worst_name: String,
    checks: usize,
    coords: usize,
}

impl GradTally {
    fn add(&mut self, name: &str, r: CoreResult<GradCheckReport>) -> Result<(), String> {
        let r = r.map_err(|e| format!("{name}: {e}"))?;
        ensure(r.checked > 0, || format!("{name}: nothing checked"))?;
        self.checks += 1;
        self.coords += r.checked;
        if r.max_rel_error > self.worst {
            self.worst = r.max_rel_error;
            self.worst_name = name.to_string();
        }
        ensure(r.max_rel_error < GRAD_TOL, || format!("{name}: relative error {:.3e}", r.max_rel_error))
    }
}

fn contract(t: &mut Tape, x: Var, seed: u64) -> CoreResult<Var> {
    let shape = t.value(x).shape().to_vec();
    let w = t.constant(random_tensor(&shape, seed));
    let y = t.mul(x, w)?;
    Ok(t.sum(y))
}

fn model_grad(
    variant: Variant,
    training: bool,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&SeqRecModel, &mut Fwd, &BatchForward) -> CoreResult<Var>,
) -> CoreResult<GradCheckReport> {
    let space = tiny_space(10, 3, 4, 70, &[3, 8]);
    let model = SeqRecModel::new(tiny_config(variant), &space)?;
    let batch = random_examples(10, 4, 5, 71);
    let ids: Vec<ParamId> = model.store.iter().filter(|(_, n, _)| select(n)).map(|(id, _, _)| id).collect();
    check_params(&model.store, &ids, 6, H, 99, |t, s| {
        let mut f = if training { Fwd::train(s, Rng::seed_from_u64(72)) } else { Fwd::eval(s) };
        let out = model.forward_batch(&mut f, &space, &batch)?;
        let l = loss(&model, &mut f, &out)?;
        *t = std::mem::replace(&mut f.tape, Tape::new());
        Ok(l)
    })
}

fn is_decoder(name: &str) -> bool {
    SeqRecModel::decoder_param_prefixes().iter().any(|p| name.starts_with(p))
}

fn criterion_gradients() -> Check {
    let mut g = GradTally { worst: 0.0, worst_name: String::new(), checks: 0, coords: 0 };
    let a = random_tensor(&[3, 4], 1);
    let b = random_tensor(&[3, 4], 2);
    let kink_free = {
        let mut t = a.clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.1 + v.abs()));
        t
    };
    g.add("matmul", check_inputs(&[a.clone(), random_tensor(&[4, 5], 3)], H, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        contract(t, y, 9)
    }))?;
    g.add("matmul_nt", check_inputs(&[a.clone(), random_tensor(&[5, 4], 4)], H, |t, v| {
        let y = t.matmul_nt(v[0], v[1])?;
        contract(t, y, 9)
    }))?;
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        g.add(name, check_inputs(&[a.clone(), b.clone()], H, |t, v| {
            let y = match op {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            contract(t, y, 10)
        }))?;
    }
    g.add("add_row", check_inputs(&[a.clone(), random_tensor(&[1, 4], 5)], H, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        contract(t, y, 11)
    }))?;
    g.add("scale", check_inputs(&[a.clone()], H, |t, v| {
        let y = t.scale(v[0], -2.5);
        contract(t, y, 12)
    }))?;
    g.add("relu", check_inputs(&[kink_free], H, |t, v| {
        let y = t.relu(v[0]);
        contract(t, y, 13)
    }))?;
    for causal in [false, true] {
        g.add("softmax_rows", check_inputs(&[random_tensor(&[4, 4], 14)], H, |t, v| {
            let y = t.softmax_rows(v[0], causal);
            contract(t, y, 15)
        }))?;
    }
    g.add(
        "layer_norm",
        check_inputs(&[random_tensor(&[3, 6], 16), random_tensor(&[1, 6], 17), random_tensor(&[1, 6], 18)], H, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            contract(t, y, 19)
        }),
    )?;
    g.add("dropout", check_inputs(&[random_tensor(&[4, 5], 20)], H, |t, v| {
        let y = t.dropout(v[0], 0.3, &mut Rng::seed_from_u64(21))?;
        contract(t, y, 22)
    }))?;
    let table = random_tensor(&[5, 3], 23);
    g.add("gather", check_inputs(&[table.clone()], H, |t, v| {
        let y = t.gather(v[0], &[4, 1, 1, 0])?;
        contract(t, y, 25)
    }))?;
    g.add("concat_cols", check_inputs(&[table.clone(), random_tensor(&[5, 2], 24)], H, |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        contract(t, y, 26)
    }))?;
    g.add("concat_rows", check_inputs(&[table.clone(), random_tensor(&[2, 3], 27)], H, |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        contract(t, y, 28)
    }))?;
    g.add("slice_cols", check_inputs(&[table], H, |t, v| {
        let y = t.slice_cols(v[0], 1, 2)?;
        contract(t, y, 29)
    }))?;
    for (name, op) in [("sum", 0), ("mean", 1), ("sum_squares", 2)] {
        g.add(name, check_inputs(&[a.clone()], H, |t, v| {
            let w = t.constant(random_tensor(&[3, 4], 31));
            let y = t.mul(v[0], w)?;
            Ok(match op {
                0 => t.sum(y),
                1 => t.mean(y),
                _ => t.sum_squares(y),
            })
        }))?;
    }
    g.add("normalize_rows", check_inputs(&[a.clone()], H, |t, v| {
        let y = t.normalize_rows(v[0])?;
        contract(t, y, 34)
    }))?;
    g.add("cosine_similarity", check_inputs(&[a, b], H, |t, v| {
        let y = t.cosine_similarity(v[0], v[1])?;
        contract(t, y, 35)
    }))?;
    g.add(
        "softmax_cross_entropy",
        check_inputs(&[random_tensor(&[4, 6], 36)], H, |t, v| t.softmax_cross_entropy(v[0], &[0, 5, 2, 2])),
    )?;

    // A full encoder block with random LayerNorm parameters.
    let mut store = ParamStore::new();
    let cfg = TransformerConfig { layers: 1, d_model: 6, heads: 2, ffn_hidden: 8, dropout: 0.0, max_len: 5, final_norm: true };
    let enc = Encoder::new(&mut store, "enc", cfg, &mut Rng::seed_from_u64(40)).map_err(err)?;
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, random_tensor(&shape, 41 + id.0 as u64));
    }
    let x = random_tensor(&[4, 6], 60);
    let ids: Vec<_> = store.ids().collect();
    g.add("encoder", check_params(&store, &ids, 6, H, 99, |t, s| {
        let mut f = Fwd::eval(s);
        let xv = f.tape.constant(x.clone());
        let y = enc.forward(&mut f, xv)?;
        let out = contract(&mut f.tape, y, 61)?;
        *t = std::mem::replace(&mut f.tape, Tape::new());
        Ok(out)
    }))?;

    let full = |m: &SeqRecModel, f: &mut Fwd, o: &BatchForward| m.combine_losses(f, o).map(|(l, _)| l);
    for v in Variant::ALL.into_iter().filter(|&v| v != Variant::LigerDetach) {
        g.add(v.name(), model_grad(v, false, |_| true, full))?;
    }
    g.add("liger (dropout active)", model_grad(Variant::Liger, true, |_| true, full))?;
    // The detached variant's shared parameters receive only the dense-loss gradient.
    g.add("liger_detach decoder", model_grad(Variant::LigerDetach, false, is_decoder, full))?;
    g.add(
        "liger_detach shared",
        model_grad(Variant::LigerDetach, false, |n| !is_decoder(n), |m, f, o| m.dense_loss(f, o)),
    )?;

    // RQ-VAE: decoder against the total loss; straight-through paths against the terms they reach exactly.
    let cfg = RqVaeConfig { input_dim: 6, hidden: vec![5, 4], levels: 3, codebook_size: 4, seed: 80, ..Default::default() };
    let mut vae = RqVae::new(cfg).map_err(err)?;
    for id in vae.store.ids().collect::<Vec<_>>() {
        let shape = vae.store.get(id).shape().to_vec();
        vae.store.set(id, random_tensor(&shape, 90 + id.0 as u64));
    }
    let x = random_tensor(&[8, 6], 81);
    vae.kmeans_init(&x, &mut Rng::seed_from_u64(82)).map_err(err)?;
    let named = |prefix: &str| -> Vec<ParamId> {
        vae.store.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect()
    };
    for (name, prefix, term) in [("rq-vae decoder", "rq.dec.", 0), ("rq-vae codebook", "rq.codebook.2", 1), ("rq-vae encoder", "rq.enc.", 2)] {
        g.add(name, check_params(&vae.store, &named(prefix), 8, H, 83, |t, s| {
            let probe = RqVae { store: s.clone(), ..vae.clone() };
            let mut f = Fwd::eval(&probe.store);
            let xv = f.tape.constant(x.clone());
            let out = match term {
                0 => probe.loss(&mut f, xv)?.0,
                1 => probe.loss_terms(&mut f, xv)?.codebook,
                _ => probe.loss_terms(&mut f, xv)?.commitment,
            };
            *t = std::mem::replace(&mut f.tape, Tape::new());
            Ok(out)
        }))?;
    }
    Ok(format!("{} checks, {} coordinates, max rel. error {:.2e} ({})", g.checks, g.coords, g.worst, g.worst_name))
}

// ---------------------------------------------------------------- 2

fn criterion_beam_oracle() -> Check {
    let n = 40;
    let space = tiny_space(n, 2, 4, 5, &[]);
    let mut model = SeqRecModel::new(tiny_config(Variant::Tiger), &space).map_err(err)?;
    let data = random_examples(n, 64, 5, 6);
    let opt = AdamWConfig::new(1e-2, 0.0);
    let mut state = AdamState::new(&model.store);
    let rng = Rng::seed_from_u64(7);
    for step in 0..150 {
        let batch = &data[(step * 16) % 64..(step * 16) % 64 + 16];
        train_step(&mut model, &space, batch, &mut state, &opt, 1e-2, rng.fork(step as u64)).map_err(err)?;
    }
    let frozen = Frozen::new(&model, &space).map_err(err)?;
    let sids = space.sids().map_err(err)?;
    let trie = space.trie().map_err(err)?;
    let (mut searches, mut worst) = (0usize, 0.0f64);
    for ex in random_examples(n, 6, 5, 8) {
        let memory = frozen.encode(&ex.history).map_err(err)?;
        let mut oracle: Vec<(Vec<usize>, f64, ItemId)> = (0..n)
            .map(|i| {
                let tokens = sids.tokens(ItemId::from(i)).unwrap();
                let lp = sequence_log_prob(&model, &memory, &tokens).unwrap();
                (tokens, lp, ItemId::from(i))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for k in 1..=n {
            let res = search(&model, trie, &memory, k, BeamOptions::default()).map_err(err)?;
            ensure(res.hyps.len() == k, || format!("K={k}: {} results", res.hyps.len()))?;
            for (hyp, (tokens, lp, item)) in res.hyps.iter().zip(&oracle) {
                ensure(&hyp.tokens == tokens && hyp.item == Some(*item), || format!("K={k}: order differs from enumeration"))?;
                worst = worst.max((hyp.log_prob - lp).abs());
            }
            searches += 1;
        }
    }
    ensure(worst < 1e-10, || format!("score gap {worst:.2e}"))?;
    Ok(format!("{n} items, t=4, m=2, {searches} searches, max score gap {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn criterion_metrics() -> Check {
    let mut rng = Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = 1 + rng.below(60);
        let mut list: Vec<ItemId> = (0..n).map(ItemId::from).collect();
        rng.shuffle(&mut list);
        let label = ItemId::from(rng.below(n + 5));
        let pos = list.iter().take(10).position(|&i| i == label);
        let recall = if pos.is_some() { 1.0 } else { 0.0 };
        // DCG over the top 10 with binary relevance; the ideal DCG is 1.
        let ndcg: f64 = list
            .iter()
            .take(10)
            .enumerate()
            .map(|(i, &item)| if item == label { 1.0 / (i as f64 + 2.0).log2() } else { 0.0 })
            .sum();
        ensure(recall_at_k(&list, label, 10) == recall, || "Recall@10 differs from brute force".into())?;
        ensure(ndcg_at_k(&list, label, 10) == ndcg, || "NDCG@10 differs from brute force".into())?;
    }
    let list: Vec<ItemId> = (0..10).map(ItemId::from).collect();
    ensure(ndcg_at_k(&list, ItemId(0), 10) == 1.0, || "perfect ranking NDCG != 1".into())?;
    ensure(ndcg_at_k(&list, ItemId(2), 10) == 0.5, || "rank-3 NDCG != 0.5".into())?;
    Ok("1000 random rankings exact; NDCG(rank 1) = 1, NDCG(rank 3) = 0.5".into())
}

// ---------------------------------------------------------------- 4

fn criterion_sid_integrity() -> Check {
    let mut synth = SynthConfig::new(11, 2400, 1040, 8);
    synth.n_cold = 30;
    let (log, raw, _) = synth_generate(&synth).map_err(err)?;
    let data = preprocess(&log, &raw, &PreprocessConfig::default()).map_err(err)?;
    let cat = &data.catalog;
    let cold: BTreeSet<ItemId> = cat.cold_items().into_iter().collect();
    ensure(cat.len() >= 1000, || format!("only {} items after preprocessing", cat.len()))?;
    ensure(!cold.is_empty(), || "no cold items".into())?;
    let cfg = RqVaeConfig { hidden: vec![128, 64, 32], codebook_size: 32, epochs: 100, batch_size: 64, seed: 3, ..Default::default() };
    let (vae, hist) = train_rqvae(cat, &cfg).map_err(err)?;
    let leaked = hist.trained_on.iter().filter(|i| cold.contains(i)).count();
    ensure(leaked == 0, || format!("{leaked} cold items in quantizer training"))?;
    ensure(hist.trained_on.len() + cold.len() == cat.len(), || "training set is not the warm catalog".into())?;
    let table = assign_semantic_ids(cat, &vae).map_err(err)?;
    let tuples: BTreeSet<Vec<usize>> = (0..cat.len()).map(|i| table.get(ItemId::from(i)).unwrap().as_tuple()).collect();
    ensure(tuples.len() == cat.len(), || format!("{} distinct 4-tuples for {} items", tuples.len(), cat.len()))?;
    let (first, last) = (hist.recon[0], *hist.recon.last().unwrap());
    ensure(last * 5.0 <= first, || format!("reconstruction {first:.2} -> {last:.2}"))?;
    Ok(format!(
        "{} items ({} cold, none trained on), all 4-tuples unique, reconstruction {first:.1} -> {last:.2} ({:.0}x)",
        cat.len(),
        cold.len(),
        first / last
    ))
}

// ---------------------------------------------------------------- desk benchmark

/// The bundled synthetic benchmark, run once through the pipeline.
struct Desk {
    _tmp: tempfile::TempDir,
    session: Session,
    data: pipeline::Processed,
    stage_time: BTreeMap<String, Duration>,
}

impl Desk {
    fn run() -> Result<Self, String> {
        let tmp = tempfile::tempdir().map_err(err)?;
        let cfg = LoadedConfig::load(&repo_file("configs/synthetic.json")).map_err(err)?;
        let session = Session::open(cfg, 0, tmp.path(), WriteMode::Normal).map_err(err)?;
        let mut stage_time = BTreeMap::new();
        let mut timed = |name: &str, f: &dyn Fn() -> seqrec_lab::Result<()>| -> Result<(), String> {
            let t = Instant::now();
            f().map_err(|e| format!("{name}: {e}"))?;
            stage_time.insert(name.to_string(), t.elapsed());
            Ok(())
        };
        timed("preprocess", &|| pipeline::cmd_preprocess(&session).map(drop))?;
        timed("train-rqvae", &|| pipeline::cmd_train_rqvae(&session).map(drop))?;
        timed("assign-sids", &|| pipeline::cmd_assign_sids(&session).map(drop))?;
        for v in session.cfg.config.variants.clone() {
            timed(&format!("train-{v}"), &|| pipeline::cmd_train(&session, Some(v)).map(drop))?;
        }
        timed("evaluate", &|| pipeline::cmd_evaluate(&session).map(drop))?;
        timed("coldstart", &|| pipeline::cmd_coldstart(&session, None).map(drop))?;
        timed("npg", &|| pipeline::cmd_npg(&session, None).map(drop))?;
        let data = session.load_processed().map_err(err)?;
        Ok(Desk { _tmp: tmp, session, data, stage_time })
    }

    fn time_of(&self, stages: &[&str]) -> Duration {
        stages.iter().map(|s| self.stage_time.get(*s).copied().unwrap_or_default()).sum()
    }

    fn eval_rows(&self) -> Result<Vec<EvalRow>, String> {
        read_csv(&self.session.run.path(EVAL_CSV)).map_err(err)
    }

    fn metric(&self, rows: &[EvalRow], v: Variant, split: &str) -> Result<f64, String> {
        rows.iter()
            .find(|r| r.variant == v.name() && r.split == split && r.metric == "recall")
            .map(|r| r.value)
            .ok_or_else(|| format!("no {split} recall row for {v}"))
    }
}

const SHARED: [&str; 3] = ["preprocess", "train-rqvae", "assign-sids"];

fn criterion_coldstart(desk: &Desk) -> Result<(String, Duration), String> {
    let rows = desk.eval_rows()?;
    let tiger_cold = desk.metric(&rows, Variant::Tiger, "cold")?;
    let liger_cold = desk.metric(&rows, Variant::Liger, "cold")?;
    let cs: Vec<ColdStartRow> = read_csv(&desk.session.run.path(COLDSTART_CSV)).map_err(err)?;
    let at10 = cs.iter().find(|r| r.variant == "tiger" && r.k == 10).ok_or("no K=10 cold-start row")?;
    let cold_items = desk.data.catalog.cold_items().len();
    let time = desk.time_of(&[&SHARED[..], &["train-tiger", "train-liger", "evaluate", "coldstart"]].concat());
    let detail = format!(
        "{cold_items} cold items; TIGER K=10 cold R@10 {tiger_cold:.4}, p_diff>0 on {:.1}% of {} cold queries; LIGER cold R@10 {liger_cold:.4}",
        100.0 * at10.missed_fraction,
        at10.queries
    );
    ensure(cold_items >= 20, || format!("{detail}: fewer than 20 cold items"))?;
    ensure(tiger_cold == 0.0, || format!("{detail}: TIGER cold recall is not 0"))?;
    ensure(at10.missed_fraction >= 0.95, || format!("{detail}: p_diff > 0 below 95%"))?;
    ensure(liger_cold > 0.0, || format!("{detail}: LIGER cold recall is 0"))?;
    Ok((detail, time))
}

fn criterion_npg(desk: &Desk) -> Result<(String, Duration), String> {
    let rows: Vec<NpgRow> = read_csv(&desk.session.run.path(NPG_CSV)).map_err(err)?;
    let n = desk.data.catalog.len();
    let ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    let time = desk.time_of(&[&SHARED[..], &["train-tiger", "train-dense_sid", "train-liger", "evaluate", "npg"]].concat());
    let curve = rows.iter().map(|r| format!("{}:{:.3}", r.k, r.npg)).collect::<Vec<_>>().join(" ");
    ensure(ks == [10, 20, 40, 80, n], || format!("sweep Ks {ks:?}"))?;
    let inversions: Vec<f64> = rows.windows(2).filter(|w| w[1].npg < w[0].npg).map(|w| w[0].npg - w[1].npg).collect();
    let last = rows.last().unwrap().npg;
    let detail = format!("NPG {curve} (N={n})");
    ensure(inversions.len() <= 1 && inversions.iter().all(|&d| d <= 0.05), || format!("{detail}: inversions {inversions:?}"))?;
    ensure(last >= 0.8, || format!("{detail}: NPG(N) < 0.8"))?;
    Ok((detail, time))
}

fn criterion_ablation(desk: &Desk) -> Result<(String, Duration), String> {
    let rows = desk.eval_rows()?;
    let variants: BTreeSet<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    ensure(variants == Variant::ALL.iter().map(|v| v.name()).collect(), || format!("evaluated variants {variants:?}"))?;
    let tiger = desk.metric(&rows, Variant::Tiger, "in_set")?;
    let tiger_t = desk.metric(&rows, Variant::TigerT, "in_set")?;
    let grid = Variant::ALL
        .iter()
        .map(|&v| desk.metric(&rows, v, "in_set").map(|r| format!("{v} {r:.3}")))
        .collect::<Result<Vec<_>, _>>()?
        .join(", ");

    // Gradients of the trained detached model: shared parameters must carry
    // exactly the dense-loss gradient of the same weights without detaching.
    let (det, space) = desk.session.load_model(Variant::LigerDetach, &desk.data).map_err(err)?;
    let mut attached = det.clone();
    attached.cfg.variant = Variant::Liger;
    let batch: Vec<Example> = desk.data.split.train.iter().take(32).cloned().collect();
    let grads = |m: &SeqRecModel, dense_only: bool| -> CoreResult<Vec<Option<Vec<f64>>>> {
        let mut f = Fwd::eval(&m.store);
        let loss = if dense_only {
            let out = m.forward_batch(&mut f, &space, &batch)?;
            m.dense_loss(&mut f, &out)?
        } else {
            m.loss(&mut f, &space, &batch)?.0
        };
        let g = f.tape.backward(loss)?;
        Ok(m.store.ids().map(|id| g.params().find(|(p, _)| *p == id).and_then(|(_, v)| v.map(|v| v.to_vec()))).collect())
    };
    let det_total = grads(&det, false).map_err(err)?;
    let dense_only = grads(&attached, true).map_err(err)?;
    let attached_total = grads(&attached, false).map_err(err)?;
    let (mut shared, mut worst, mut ntp_reaches) = (0usize, 0.0f64, false);
    for (i, (_, name, t)) in det.store.iter().enumerate() {
        if is_decoder(name) {
            continue;
        }
        shared += 1;
        let flat = |v: &Option<Vec<f64>>, len: usize| v.clone().unwrap_or_else(|| vec![0.0; len]);
        let len = t.data().len();
        let (a, b, c) = (flat(&det_total[i], len), flat(&dense_only[i], len), flat(&attached_total[i], len));
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            worst = worst.max((x - y).abs());
            ntp_reaches |= (z - y).abs() > 1e-8;
        }
    }
    let detail = format!(
        "in-set R@10: {grid}; detached shared-parameter gradient = dense-only gradient on {shared} tensors (max gap {worst:.1e})"
    );
    ensure(tiger_t >= tiger - 0.01, || format!("{detail}: tiger_t {tiger_t:.4} < tiger {tiger:.4} - 0.01"))?;
    ensure(worst < 1e-10, || format!("{detail}: next-token gradient leaks into shared parameters"))?;
    ensure(ntp_reaches, || format!("{detail}: comparison is vacuous, next-token loss never reaches shared parameters"))?;
    Ok((detail, desk.stage_time.values().sum()))
}

fn criterion_degenerate(desk: &Desk) -> Check {
    let (model, space) = desk.session.load_model(Variant::Liger, &desk.data).map_err(err)?;
    let frozen = Frozen::new(&model, &space).map_err(err)?;
    let n = space.n_items();
    let cfg = InferenceConfig { k: n, include_cold: false, final_k: n, ..desk.session.cfg.config.inference.base() };
    let queries: Vec<&Example> = desk.data.split.test.iter().take(500).collect();
    ensure(queries.len() == 500, || format!("only {} test queries", queries.len()))?;
    for ex in &queries {
        let hybrid = liger_infer(&frozen, &ex.history, &cfg).map_err(err)?;
        let dense = frozen.dense_top_k(&ex.history, n).map_err(err)?;
        ensure(hybrid.ranking.items == dense.items, || format!("user {}: rankings differ", ex.user))?;
    }
    Ok(format!("{} queries, full {n}-item rankings identical", queries.len()))
}

fn criterion_nesting(desk: &Desk) -> Check {
    let (model, space) = desk.session.load_model(Variant::Liger, &desk.data).map_err(err)?;
    let frozen = Frozen::new(&model, &space).map_err(err)?;
    let ks = [5, 10, 20, 40];
    let base = desk.session.cfg.config.inference.base();
    let mut covered = [0usize; 4];
    let test = &desk.data.split.test;
    for ex in test {
        let mut prev: Option<BTreeSet<ItemId>> = None;
        for (slot, &k) in ks.iter().enumerate() {
            let out = liger_infer(&frozen, &ex.history, &InferenceConfig { k, include_cold: true, ..base }).map_err(err)?;
            let set: BTreeSet<ItemId> = out.candidates.into_iter().collect();
            if let Some(p) = &prev {
                ensure(p.is_subset(&set), || format!("user {}: candidates at K={k} miss some of the smaller K", ex.user))?;
            }
            covered[slot] += usize::from(set.contains(&ex.label));
            prev = Some(set);
        }
    }
    let rates: Vec<f64> = covered.iter().map(|&c| c as f64 / test.len() as f64).collect();
    ensure(rates.windows(2).all(|w| w[0] <= w[1]), || format!("coverage {rates:?}"))?;
    let shown = ks.iter().zip(&rates).map(|(k, r)| format!("{k}:{r:.3}")).collect::<Vec<_>>().join(" ");
    Ok(format!("{} queries nest at every K; Pr[label in candidates] {shown}", test.len()))
}

fn criterion_embedding_rows(desk: &Desk) -> Check {
    let n = desk.data.catalog.len();
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let (model, _) = desk.session.load_model(v, &desk.data).map_err(err)?;
        let rows = model.learnable_embedding_rows();
        let direct = model.store.iter().filter(|(_, name, _)| *name == "token_emb" || *name == "item_emb").map(|(_, _, t)| t.rows()).sum::<usize>();
        ensure(rows == direct, || format!("{v}: reported {rows} rows, parameters hold {direct}"))?;
        match v {
            Variant::DenseId => ensure(rows == n, || format!("dense_id has {rows} rows, catalog {n}"))?,
            Variant::Tiger | Variant::DenseSid | Variant::Liger => {
                let vocab = model.vocab.ok_or("SID model without vocabulary")?;
                let bound = vocab.levels * vocab.codebook_size + vocab.dedup_range;
                ensure(rows <= bound, || format!("{v}: {rows} rows > m*t + dedup {bound}"))?;
            }
            _ => {}
        }
        parts.push(format!("{v} {rows}"));
    }
    Ok(format!("N={n}; rows: {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 10

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_determinism() -> Check {
    let cfg = LoadedConfig::load(&repo_file("configs/smoke.json")).map_err(err)?;
    let mut trees = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().map_err(err)?;
        let s = Session::open(cfg.clone(), 0, tmp.path(), WriteMode::Normal).map_err(err)?;
        pipeline::run_pipeline(&s).map_err(err)?;
        let dir = s.run.dir().to_path_buf();
        drop(s);
        trees.push(tree(&dir));
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.keys().eq(b.keys()), || "the two runs wrote different files".into())?;
    let differing: Vec<_> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure(differing.is_empty(), || format!("differing files: {differing:?}"))?;
    let ckpts = a.keys().filter(|k| k.extension().is_some_and(|e| e == "ckpt")).count();
    let reports = a.keys().filter(|k| k.starts_with("reports")).count();
    Ok(format!("{} files byte-identical ({ckpts} checkpoints, {reports} reports)", a.len()))
}

// ---------------------------------------------------------------- runner

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    time: Duration,
    limit: Option<Duration>,
}

fn report(line: &Line) {
    let limit = line.limit.map_or(String::new(), |l| format!(" / limit {}s", l.as_secs()));
    println!(
        "[{}] {:>2}. {} ({:.1}s{limit}): {}",
        if line.pass { "PASS" } else { "FAIL" },
        line.id,
        line.name,
        line.time.as_secs_f64(),
        line.detail
    );
}

fn timed(id: usize, name: &'static str, limit: Option<u64>, f: impl FnOnce() -> Check) -> Line {
    let start = Instant::now();
    let result = f();
    finish(id, name, limit, result.map(|d| (d, start.elapsed())))
}

fn finish(id: usize, name: &'static str, limit: Option<u64>, result: Result<(String, Duration), String>) -> Line {
    let limit = limit.map(Duration::from_secs);
    let line = match result {
        Ok((detail, time)) => {
            let over = limit.is_some_and(|l| time > l);
            Line { id, name, pass: !over, detail: if over { format!("{detail}; over time limit") } else { detail }, time, limit }
        }
        Err(detail) => Line { id, name, pass: false, detail, time: Duration::ZERO, limit },
    };
    report(&line);
    line
}

fn main() {
    let mut lines = vec![
        timed(1, "gradient correctness", Some(60), criterion_gradients),
        timed(2, "beam search equals exhaustive enumeration", Some(60), criterion_beam_oracle),
        timed(3, "metric oracles", None, criterion_metrics),
        timed(4, "semantic ID integrity", Some(300), criterion_sid_integrity),
    ];
    let start = Instant::now();
    match Desk::run() {
        Ok(desk) => {
            println!("       synthetic benchmark pipeline: {:.1}s", start.elapsed().as_secs_f64());
            lines.push(timed(5, "K = N, no cold set equals dense ranking", None, || criterion_degenerate(&desk)));
            lines.push(timed(6, "candidate nesting over K", None, || criterion_nesting(&desk)));
            lines.push(finish(7, "cold-start mechanism", Some(600), criterion_coldstart(&desk)));
            lines.push(finish(8, "NPG interpolation trend", Some(900), criterion_npg(&desk)));
            lines.push(timed(9, "learnable embedding rows", None, || criterion_embedding_rows(&desk)));
            lines.push(finish(11, "ablation grid", None, criterion_ablation(&desk)));
        }
        Err(e) => {
            for (id, name) in [
                (5, "K = N, no cold set equals dense ranking"),
                (6, "candidate nesting over K"),
                (7, "cold-start mechanism"),
                (8, "NPG interpolation trend"),
                (9, "learnable embedding rows"),
                (11, "ablation grid"),
            ] {
                lines.push(finish(id, name, None, Err(format!("synthetic benchmark failed: {e}"))));
            }
        }
    }
    lines.push(timed(10, "end-to-end determinism", None, criterion_determinism));
    lines.sort_by_key(|l| l.id);
    let failed: Vec<usize> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!();
    println!("acceptance: {} of {} criteria pass", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
