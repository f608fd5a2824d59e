#![allow(dead_code)]

use seqrec_core::datasets::{Example, ItemCatalog, ItemId};
use seqrec_core::model::{ItemSpace, ModelConfig, SeqRecModel, Variant};
use seqrec_core::sid::SidTable;
use seqrec_core::{Rng, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform() * 2.0 - 1.0;
    }
    t
}

pub fn tiny_catalog(n: usize, dim: usize, seed: u64, cold: &[usize]) -> ItemCatalog {
    let keys = (0..n).map(|i| format!("i{i}")).collect();
    let mut cat = ItemCatalog::new(keys, random_tensor(&[n, dim], seed)).unwrap();
    cat.set_cold(&cold.iter().map(|&i| ItemId::from(i)).collect());
    cat
}

/// Distinct random code tuples over `levels` × `t` (collisions resolved by dedup).
pub fn tiny_sids(n: usize, t: usize, levels: usize, seed: u64) -> SidTable {
    let mut rng = Rng::seed_from_u64(seed);
    let codes = (0..n).map(|_| (0..levels).map(|_| rng.below(t)).collect()).collect();
    SidTable::from_codes(codes, levels, t).unwrap()
}

pub fn tiny_space(n: usize, seed: u64, cold: &[usize]) -> ItemSpace {
    let cat = tiny_catalog(n, 6, seed, cold);
    ItemSpace::new(&cat, Some(tiny_sids(n, 4, 2, seed + 1))).unwrap()
}

pub fn tiny_config(variant: Variant) -> ModelConfig {
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

pub fn tiny_model(variant: Variant, space: &ItemSpace) -> SeqRecModel {
    SeqRecModel::new(tiny_config(variant), space).unwrap()
}

pub fn random_examples(n_items: usize, count: usize, max_len: usize, seed: u64) -> Vec<Example> {
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
