//! Shared fixtures for the benchmarks: a deterministic batch of synthetic
//! sequences and initialized parameters for the toy and deep configs.

use sptlab_core::datagen::{generate_sequence, Sequence, SPLIT_TRAIN};
use sptlab_core::model::{ModelConfig, ModelParams, PeVariant};
use sptlab_core::numeric::streams;
use sptlab_core::SeededRng;

pub struct Fixture {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub batch: Vec<Sequence>,
}

pub fn toy_fixture(batch: usize) -> Fixture {
    fixture(ModelConfig::toy(32), batch)
}

/// A depth-2 pre-norm model with MLP, closer to the full forward path.
pub fn deep_fixture(batch: usize) -> Fixture {
    let mut cfg = ModelConfig::toy(32);
    cfg.toy_mode = false;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.mlp_hidden = 64;
    cfg.pe_variant = PeVariant::Alibi;
    fixture(cfg, batch)
}

fn fixture(cfg: ModelConfig, batch: usize) -> Fixture {
    let params = ModelParams::init(&cfg, 0).expect("valid config");
    let batch = (0..batch)
        .map(|i| {
            let mut rng = SeededRng::from_stream(0, streams::sequence(SPLIT_TRAIN, i as u64));
            generate_sequence((i % 2) as usize, &mut rng)
        })
        .collect();
    Fixture { cfg, params, batch }
}
