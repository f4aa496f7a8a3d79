//! Throughput of the training hot paths: batched classification
//! forward+backward, masked-reconstruction forward+backward, and the
//! optimizer update. Sequences are the synthetic task's L=100 inputs.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use sptlab_bench::{deep_fixture, toy_fixture, Fixture};
use sptlab_core::model::{backward_pass, forward_classify_batch, forward_reconstruct_batch, Mode};
use sptlab_core::numeric::streams;
use sptlab_core::objectives::{batch_cls_loss, batch_spt_loss, sample_mask, MaskSpec};
use sptlab_core::optimizer::{adamw_step, AdamWHyper, AdamWState, ParamSelection};
use sptlab_core::SeededRng;

const BATCH: usize = 16;

fn classify_step(fx: &Fixture) -> f64 {
    let refs: Vec<_> = fx.batch.iter().collect();
    let labels: Vec<usize> = fx.batch.iter().map(|s| s.label.unwrap()).collect();
    let (logits, cache) =
        forward_classify_batch(&refs, &fx.params, &fx.cfg, Mode::Train, &mut []).unwrap();
    let (loss, upstream, _) = batch_cls_loss(&logits, &labels).unwrap();
    let grads = backward_pass(&cache, &fx.params, &upstream).unwrap();
    loss + grads.len() as f64
}

fn reconstruct_step(fx: &Fixture) -> f64 {
    let refs: Vec<_> = fx.batch.iter().collect();
    let spec = MaskSpec { fraction: 0.15 };
    let masks: Vec<Vec<usize>> = fx
        .batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = SeededRng::from_stream(0, streams::mask_sampling(0, i as u64));
            sample_mask(s, &spec, &mut rng).unwrap()
        })
        .collect();
    let (preds, cache) = forward_reconstruct_batch(
        &refs,
        masks.clone(),
        &fx.params,
        &fx.cfg,
        Mode::Train,
        &mut [],
    )
    .unwrap();
    let (loss, upstream) =
        batch_spt_loss(&refs, &masks, &preds, fx.cfg.input_kind, cache.seq_len).unwrap();
    let grads = backward_pass(&cache, &fx.params, &upstream).unwrap();
    loss + grads.len() as f64
}

fn bench_forward_backward(c: &mut Criterion) {
    let toy = toy_fixture(BATCH);
    let deep = deep_fixture(BATCH);

    let mut group = c.benchmark_group("forward_backward");
    group.throughput(Throughput::Elements(BATCH as u64));
    group.bench_function("classify_toy", |b| b.iter(|| classify_step(&toy)));
    group.bench_function("classify_deep", |b| b.iter(|| classify_step(&deep)));
    group.bench_function("reconstruct_toy", |b| b.iter(|| reconstruct_step(&toy)));
    group.bench_function("reconstruct_deep", |b| b.iter(|| reconstruct_step(&deep)));
    group.finish();
}

fn bench_optimizer(c: &mut Criterion) {
    let fx = toy_fixture(BATCH);
    let refs: Vec<_> = fx.batch.iter().collect();
    let labels: Vec<usize> = fx.batch.iter().map(|s| s.label.unwrap()).collect();
    let (logits, cache) =
        forward_classify_batch(&refs, &fx.params, &fx.cfg, Mode::Train, &mut []).unwrap();
    let (_, upstream, _) = batch_cls_loss(&logits, &labels).unwrap();
    let grads = backward_pass(&cache, &fx.params, &upstream).unwrap();
    let hp = AdamWHyper::with_lr(1e-3);
    let frozen = ParamSelection::empty();

    c.bench_function("adamw_step", |b| {
        b.iter_batched(
            || (fx.params.clone(), AdamWState::new(&fx.cfg).unwrap()),
            |(mut params, mut state)| {
                adamw_step(&mut params, &grads, &mut state, &hp, &frozen).unwrap();
                params
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_forward_backward, bench_optimizer);
criterion_main!(benches);
