//! Finite-difference gradient oracle shared by the gradient tests and the
//! acceptance suite.

#![allow(dead_code)]

use sptlab_core::datagen::{Sequence, SequenceInput};
use sptlab_core::model::{
    backward_pass, forward_classify_batch, forward_reconstruct_batch, InputKind, Mode,
    ModelConfig, ModelParams, PeVariant,
};
use sptlab_core::objectives::{batch_cls_loss, batch_spt_loss};
use sptlab_core::{Matrix, SeededRng};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// The FD oracle itself carries O(machine-ε/H) ≈ 1e-11 round-off noise, so
/// below this magnitude the comparison switches to an absolute tolerance of
/// `REL_TOL · DENOM_FLOOR` = 1e-10.
pub const DENOM_FLOOR: f64 = 1e-6;

pub const ALL_PE: [PeVariant; 6] = [
    PeVariant::AbsSin,
    PeVariant::Alibi,
    PeVariant::Rope,
    PeVariant::AbsAlibi,
    PeVariant::RopeAlibi,
    PeVariant::None,
];

/// A short ragged batch: three sequences of length 6 with pad lengths
/// 6, 4, 5, so padding paths are exercised too.
pub fn continuous_batch(dim: usize) -> Vec<Sequence> {
    let mut rng = SeededRng::from_stream(99, 0);
    let mut seqs = Vec::new();
    for (i, pad_len) in [6usize, 4, 5].into_iter().enumerate() {
        let mut x = Matrix::zeros(6, dim);
        for v in x.data_mut() {
            *v = rng.next_f64() * 2.0 - 1.0;
        }
        seqs.push(Sequence {
            input: SequenceInput::Continuous(x),
            label: Some(i % 2),
            pad_len,
        });
    }
    seqs
}

pub fn token_batch(vocab: usize) -> Vec<Sequence> {
    let mut rng = SeededRng::from_stream(98, 0);
    let mut seqs = Vec::new();
    for (i, pad_len) in [6usize, 4, 5].into_iter().enumerate() {
        let ids: Vec<usize> = (0..6)
            .map(|_| (rng.next_u64() % vocab as u64) as usize)
            .collect();
        seqs.push(Sequence {
            input: SequenceInput::Tokens(ids),
            label: Some(i % 2),
            pad_len,
        });
    }
    seqs
}

/// Masked positions per sequence, all inside the valid prefix.
pub fn masks_for_batch() -> Vec<Vec<usize>> {
    vec![vec![1, 3], vec![0, 2], vec![4]]
}

#[derive(Clone, Copy, PartialEq)]
pub enum Head {
    Classify,
    Reconstruct,
}

pub fn loss_of(params: &ModelParams, cfg: &ModelConfig, seqs: &[Sequence], head: Head) -> f64 {
    let refs: Vec<&Sequence> = seqs.iter().collect();
    match head {
        Head::Classify => {
            let labels: Vec<usize> = seqs.iter().map(|s| s.label.unwrap()).collect();
            let (logits, _) =
                forward_classify_batch(&refs, params, cfg, Mode::Train, &mut []).unwrap();
            batch_cls_loss(&logits, &labels).unwrap().0
        }
        Head::Reconstruct => {
            let masks = masks_for_batch();
            let (preds, cache) = forward_reconstruct_batch(
                &refs,
                masks.clone(),
                params,
                cfg,
                Mode::Train,
                &mut [],
            )
            .unwrap();
            batch_spt_loss(&refs, &masks, &preds, cfg.input_kind, cache.seq_len)
                .unwrap()
                .0
        }
    }
}

/// Worst relative error across every element of every trainable block.
pub fn max_rel_err(cfg: &ModelConfig, seqs: &[Sequence], head: Head) -> (f64, String) {
    let mut params = ModelParams::init(cfg, 5).unwrap();
    let refs: Vec<&Sequence> = seqs.iter().collect();

    let grads = match head {
        Head::Classify => {
            let labels: Vec<usize> = seqs.iter().map(|s| s.label.unwrap()).collect();
            let (logits, cache) =
                forward_classify_batch(&refs, &params, cfg, Mode::Train, &mut []).unwrap();
            let (_, upstream, _) = batch_cls_loss(&logits, &labels).unwrap();
            backward_pass(&cache, &params, &upstream).unwrap()
        }
        Head::Reconstruct => {
            let masks = masks_for_batch();
            let (preds, cache) = forward_reconstruct_batch(
                &refs,
                masks.clone(),
                &params,
                cfg,
                Mode::Train,
                &mut [],
            )
            .unwrap();
            let (_, upstream) =
                batch_spt_loss(&refs, &masks, &preds, cfg.input_kind, cache.seq_len).unwrap();
            backward_pass(&cache, &params, &upstream).unwrap()
        }
    };

    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let names: Vec<String> = grads.keys().cloned().collect();
    for name in names {
        let numel = params.get(&name).unwrap().numel();
        for k in 0..numel {
            let orig = params.get(&name).unwrap().data()[k];
            params.get_mut(&name).unwrap().data_mut()[k] = orig + H;
            let up = loss_of(&params, cfg, seqs, head);
            params.get_mut(&name).unwrap().data_mut()[k] = orig - H;
            let down = loss_of(&params, cfg, seqs, head);
            params.get_mut(&name).unwrap().data_mut()[k] = orig;

            let fd = (up - down) / (2.0 * H);
            let an = grads[&name].data()[k];
            let denom = an.abs().max(fd.abs()).max(DENOM_FLOOR);
            let rel = (an - fd).abs() / denom;
            if rel > worst {
                worst = rel;
                worst_at = format!("{}[{}]: analytic {:.3e} vs fd {:.3e}", name, k, an, fd);
            }
        }
    }
    (worst, worst_at)
}

pub fn deep_cfg(pe: PeVariant, input_kind: InputKind) -> ModelConfig {
    ModelConfig {
        depth: 2,
        width: 8,
        heads: 2,
        mlp_hidden: 12,
        num_classes: 2,
        pe_variant: pe,
        dropout_rate: 0.0,
        toy_mode: false,
        input_kind,
        mask_scheme: Default::default(),
    }
}

pub fn toy_cfg(pe: PeVariant) -> ModelConfig {
    let mut cfg = ModelConfig::toy(8);
    cfg.pe_variant = pe;
    cfg
}
