//! Masking and the two training objectives: masked reconstruction and
//! classification cross-entropy, each returning its loss together with the
//! upstream gradient the backward pass consumes.

use crate::datagen::Sequence;
use crate::error::{Error, Result};
use crate::model::InputKind;
use crate::numeric::{Matrix, SeededRng};

/// Masking policy: the fraction of valid positions hidden per sequence.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskSpec {
    pub fraction: f64,
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::InvalidArgument(format!(
                "mask fraction must be in [0,1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Sample mask positions for one sequence: `round(fraction · pad_len)`
/// positions (at least 1 whenever fraction > 0), uniform without replacement
/// among the valid prefix, sorted. Deterministic given the rng stream.
pub fn sample_mask(seq: &Sequence, spec: &MaskSpec, rng: &mut SeededRng) -> Result<Vec<usize>> {
    spec.validate()?;
    if spec.fraction == 0.0 {
        return Ok(Vec::new());
    }
    let n = seq.pad_len;
    let k = ((spec.fraction * n as f64).round() as usize).clamp(1, n);
    Ok(rng.sample_indices(n, k))
}

/// Reconstruction targets: the original (unmasked) input elements.
#[derive(Debug, Clone, Copy)]
pub enum SptTargets<'a> {
    /// Continuous targets, one row per position; loss is `½‖r−u‖²`.
    Continuous(&'a Matrix),
    /// Token-id targets; loss is `−log softmax(r)_u`.
    Discrete(&'a [usize]),
}

/// Sum (not mean) of the per-position reconstruction loss over `mask_rows`,
/// plus the gradient of that sum w.r.t. `preds`. Row indices address rows of
/// `preds` directly, so batched callers pass stacked row offsets.
pub fn spt_loss_sum(
    preds: &Matrix,
    targets: SptTargets,
    mask_rows: &[usize],
) -> Result<(f64, Matrix)> {
    let mut grad = Matrix::zeros(preds.rows(), preds.cols());
    let mut loss = 0.0;
    match targets {
        SptTargets::Continuous(u) => {
            if u.shape() != preds.shape() {
                return Err(Error::Shape(format!(
                    "targets {:?} vs predictions {:?}",
                    u.shape(),
                    preds.shape()
                )));
            }
            for &t in mask_rows {
                let (r, ut) = (preds.row(t), u.row(t));
                let g = grad.row_mut(t);
                for j in 0..r.len() {
                    let diff = r[j] - ut[j];
                    loss += 0.5 * diff * diff;
                    g[j] = diff;
                }
            }
        }
        SptTargets::Discrete(ids) => {
            if ids.len() != preds.rows() {
                return Err(Error::Shape(format!(
                    "{} target ids for {} prediction rows",
                    ids.len(),
                    preds.rows()
                )));
            }
            for &t in mask_rows {
                let id = ids[t];
                if id >= preds.cols() {
                    return Err(Error::InvalidArgument(format!(
                        "target token {} out of vocab {}",
                        id,
                        preds.cols()
                    )));
                }
                let r = preds.row(t);
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
                loss += -(r[id] - max - z.ln());
                let g = grad.row_mut(t);
                for j in 0..r.len() {
                    g[j] = (r[j] - max).exp() / z - if j == id { 1.0 } else { 0.0 };
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Mean reconstruction loss over one sequence's mask (the per-sequence
/// surface; trainers use [`spt_loss_sum`] and normalize by the batch-wide
/// mask count instead). Errors on an empty mask.
pub fn spt_loss(preds: &Matrix, targets: SptTargets, mask: &[usize]) -> Result<(f64, Matrix)> {
    if mask.is_empty() {
        return Err(Error::InvalidArgument(
            "reconstruction loss needs a non-empty mask".into(),
        ));
    }
    let (sum, mut grad) = spt_loss_sum(preds, targets, mask)?;
    let inv = 1.0 / mask.len() as f64;
    grad.scale(inv);
    Ok((sum * inv, grad))
}

/// Reconstruction loss for a whole forward batch, normalized by the total
/// masked-position count across the batch. Returns the loss and the upstream
/// gradient shaped like the stacked predictions.
pub fn batch_spt_loss(
    seqs: &[&Sequence],
    masks: &[Vec<usize>],
    preds: &Matrix,
    input_kind: InputKind,
    seq_len: usize,
) -> Result<(f64, Matrix)> {
    let total: usize = masks.iter().map(|m| m.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "batch has no masked positions".into(),
        ));
    }
    let rows: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(b, m)| m.iter().map(move |&t| b * seq_len + t))
        .collect();
    let (sum, mut grad) = match input_kind {
        InputKind::Continuous { dim } => {
            let mut stacked = Matrix::zeros(seqs.len() * seq_len, dim);
            for (b, seq) in seqs.iter().enumerate() {
                let x = seq
                    .continuous()
                    .ok_or_else(|| Error::Data("continuous loss on token data".into()))?;
                for t in 0..seq_len {
                    stacked.row_mut(b * seq_len + t).copy_from_slice(x.row(t));
                }
            }
            spt_loss_sum(preds, SptTargets::Continuous(&stacked), &rows)?
        }
        InputKind::Token { .. } => {
            let mut ids = Vec::with_capacity(seqs.len() * seq_len);
            for seq in seqs {
                ids.extend_from_slice(
                    seq.tokens()
                        .ok_or_else(|| Error::Data("token loss on continuous data".into()))?,
                );
            }
            spt_loss_sum(preds, SptTargets::Discrete(&ids), &rows)?
        }
    };
    let inv = 1.0 / total as f64;
    grad.scale(inv);
    Ok((sum * inv, grad))
}

/// Cross-entropy of one logit vector: `−log softmax(logits)[label]` and its
/// gradient `softmax(logits) − onehot(label)`.
pub fn cls_loss(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} classes",
            label,
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let loss = -(logits[label] - max - z.ln());
    let grad = logits
        .iter()
        .enumerate()
        .map(|(j, v)| (v - max).exp() / z - if j == label { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// Mean cross-entropy over a logit batch plus the 1/B-scaled upstream
/// gradient, and the fraction of rows whose argmax equals the label.
pub fn batch_cls_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix, f64)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let b = labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let (l, g) = cls_loss(logits.row(i), label)?;
        loss += l;
        for (dst, src) in grad.row_mut(i).iter_mut().zip(&g) {
            *dst = src / b;
        }
        if argmax(logits.row(i)) == label {
            correct += 1;
        }
    }
    Ok((loss / b, grad, correct as f64 / b))
}

/// Index of the row maximum; ties resolve to the earliest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
