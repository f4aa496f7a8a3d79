//! Forward pass: encoder, positional encodings, pre-norm residual blocks
//! (or the stripped toy attention layer), pooling, and the two heads.
//!
//! The internal compute path is batched: `B` equal-length sequences are
//! stacked into `(B·L)×D` matrices so encoder/projection/MLP/norm work runs
//! as a few large GEMMs, while the attention core multiplies per-sequence
//! head slices in place via strided GEMM. Everything needed for an exact
//! backward pass is kept in [`BatchCache`].

use crate::datagen::Sequence;
use crate::error::{Error, Result};
use crate::model::config::{InputKind, ModelConfig};
use crate::model::params::ModelParams;
use crate::model::pe::{positional_encoding, rope_angles, rope_rotate};
use crate::numeric::{dgemm_strided, softmax_row_in_place, Matrix, SeededRng};

/// Sentinel in the cached token stream for a masked position (the encoder
/// emits the mask embedding there, no table row is read).
pub(crate) const MASKED_TOKEN: usize = usize::MAX;

/// Train mode draws dropout noise; eval mode never does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which head produced the cached forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Classify,
    Reconstruct,
}

/// LayerNorm intermediates needed for its backward.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub(crate) inv_std: Vec<f64>,
    pub(crate) xhat: Matrix,
}

/// Attention intermediates for one layer over the whole batch. Score and
/// attention matrices are indexed `b·H + h`.
#[derive(Debug, Clone)]
pub struct AttnCache {
    pub(crate) q: Matrix,
    pub(crate) k: Matrix,
    pub(crate) v: Matrix,
    /// Rotated copies when RoPE is active (these enter the score product).
    pub(crate) qr: Option<Matrix>,
    pub(crate) kr: Option<Matrix>,
    pub scores: Vec<Matrix>,
    pub attn: Vec<Matrix>,
    pub(crate) concat: Matrix,
}

/// Everything one residual block (or the toy attention layer) caches.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub(crate) ln1: Option<NormCache>,
    /// Attention input: LN1 output, or the raw block input in toy mode.
    pub(crate) zt: Matrix,
    pub attn: AttnCache,
    pub(crate) drop1: Option<Matrix>,
    pub(crate) ln2: Option<NormCache>,
    /// MLP input (LN2 output).
    pub(crate) mlp_in: Option<Matrix>,
    pub(crate) hid_pre: Option<Matrix>,
    pub(crate) hid_act: Option<Matrix>,
    pub(crate) drop2: Option<Matrix>,
}

/// Cached forward state for a batch, sufficient for an exact backward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub cfg: ModelConfig,
    pub mode: Mode,
    pub head: HeadKind,
    pub batch: usize,
    pub seq_len: usize,
    pub pad_lens: Vec<usize>,
    /// Stacked raw continuous input with masked rows zeroed (encoder grad).
    pub(crate) x_cont: Option<Matrix>,
    /// Stacked token ids with [`MASKED_TOKEN`] at masked rows.
    pub(crate) tokens: Option<Vec<usize>>,
    /// Masked positions per sequence (empty for classification).
    pub(crate) masks: Vec<Vec<usize>>,
    pub(crate) input_drop: Option<Matrix>,
    pub layers: Vec<LayerCache>,
    pub(crate) final_norm: Option<NormCache>,
    /// Head input: the final stacked representation `(B·L)×D`.
    pub z_final: Matrix,
    /// Pooled per-sequence representation `B×D` (classification only).
    pub(crate) pooled: Option<Matrix>,
}

/// LayerNorm over each row of `x` with the usual 1e-5 variance floor.
pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn layer_norm_forward(x: &Matrix, scale: &Matrix, offset: &Matrix) -> (Matrix, NormCache) {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / cols as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let (xh, o) = (xhat.row_mut(i), out.row_mut(i));
        for j in 0..cols {
            xh[j] = (r[j] - mean) * inv;
            o[j] = scale.at(0, j) * xh[j] + offset.at(0, j);
        }
    }
    (out, NormCache { inv_std, xhat })
}

/// Gradient of [`layer_norm_forward`]: returns `(dx, dscale, doffset)`.
pub(crate) fn layer_norm_backward(
    dy: &Matrix,
    cache: &NormCache,
    scale: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let (rows, cols) = dy.shape();
    let mut dx = Matrix::zeros(rows, cols);
    let mut dscale = Matrix::zeros(1, cols);
    let mut doffset = Matrix::zeros(1, cols);
    for i in 0..rows {
        let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
        let inv = cache.inv_std[i];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..cols {
            let dxh = dyr[j] * scale.at(0, j);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
            *dscale.at_mut(0, j) += dyr[j] * xh[j];
            *doffset.at_mut(0, j) += dyr[j];
        }
        mean_dxhat /= cols as f64;
        mean_dxhat_xhat /= cols as f64;
        let dxr = dx.row_mut(i);
        for j in 0..cols {
            let dxh = dyr[j] * scale.at(0, j);
            dxr[j] = inv * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dscale, doffset)
}

/// GELU in its tanh form, `0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// An inverted-dropout keep mask: entries are `0` or `1/(1−p)`. Drawn
/// row-major per sequence from that sequence's stream, in a fixed site
/// order (input, then per layer attention branch, then MLP branch), so a
/// training step's noise is a pure function of the streams.
fn draw_dropout(
    rows_per_seq: usize,
    cols: usize,
    batch: usize,
    p: f64,
    rngs: &mut [SeededRng],
) -> Matrix {
    let keep_scale = 1.0 / (1.0 - p);
    let mut m = Matrix::zeros(batch * rows_per_seq, cols);
    for b in 0..batch {
        let rng = &mut rngs[b];
        for i in 0..rows_per_seq {
            let row = m.row_mut(b * rows_per_seq + i);
            for v in row.iter_mut() {
                *v = if rng.next_f64() >= p { keep_scale } else { 0.0 };
            }
        }
    }
    m
}

#[inline]
fn mul_elementwise(x: &Matrix, mask: &Matrix) -> Matrix {
    let mut out = x.clone();
    for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
        *o *= m;
    }
    out
}

/// Attention for one layer over the stacked batch input `zt` (`(B·L)×D`).
pub(crate) fn attention_stack_forward(
    zt: &Matrix,
    params: &ModelParams,
    layer: usize,
    cfg: &ModelConfig,
    pad_lens: &[usize],
    seq_len: usize,
) -> Result<(Matrix, AttnCache)> {
    let d = cfg.width;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let batch = pad_lens.len();
    if zt.rows() != batch * seq_len || zt.cols() != d {
        return Err(Error::Shape(format!(
            "attention input {:?}, expected ({}, {})",
            zt.shape(),
            batch * seq_len,
            d
        )));
    }
    let wq = params.get(&format!("layer{}.WQ", layer))?;
    let wk = params.get(&format!("layer{}.WK", layer))?;
    let wv = params.get(&format!("layer{}.WV", layer))?;
    let wo = params.get(&format!("layer{}.WO", layer))?;

    let q = zt.matmul_bt(wq);
    let k = zt.matmul_bt(wk);
    let v = zt.matmul_bt(wv);

    let (qr, kr) = if cfg.pe_variant.has_rope() {
        let angles = rope_angles(seq_len, dh);
        let mut qr = q.clone();
        let mut kr = k.clone();
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq_len * d + h * dh;
                rope_rotate(qr.data_mut(), off, seq_len, dh, d, &angles, 1.0);
                rope_rotate(kr.data_mut(), off, seq_len, dh, d, &angles, 1.0);
            }
        }
        (Some(qr), Some(kr))
    } else {
        (None, None)
    };
    let q_eff = qr.as_ref().unwrap_or(&q);
    let k_eff = kr.as_ref().unwrap_or(&k);

    let slopes = if cfg.pe_variant.has_alibi() {
        Some(params.get("pe.alibi_slopes")?.clone())
    } else {
        None
    };

    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = Vec::with_capacity(batch * heads);
    let mut attn = Vec::with_capacity(batch * heads);
    let mut concat = Matrix::zeros(batch * seq_len, d);
    for b in 0..batch {
        let valid = pad_lens[b];
        for h in 0..heads {
            let off = b * seq_len * d + h * dh;
            let mut s = Matrix::zeros(seq_len, seq_len);
            dgemm_strided(
                seq_len,
                dh,
                seq_len,
                scale,
                &q_eff.data()[off..],
                d as isize,
                1,
                &k_eff.data()[off..],
                1,
                d as isize,
                0.0,
                s.data_mut(),
                seq_len as isize,
                1,
            );
            if let Some(m) = &slopes {
                let slope = m.at(0, h);
                for i in 0..seq_len {
                    let row = s.row_mut(i);
                    for (j, val) in row.iter_mut().enumerate() {
                        *val -= slope * (i as f64 - j as f64).abs();
                    }
                }
            }
            // Padded keys get zero attention: softmax over the valid prefix
            // only (equivalent to a -inf score), zeros elsewhere.
            let mut a = s.clone();
            for i in 0..seq_len {
                let row = a.row_mut(i);
                softmax_row_in_place(&mut row[..valid]);
                for val in &mut row[valid..] {
                    *val = 0.0;
                }
            }
            dgemm_strided(
                seq_len,
                seq_len,
                dh,
                1.0,
                a.data(),
                seq_len as isize,
                1,
                &v.data()[off..],
                d as isize,
                1,
                0.0,
                &mut concat.data_mut()[off..],
                d as isize,
                1,
            );
            scores.push(s);
            attn.push(a);
        }
    }
    let out = concat.matmul(wo);
    Ok((
        out,
        AttnCache {
            q,
            k,
            v,
            qr,
            kr,
            scores,
            attn,
            concat,
        },
    ))
}

/// Single-sequence attention layer (the probing/testing surface): runs the
/// layer on one `L×D` input with `valid` non-pad positions and returns the
/// output plus the attention cache slice.
pub fn attention_forward(
    z: &Matrix,
    params: &ModelParams,
    layer: usize,
    cfg: &ModelConfig,
    valid: usize,
) -> Result<(Matrix, AttnCache)> {
    if layer >= cfg.depth {
        return Err(Error::InvalidArgument(format!(
            "layer {} out of range for depth {}",
            layer, cfg.depth
        )));
    }
    if valid == 0 || valid > z.rows() {
        return Err(Error::InvalidArgument(format!(
            "valid positions {} out of range for length {}",
            valid,
            z.rows()
        )));
    }
    attention_stack_forward(z, params, layer, cfg, &[valid], z.rows())
}

/// Encode the stacked raw inputs: continuous `x·Eᵀ` or token-table rows,
/// with masked positions replaced by the mask embedding.
fn encode_stack(
    seqs: &[&Sequence],
    masks: &[Vec<usize>],
    params: &ModelParams,
    cfg: &ModelConfig,
    seq_len: usize,
) -> Result<(Matrix, Option<Matrix>, Option<Vec<usize>>)> {
    let batch = seqs.len();
    let d = cfg.width;
    let e = params.get("encoder.E")?;
    let m_tok = params.get("encoder.mask_embed")?;
    match cfg.input_kind {
        InputKind::Continuous { dim } => {
            let mut xraw = Matrix::zeros(batch * seq_len, dim);
            for (b, seq) in seqs.iter().enumerate() {
                let x = seq.continuous().ok_or_else(|| {
                    Error::Data("continuous model fed a token sequence".into())
                })?;
                if x.cols() != dim {
                    return Err(Error::Shape(format!(
                        "sequence dim {} but model expects {}",
                        x.cols(),
                        dim
                    )));
                }
                for t in 0..seq_len {
                    xraw.row_mut(b * seq_len + t).copy_from_slice(x.row(t));
                }
                for &t in &masks[b] {
                    xraw.row_mut(b * seq_len + t).fill(0.0);
                }
            }
            let mut z = xraw.matmul_bt(e);
            for (b, mask) in masks.iter().enumerate() {
                for &t in mask {
                    let row = z.row_mut(b * seq_len + t);
                    for (j, val) in row.iter_mut().enumerate() {
                        *val += m_tok.at(0, j);
                    }
                }
            }
            Ok((z, Some(xraw), None))
        }
        InputKind::Token { vocab } => {
            let mut ids = Vec::with_capacity(batch * seq_len);
            for (b, seq) in seqs.iter().enumerate() {
                let toks = seq
                    .tokens()
                    .ok_or_else(|| Error::Data("token model fed a continuous sequence".into()))?;
                for (t, &id) in toks.iter().enumerate() {
                    if id >= vocab && t < seq.pad_len {
                        return Err(Error::Data(format!(
                            "token id {} out of vocab {}",
                            id, vocab
                        )));
                    }
                    ids.push(id);
                }
                for &t in &masks[b] {
                    ids[b * seq_len + t] = MASKED_TOKEN;
                }
            }
            let mut z = Matrix::zeros(batch * seq_len, d);
            for (r, &id) in ids.iter().enumerate() {
                let row = z.row_mut(r);
                if id == MASKED_TOKEN {
                    row.copy_from_slice(m_tok.row(0));
                } else {
                    row.copy_from_slice(e.row(id.min(e.rows() - 1)));
                }
            }
            Ok((z, None, Some(ids)))
        }
    }
}

/// Run the shared trunk (encoder → blocks → final norm) for a batch.
#[allow(clippy::too_many_arguments)]
fn trunk_forward(
    seqs: &[&Sequence],
    masks: Vec<Vec<usize>>,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rngs: &mut [SeededRng],
    head: HeadKind,
) -> Result<BatchCache> {
    cfg.validate()?;
    let batch = seqs.len();
    if batch == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let seq_len = seqs[0].len();
    let mut pad_lens = Vec::with_capacity(batch);
    for seq in seqs {
        if seq.len() != seq_len {
            return Err(Error::Shape(format!(
                "batch mixes lengths {} and {}",
                seq_len,
                seq.len()
            )));
        }
        if seq.pad_len == 0 || seq.pad_len > seq_len {
            return Err(Error::Data(format!(
                "pad_len {} invalid for length {}",
                seq.pad_len, seq_len
            )));
        }
        pad_lens.push(seq.pad_len);
    }
    for (b, mask) in masks.iter().enumerate() {
        for &t in mask {
            if t >= pad_lens[b] {
                return Err(Error::InvalidArgument(format!(
                    "mask position {} is padding (valid prefix {})",
                    t, pad_lens[b]
                )));
            }
        }
    }

    let p_drop = cfg.effective_dropout();
    let dropping = mode == Mode::Train && p_drop > 0.0;
    if dropping && rngs.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "dropout needs one rng per sequence: got {} for batch {}",
            rngs.len(),
            batch
        )));
    }

    let (mut z, x_cont, tokens) = encode_stack(seqs, &masks, params, cfg, seq_len)?;

    if cfg.pe_variant.has_abs() {
        let p = positional_encoding(seq_len, cfg.width)?;
        for r in 0..z.rows() {
            let t = r % seq_len;
            let row = z.row_mut(r);
            for (j, val) in row.iter_mut().enumerate() {
                *val += p.at(t, j);
            }
        }
    }

    let input_drop = if dropping {
        let m = draw_dropout(seq_len, cfg.width, batch, p_drop, rngs);
        z = mul_elementwise(&z, &m);
        Some(m)
    } else {
        None
    };

    let mut layers = Vec::with_capacity(cfg.depth);
    let mut state = z;
    for layer in 0..cfg.depth {
        if cfg.toy_mode {
            let zt = state;
            let (out, attn) =
                attention_stack_forward(&zt, params, layer, cfg, &pad_lens, seq_len)?;
            layers.push(LayerCache {
                ln1: None,
                zt,
                attn,
                drop1: None,
                ln2: None,
                mlp_in: None,
                hid_pre: None,
                hid_act: None,
                drop2: None,
            });
            state = out;
        } else {
            let scale1 = params.get(&format!("layer{}.ln1.scale", layer))?;
            let offset1 = params.get(&format!("layer{}.ln1.offset", layer))?;
            let (zt, ln1) = layer_norm_forward(&state, scale1, offset1);
            let (attn_out, attn) =
                attention_stack_forward(&zt, params, layer, cfg, &pad_lens, seq_len)?;
            let (branch1, drop1) = if dropping {
                let m = draw_dropout(seq_len, cfg.width, batch, p_drop, rngs);
                (mul_elementwise(&attn_out, &m), Some(m))
            } else {
                (attn_out, None)
            };
            let mut z_resid = state;
            z_resid.add_assign(&branch1);

            let scale2 = params.get(&format!("layer{}.ln2.scale", layer))?;
            let offset2 = params.get(&format!("layer{}.ln2.offset", layer))?;
            let (mlp_in, ln2) = layer_norm_forward(&z_resid, scale2, offset2);
            let w1 = params.get(&format!("layer{}.mlp.W1", layer))?;
            let b1 = params.get(&format!("layer{}.mlp.b1", layer))?;
            let w2 = params.get(&format!("layer{}.mlp.W2", layer))?;
            let b2 = params.get(&format!("layer{}.mlp.b2", layer))?;
            let mut hid_pre = mlp_in.matmul_bt(w1);
            for i in 0..hid_pre.rows() {
                let row = hid_pre.row_mut(i);
                for (j, val) in row.iter_mut().enumerate() {
                    *val += b1.at(0, j);
                }
            }
            let hid_act = hid_pre.map(gelu);
            let mut mlp_out = hid_act.matmul_bt(w2);
            for i in 0..mlp_out.rows() {
                let row = mlp_out.row_mut(i);
                for (j, val) in row.iter_mut().enumerate() {
                    *val += b2.at(0, j);
                }
            }
            let (branch2, drop2) = if dropping {
                let m = draw_dropout(seq_len, cfg.width, batch, p_drop, rngs);
                (mul_elementwise(&mlp_out, &m), Some(m))
            } else {
                (mlp_out, None)
            };
            let mut z_out = z_resid;
            z_out.add_assign(&branch2);

            layers.push(LayerCache {
                ln1: Some(ln1),
                zt,
                attn,
                drop1,
                ln2: Some(ln2),
                mlp_in: Some(mlp_in),
                hid_pre: Some(hid_pre),
                hid_act: Some(hid_act),
                drop2,
            });
            state = z_out;
        }
    }

    let (z_final, final_norm) = if cfg.toy_mode {
        (state, None)
    } else {
        let scale = params.get("final_norm.scale")?;
        let offset = params.get("final_norm.offset")?;
        let (z, nc) = layer_norm_forward(&state, scale, offset);
        (z, Some(nc))
    };

    Ok(BatchCache {
        cfg: cfg.clone(),
        mode,
        head,
        batch,
        seq_len,
        pad_lens,
        x_cont,
        tokens,
        masks,
        input_drop,
        layers,
        final_norm,
        z_final,
        pooled: None,
    })
}

/// Mean over each sequence's valid prefix of the stacked representation.
pub(crate) fn pool_valid(z: &Matrix, pad_lens: &[usize], seq_len: usize) -> Matrix {
    let batch = pad_lens.len();
    let d = z.cols();
    let mut pooled = Matrix::zeros(batch, d);
    for b in 0..batch {
        let inv = 1.0 / pad_lens[b] as f64;
        let out = pooled.row_mut(b);
        for t in 0..pad_lens[b] {
            let row = z.row(b * seq_len + t);
            for j in 0..d {
                out[j] += inv * row[j];
            }
        }
    }
    pooled
}

/// Classification forward for a batch: returns `B×num_classes` logits.
pub fn forward_classify_batch(
    seqs: &[&Sequence],
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rngs: &mut [SeededRng],
) -> Result<(Matrix, BatchCache)> {
    let masks = vec![Vec::new(); seqs.len()];
    let mut cache = trunk_forward(seqs, masks, params, cfg, mode, rngs, HeadKind::Classify)?;
    let pooled = pool_valid(&cache.z_final, &cache.pad_lens, cache.seq_len);
    let w = params.get("head.cls.W")?;
    let mut logits = pooled.matmul_bt(w);
    if params.contains("head.cls.b") {
        let b = params.get("head.cls.b")?;
        for i in 0..logits.rows() {
            let row = logits.row_mut(i);
            for (j, val) in row.iter_mut().enumerate() {
                *val += b.at(0, j);
            }
        }
    }
    cache.pooled = Some(pooled);
    Ok((logits, cache))
}

/// Classification forward for one sequence: returns the logit vector.
pub fn forward_classify(
    seq: &Sequence,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<(Vec<f64>, BatchCache)> {
    let (logits, cache) =
        forward_classify_batch(&[seq], params, cfg, mode, std::slice::from_mut(rng))?;
    Ok((logits.row(0).to_vec(), cache))
}

/// Reconstruction forward for a batch: per-token predictions `(B·L)×r`
/// where `r` is the input dim (continuous) or vocab size (token logits).
/// The loss reads only masked rows, but all rows are predicted.
pub fn forward_reconstruct_batch(
    seqs: &[&Sequence],
    masks: Vec<Vec<usize>>,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rngs: &mut [SeededRng],
) -> Result<(Matrix, BatchCache)> {
    if masks.len() != seqs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} masks for {} sequences",
            masks.len(),
            seqs.len()
        )));
    }
    let cache = trunk_forward(seqs, masks, params, cfg, mode, rngs, HeadKind::Reconstruct)?;
    let w = params.get("head.spt.W")?;
    let mut preds = cache.z_final.matmul_bt(w);
    if params.contains("head.spt.b") {
        let b = params.get("head.spt.b")?;
        for i in 0..preds.rows() {
            let row = preds.row_mut(i);
            for (j, val) in row.iter_mut().enumerate() {
                *val += b.at(0, j);
            }
        }
    }
    Ok((preds, cache))
}

/// Reconstruction forward for one sequence: predictions are `L×r`.
pub fn forward_reconstruct(
    seq: &Sequence,
    mask: &[usize],
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<(Matrix, BatchCache)> {
    forward_reconstruct_batch(
        &[seq],
        vec![mask.to_vec()],
        params,
        cfg,
        mode,
        std::slice::from_mut(rng),
    )
}
