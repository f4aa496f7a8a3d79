//! Exact reverse-mode gradients for the cached forward pass.
//!
//! `backward_pass` walks the [`BatchCache`] in reverse and produces a
//! gradient matrix for every parameter block (non-trainable blocks get a
//! zero entry). Gradients are those of the *sum* of the per-sequence
//! upstream contributions; trainers apply their own 1/B or 1/|mask|
//! normalization to the upstream before calling in.

use crate::error::{Error, Result};
use crate::model::config::InputKind;
use crate::model::forward::{
    gelu_grad, layer_norm_backward, AttnCache, BatchCache, HeadKind, Mode, MASKED_TOKEN,
};
use crate::model::params::{block_registry, Gradients, ModelParams};
use crate::model::pe::{rope_angles, rope_rotate};
use crate::numeric::{dgemm_strided, Matrix};

/// Elementwise product into a fresh matrix (dropout-mask application).
fn masked(x: &Matrix, mask: &Option<Matrix>) -> Matrix {
    match mask {
        None => x.clone(),
        Some(m) => {
            let mut out = x.clone();
            for (o, k) in out.data_mut().iter_mut().zip(m.data()) {
                *o *= k;
            }
            out
        }
    }
}

fn col_sums(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let o = out.row_mut(0);
        for (j, v) in row.iter().enumerate() {
            o[j] += v;
        }
    }
    out
}

/// Backward through one attention layer. `d_out` is the gradient at the
/// layer's output (post-`WO`); returns the gradient at the layer's input
/// `zt` and accumulates all four projection gradients.
fn attention_stack_backward(
    d_out: &Matrix,
    attn: &AttnCache,
    zt: &Matrix,
    params: &ModelParams,
    layer: usize,
    cfg: &crate::model::config::ModelConfig,
    seq_len: usize,
    grads: &mut Gradients,
) -> Result<Matrix> {
    let d = cfg.width;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let batch = d_out.rows() / seq_len;
    let wq = params.get(&format!("layer{}.WQ", layer))?;
    let wk = params.get(&format!("layer{}.WK", layer))?;
    let wv = params.get(&format!("layer{}.WV", layer))?;
    let wo = params.get(&format!("layer{}.WO", layer))?;

    // out = concat · WO
    grads
        .get_mut(&format!("layer{}.WO", layer))
        .unwrap()
        .add_assign(&attn.concat.matmul_at(d_out));
    let d_concat = d_out.matmul_bt(wo);

    let q_eff = attn.qr.as_ref().unwrap_or(&attn.q);
    let k_eff = attn.kr.as_ref().unwrap_or(&attn.k);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dq = Matrix::zeros(batch * seq_len, d);
    let mut dk = Matrix::zeros(batch * seq_len, d);
    let mut dv = Matrix::zeros(batch * seq_len, d);

    for b in 0..batch {
        for h in 0..heads {
            let off = b * seq_len * d + h * dh;
            let a = &attn.attn[b * heads + h];

            // dA = dU · Vᵀ
            let mut da = Matrix::zeros(seq_len, seq_len);
            dgemm_strided(
                seq_len,
                dh,
                seq_len,
                1.0,
                &d_concat.data()[off..],
                d as isize,
                1,
                &attn.v.data()[off..],
                1,
                d as isize,
                0.0,
                da.data_mut(),
                seq_len as isize,
                1,
            );
            // dV = Aᵀ · dU
            dgemm_strided(
                seq_len,
                seq_len,
                dh,
                1.0,
                a.data(),
                1,
                seq_len as isize,
                &d_concat.data()[off..],
                d as isize,
                1,
                0.0,
                &mut dv.data_mut()[off..],
                d as isize,
                1,
            );
            // Softmax backward row by row: dS = A ⊙ (dA − ⟨dA, A⟩_row).
            // Padded keys carry A = 0 and so contribute nothing.
            let mut ds = da;
            for i in 0..seq_len {
                let arow = a.row(i);
                let dsrow = ds.row_mut(i);
                let dot: f64 = dsrow.iter().zip(arow).map(|(x, y)| x * y).sum();
                for (x, y) in dsrow.iter_mut().zip(arow) {
                    *x = y * (*x - dot);
                }
            }
            // S = scale · Q Kᵀ (+ additive ALiBi bias, no trainable part):
            // dQ = scale · dS · K ; dK = scale · dSᵀ · Q
            dgemm_strided(
                seq_len,
                seq_len,
                dh,
                scale,
                ds.data(),
                seq_len as isize,
                1,
                &k_eff.data()[off..],
                d as isize,
                1,
                0.0,
                &mut dq.data_mut()[off..],
                d as isize,
                1,
            );
            dgemm_strided(
                seq_len,
                seq_len,
                dh,
                scale,
                ds.data(),
                1,
                seq_len as isize,
                &q_eff.data()[off..],
                d as isize,
                1,
                0.0,
                &mut dk.data_mut()[off..],
                d as isize,
                1,
            );
        }
    }

    // RoPE applied R(θ) on the forward; pull gradients back through R(−θ).
    if cfg.pe_variant.has_rope() {
        let angles = rope_angles(seq_len, dh);
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq_len * d + h * dh;
                rope_rotate(dq.data_mut(), off, seq_len, dh, d, &angles, -1.0);
                rope_rotate(dk.data_mut(), off, seq_len, dh, d, &angles, -1.0);
            }
        }
    }

    // Q = zt · WQᵀ etc.
    grads
        .get_mut(&format!("layer{}.WQ", layer))
        .unwrap()
        .add_assign(&dq.matmul_at(zt));
    grads
        .get_mut(&format!("layer{}.WK", layer))
        .unwrap()
        .add_assign(&dk.matmul_at(zt));
    grads
        .get_mut(&format!("layer{}.WV", layer))
        .unwrap()
        .add_assign(&dv.matmul_at(zt));

    let mut dzt = dq.matmul(wq);
    dzt.add_assign(&dk.matmul(wk));
    dzt.add_assign(&dv.matmul(wv));
    Ok(dzt)
}

/// Full backward pass from an upstream loss gradient.
///
/// For a classification cache the upstream is `B×num_classes` (gradient at
/// the logits); for a reconstruction cache it is `(B·L)×r` (gradient at the
/// per-token predictions, zero rows at unmasked positions). A shape that
/// matches neither is rejected as a stale or mismatched cache.
pub fn backward_pass(
    cache: &BatchCache,
    params: &ModelParams,
    upstream: &Matrix,
) -> Result<Gradients> {
    if cache.mode != Mode::Train {
        return Err(Error::InvalidArgument(
            "backward requires a cache from a train-mode forward".into(),
        ));
    }
    let cfg = &cache.cfg;
    let (bl, d) = (cache.batch * cache.seq_len, cfg.width);
    if cache.z_final.shape() != (bl, d) {
        return Err(Error::Shape("corrupt cache: trunk output shape".into()));
    }
    let mut grads = params.zeros_like();

    // Head backward → gradient at the stacked final representation.
    let mut dz_final = match cache.head {
        HeadKind::Classify => {
            if upstream.shape() != (cache.batch, cfg.num_classes) {
                return Err(Error::Shape(format!(
                    "upstream {:?} does not match cached logits ({}, {})",
                    upstream.shape(),
                    cache.batch,
                    cfg.num_classes
                )));
            }
            let pooled = cache
                .pooled
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("cache lacks pooled state".into()))?;
            let w = params.get("head.cls.W")?;
            grads
                .get_mut("head.cls.W")
                .unwrap()
                .add_assign(&upstream.matmul_at(pooled));
            if let Some(g) = grads.get_mut("head.cls.b") {
                g.add_assign(&col_sums(upstream));
            }
            let d_pooled = upstream.matmul(w);
            let mut dz = Matrix::zeros(bl, d);
            for b in 0..cache.batch {
                let inv = 1.0 / cache.pad_lens[b] as f64;
                for t in 0..cache.pad_lens[b] {
                    let src = d_pooled.row(b);
                    let dst = dz.row_mut(b * cache.seq_len + t);
                    for j in 0..d {
                        dst[j] = inv * src[j];
                    }
                }
            }
            dz
        }
        HeadKind::Reconstruct => {
            let r = cfg.input_kind.recon_dim();
            if upstream.shape() != (bl, r) {
                return Err(Error::Shape(format!(
                    "upstream {:?} does not match cached predictions ({}, {})",
                    upstream.shape(),
                    bl,
                    r
                )));
            }
            let w = params.get("head.spt.W")?;
            grads
                .get_mut("head.spt.W")
                .unwrap()
                .add_assign(&upstream.matmul_at(&cache.z_final));
            if let Some(g) = grads.get_mut("head.spt.b") {
                g.add_assign(&col_sums(upstream));
            }
            upstream.matmul(w)
        }
    };

    if let Some(nc) = &cache.final_norm {
        let scale = params.get("final_norm.scale")?;
        let (dx, dscale, doffset) = layer_norm_backward(&dz_final, nc, scale);
        grads.get_mut("final_norm.scale").unwrap().add_assign(&dscale);
        grads.get_mut("final_norm.offset").unwrap().add_assign(&doffset);
        dz_final = dx;
    }

    let mut dz = dz_final;
    for (layer, lc) in cache.layers.iter().enumerate().rev() {
        if cfg.toy_mode {
            dz = attention_stack_backward(
                &dz,
                &lc.attn,
                &lc.zt,
                params,
                layer,
                cfg,
                cache.seq_len,
                &mut grads,
            )?;
        } else {
            // Z⁺ = Z' + Drop₂(MLP(LN₂(Z')))
            let d_mlp_out = masked(&dz, &lc.drop2);
            let hid_act = lc.hid_act.as_ref().unwrap();
            let hid_pre = lc.hid_pre.as_ref().unwrap();
            let mlp_in = lc.mlp_in.as_ref().unwrap();
            let w2 = params.get(&format!("layer{}.mlp.W2", layer))?;
            let w1 = params.get(&format!("layer{}.mlp.W1", layer))?;
            grads
                .get_mut(&format!("layer{}.mlp.W2", layer))
                .unwrap()
                .add_assign(&d_mlp_out.matmul_at(hid_act));
            grads
                .get_mut(&format!("layer{}.mlp.b2", layer))
                .unwrap()
                .add_assign(&col_sums(&d_mlp_out));
            let mut d_hid = d_mlp_out.matmul(w2);
            for (g, &x) in d_hid.data_mut().iter_mut().zip(hid_pre.data()) {
                *g *= gelu_grad(x);
            }
            grads
                .get_mut(&format!("layer{}.mlp.W1", layer))
                .unwrap()
                .add_assign(&d_hid.matmul_at(mlp_in));
            grads
                .get_mut(&format!("layer{}.mlp.b1", layer))
                .unwrap()
                .add_assign(&col_sums(&d_hid));
            let d_mlp_in = d_hid.matmul(w1);

            let scale2 = params.get(&format!("layer{}.ln2.scale", layer))?;
            let (d_from_ln2, dscale2, doffset2) =
                layer_norm_backward(&d_mlp_in, lc.ln2.as_ref().unwrap(), scale2);
            grads
                .get_mut(&format!("layer{}.ln2.scale", layer))
                .unwrap()
                .add_assign(&dscale2);
            grads
                .get_mut(&format!("layer{}.ln2.offset", layer))
                .unwrap()
                .add_assign(&doffset2);

            // Z' receives the residual passthrough plus the LN₂ pullback.
            let mut d_resid = dz;
            d_resid.add_assign(&d_from_ln2);

            // Z' = Z + Drop₁(MHA(LN₁(Z)))
            let d_attn_out = masked(&d_resid, &lc.drop1);
            let dzt = attention_stack_backward(
                &d_attn_out,
                &lc.attn,
                &lc.zt,
                params,
                layer,
                cfg,
                cache.seq_len,
                &mut grads,
            )?;
            let scale1 = params.get(&format!("layer{}.ln1.scale", layer))?;
            let (d_from_ln1, dscale1, doffset1) =
                layer_norm_backward(&dzt, lc.ln1.as_ref().unwrap(), scale1);
            grads
                .get_mut(&format!("layer{}.ln1.scale", layer))
                .unwrap()
                .add_assign(&dscale1);
            grads
                .get_mut(&format!("layer{}.ln1.offset", layer))
                .unwrap()
                .add_assign(&doffset1);

            let mut d_in = d_resid;
            d_in.add_assign(&d_from_ln1);
            dz = d_in;
        }
    }

    // Input dropout, then the encoder. (The absolute positional table is a
    // constant; it has no gradient.)
    let dx = masked(&dz, &cache.input_drop);
    match cfg.input_kind {
        InputKind::Continuous { .. } => {
            let xraw = cache
                .x_cont
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("cache lacks raw input".into()))?;
            grads
                .get_mut("encoder.E")
                .unwrap()
                .add_assign(&dx.matmul_at(xraw));
        }
        InputKind::Token { .. } => {
            let ids = cache
                .tokens
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("cache lacks token ids".into()))?;
            let ge = grads.get_mut("encoder.E").unwrap();
            for (r, &id) in ids.iter().enumerate() {
                if id != MASKED_TOKEN {
                    let src = dx.row(r);
                    let dst = ge.row_mut(id);
                    for j in 0..dst.len() {
                        dst[j] += src[j];
                    }
                }
            }
        }
    }
    // Mask-embedding gradient: sum of dX over masked rows.
    {
        let gm = grads.get_mut("encoder.mask_embed").unwrap();
        for (b, mask) in cache.masks.iter().enumerate() {
            for &t in mask {
                let src = dx.row(b * cache.seq_len + t);
                let dst = gm.row_mut(0);
                for j in 0..dst.len() {
                    dst[j] += src[j];
                }
            }
        }
    }

    // Fixed blocks (the ALiBi slope table) take no gradient; the returned
    // map covers exactly the trainable set.
    for spec in block_registry(cfg)?.iter().filter(|b| !b.trainable) {
        grads.remove(&spec.name);
    }

    Ok(grads)
}
