//! Attention-pattern and weight diagnostics: score/attention probes,
//! band-mass summaries, weight histograms, and heatmap export.
//!
//! `band_mass` is this crate's quantitative instrument for "diagonally
//! dominated" attention: the mean over query rows of the attention mass
//! within `|i−j| ≤ w`. Outputs that include it are labeled with the
//! bandwidth so the number is interpretable on its own.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Sequence, SequenceInput};
use crate::error::{Error, Result};
use crate::model::{forward_classify, InputKind, ModelConfig, Mode, ModelParams};
use crate::numeric::{softmax_rows, streams, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeSource {
    #[serde(rename = "real-input")]
    RealInput,
    #[serde(rename = "positional-only")]
    PositionalOnly,
}

/// Raw scores and softmax-normalized attention for every layer and head,
/// restricted to the valid (non-padding) positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionProbe {
    pub source: ProbeSource,
    /// `scores[layer][head]`: pre-softmax scores, including any additive
    /// position bias.
    pub scores: Vec<Vec<Matrix>>,
    /// `attention[layer][head]`: row-stochastic attention weights.
    pub attention: Vec<Vec<Matrix>>,
    pub seq_len: usize,
}

impl AttentionProbe {
    /// Max |A − softmax_rows(S)| over all layers and heads; the cache the
    /// probe was built from is consistent when this is at float-noise level.
    pub fn softmax_consistency(&self) -> f64 {
        let mut dev = 0.0f64;
        for (ls, la) in self.scores.iter().zip(&self.attention) {
            for (s, a) in ls.iter().zip(la) {
                let re = softmax_rows(s).expect("probe scores are finite");
                for (x, y) in re.data().iter().zip(a.data()) {
                    dev = dev.max((x - y).abs());
                }
            }
        }
        dev
    }

    /// Band mass per (layer, head) at bandwidth `w`.
    pub fn band_mass_table(&self, w: usize) -> Result<Vec<BandMassRow>> {
        let mut rows = Vec::new();
        for (layer, heads) in self.attention.iter().enumerate() {
            for (head, a) in heads.iter().enumerate() {
                rows.push(BandMassRow {
                    layer,
                    head,
                    w,
                    band_mass: band_mass(a, w)?,
                });
            }
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandMassRow {
    pub layer: usize,
    pub head: usize,
    pub w: usize,
    pub band_mass: f64,
}

/// CSV for a band-mass table: header plus one row per (layer, head).
pub fn band_mass_csv(rows: &[BandMassRow]) -> String {
    let mut out = String::from("layer,head,w,band_mass\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.layer, r.head, r.w, r.band_mass));
    }
    out
}

/// Run an eval-mode forward on `seq` and extract every layer/head's cached
/// scores and attention, cut down to the valid prefix.
pub fn attention_probe(
    params: &ModelParams,
    cfg: &ModelConfig,
    seq: &Sequence,
) -> Result<AttentionProbe> {
    if seq.pad_len == 0 {
        return Err(Error::Data("cannot probe a pad-only sequence".into()));
    }
    let mut rng = SeededRng::from_stream(0, streams::dropout(0, 0));
    let (_, cache) = forward_classify(seq, params, cfg, Mode::Eval, &mut rng)?;
    probe_from_cache(&cache.layers, cfg.heads, seq.pad_len, ProbeSource::RealInput)
}

/// Probe attention with the input content zeroed, so only positional
/// information flows through the score computation. Requires an absolute
/// positional encoding (with content at zero, nothing else produces
/// position-dependent queries or keys).
pub fn positional_probe(
    params: &ModelParams,
    cfg: &ModelConfig,
    seq_len: usize,
) -> Result<AttentionProbe> {
    if !cfg.pe_variant.has_abs() {
        return Err(Error::InvalidArgument(format!(
            "positional probe requires an absolute positional encoding, config has {:?}",
            cfg.pe_variant
        )));
    }
    // Zero the encoder blocks in a scratch copy: the trunk then sees
    // exactly Z = 0 + P for any input, token or continuous.
    let mut zeroed = params.clone();
    for name in ["encoder.E", "encoder.mask_embed"] {
        let m = zeroed.get_mut(name)?;
        for v in m.data_mut() {
            *v = 0.0;
        }
    }
    let seq = match cfg.input_kind {
        InputKind::Continuous { dim } => Sequence {
            input: SequenceInput::Continuous(Matrix::zeros(seq_len, dim)),
            label: Some(0),
            pad_len: seq_len,
        },
        InputKind::Token { .. } => Sequence {
            input: SequenceInput::Tokens(vec![0; seq_len]),
            label: Some(0),
            pad_len: seq_len,
        },
    };
    let mut rng = SeededRng::from_stream(0, streams::dropout(0, 0));
    let (_, cache) = forward_classify(&seq, &zeroed, cfg, Mode::Eval, &mut rng)?;
    probe_from_cache(&cache.layers, cfg.heads, seq_len, ProbeSource::PositionalOnly)
}

fn probe_from_cache(
    layers: &[crate::model::LayerCache],
    heads: usize,
    valid: usize,
    source: ProbeSource,
) -> Result<AttentionProbe> {
    let mut scores = Vec::with_capacity(layers.len());
    let mut attention = Vec::with_capacity(layers.len());
    for layer in layers {
        let mut ls = Vec::with_capacity(heads);
        let mut la = Vec::with_capacity(heads);
        for h in 0..heads {
            // Batch size is 1, so head h is cache entry h.
            ls.push(submatrix(&layer.attn.scores[h], valid));
            la.push(submatrix(&layer.attn.attn[h], valid));
        }
        scores.push(ls);
        attention.push(la);
    }
    Ok(AttentionProbe {
        source,
        scores,
        attention,
        seq_len: valid,
    })
}

fn submatrix(m: &Matrix, n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| m.at(i, j))
}

/// Mean over rows of the attention mass within the band `|i−j| ≤ w`.
pub fn band_mass(a: &Matrix, w: usize) -> Result<f64> {
    let (l, cols) = a.shape();
    if l != cols || l == 0 {
        return Err(Error::Shape(format!(
            "band_mass needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    if w >= l {
        return Err(Error::InvalidArgument(format!(
            "bandwidth {} out of range for L={}",
            w, l
        )));
    }
    for i in 0..l {
        let mut sum = 0.0;
        for j in 0..l {
            let v = a.at(i, j);
            if v < -1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "attention matrix has negative entry {:e} at ({}, {})",
                    v, i, j
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "attention row {} sums to {}, not 1",
                i, sum
            )));
        }
    }
    let mut total = 0.0;
    for i in 0..l {
        let lo = i.saturating_sub(w);
        let hi = (i + w).min(l - 1);
        for j in lo..=hi {
            total += a.at(i, j);
        }
    }
    Ok(total / l as f64)
}

/// Equal-width histogram of a parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    /// One count per bin; a constant block collapses to a single bin.
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// CSV rows `bin_lo,bin_hi,count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let nb = self.counts.len();
        let width = if nb > 1 {
            (self.max - self.min) / nb as f64
        } else {
            0.0
        };
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.min + width * i as f64;
            let hi = if i + 1 == nb { self.max } else { self.min + width * (i + 1) as f64 };
            out.push_str(&format!("{},{},{}\n", lo, hi, c));
        }
        out
    }
}

/// Histogram of all entries over `bins` equal-width bins spanning
/// `[min, max]`. A constant block yields one bin holding every entry.
pub fn weight_histogram(block: &Matrix, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 bins, got {}",
            bins
        )));
    }
    if block.numel() == 0 {
        return Err(Error::InvalidArgument("empty block".into()));
    }
    if !block.is_finite() {
        return Err(Error::NonFinite("weight block".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in block.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        return Ok(Histogram {
            min: lo,
            max: hi,
            counts: vec![block.numel()],
        });
    }
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for &v in block.data() {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    Ok(Histogram {
        min: lo,
        max: hi,
        counts,
    })
}

/// Scale metadata saved next to every exported heatmap so pixel values can
/// be mapped back to floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmSidecar {
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub max: f64,
}

/// Write `m` as an 8-bit binary PGM with per-matrix min-max normalization,
/// plus a `<path>.json` sidecar holding the scale.
pub fn export_pgm(m: &Matrix, path: &Path) -> Result<()> {
    if m.numel() == 0 {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("heatmap matrix".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in m.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(64 + m.numel());
    bytes.extend_from_slice(format!("P5\n{} {}\n255\n", m.cols(), m.rows()).as_bytes());
    for &v in m.data() {
        let px = if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        bytes.push(px);
    }
    fs::write(path, bytes)?;
    let sidecar = PgmSidecar {
        rows: m.rows(),
        cols: m.cols(),
        min: lo,
        max: hi,
    };
    let mut side_path = path.as_os_str().to_owned();
    side_path.push(".json");
    fs::write(side_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}
