//! Synthetic two-class sequence task and JSONL dataset ingestion.
//!
//! The generator produces length-100, 2-dimensional sequences whose class
//! identity lives in a slowly varying mixture between two class-specific
//! anchor pairs, buried under an oscillatory drift, heavy coordinate noise,
//! and a handful of outlier spikes. All randomness is drawn from per-sequence
//! keyed streams, so a sequence's content depends only on
//! `(master_seed, split, index)` — never on generation order.

use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{streams, Matrix, SeededRng};

/// Sequence length of the synthetic task.
pub const SYNTH_LEN: usize = 100;
/// Input dimension of the synthetic task.
pub const SYNTH_DIM: usize = 2;
/// Coordinate noise scale σ.
pub const SYNTH_NOISE_SIGMA: f64 = 0.55;

/// Class anchor pairs `(c₁, c₂)`: label 0 mixes `A0` toward `B0`, label 1
/// mixes `A1` toward `B1`.
pub const ANCHOR_A0: [f64; 2] = [0.66, 0.55];
pub const ANCHOR_B0: [f64; 2] = [-0.495, -0.605];
pub const ANCHOR_A1: [f64; 2] = [0.605, -0.55];
pub const ANCHOR_B1: [f64; 2] = [-0.55, 0.605];

/// Raw per-sequence input. Continuous sequences carry an `L×d` matrix;
/// token sequences carry integer ids (padded entries hold id 0 and are
/// excluded by `pad_len`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SequenceInput {
    Continuous(Matrix),
    Tokens(Vec<usize>),
}

/// One dataset element: input, optional class label, and the count of valid
/// (non-padding) leading positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub input: SequenceInput,
    pub label: Option<usize>,
    pub pad_len: usize,
}

impl Sequence {
    /// Total length including padding.
    pub fn len(&self) -> usize {
        match &self.input {
            SequenceInput::Continuous(x) => x.rows(),
            SequenceInput::Tokens(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The continuous input matrix, if this is a continuous sequence.
    pub fn continuous(&self) -> Option<&Matrix> {
        match &self.input {
            SequenceInput::Continuous(x) => Some(x),
            SequenceInput::Tokens(_) => None,
        }
    }

    /// The token ids, if this is a token sequence.
    pub fn tokens(&self) -> Option<&[usize]> {
        match &self.input {
            SequenceInput::Continuous(_) => None,
            SequenceInput::Tokens(t) => Some(t),
        }
    }
}

/// Latent variables drawn once per sequence.
#[derive(Debug, Clone, Copy)]
pub struct Latents {
    /// Time-warp strength, `U(0.12, 0.28)`.
    pub s: f64,
    /// Mixing phase, `U(0, 2π)`.
    pub phi: f64,
    /// Global amplitude, `N(1, 0.1²)`, deliberately unclamped.
    pub alpha: f64,
}

/// The noise-free sequence path: for position `j`,
/// `t_j = j/(L−1)`, warped `t̃_j = t_j + s·sin(2πt_j)(0.5 + 0.5cos(2πt_j))`,
/// mixing `m_j = 0.5 + 0.35 sin(2π t̃_j + φ)`, mean `μ_j = m_j c₁ + (1−m_j) c₂`
/// with the label's anchor pair, drift `d_j = 0.30(sin 2π t̃_j, cos 2π t̃_j)`,
/// and output `α(μ_j + d_j)`.
pub fn clean_path(label: usize, lat: &Latents) -> Matrix {
    let (c1, c2) = match label {
        0 => (ANCHOR_A0, ANCHOR_B0),
        _ => (ANCHOR_A1, ANCHOR_B1),
    };
    let tau = std::f64::consts::TAU;
    Matrix::from_fn(SYNTH_LEN, SYNTH_DIM, |j, k| {
        let t = j as f64 / (SYNTH_LEN - 1) as f64;
        let warped = t + lat.s * (tau * t).sin() * (0.5 + 0.5 * (tau * t).cos());
        let m = 0.5 + 0.35 * (tau * warped + lat.phi).sin();
        let mu = m * c1[k] + (1.0 - m) * c2[k];
        let drift = 0.30 * if k == 0 { (tau * warped).sin() } else { (tau * warped).cos() };
        lat.alpha * (mu + drift)
    })
}

/// Generate one synthetic sequence with explicit noise controls.
///
/// The draw order is pinned and must never change (stream identity):
/// `s`, `φ`, `α` (one Box–Muller pair, second value discarded), then one
/// Gaussian pair per position for `ε_j`, then the outlier count
/// `N_sp ∼ Unif{0..3}`, the outlier positions, and one Gaussian pair per
/// chosen position for `δ`. All draws happen even when `sigma = 0` or
/// outliers are disabled, so variant datasets stay stream-aligned.
pub fn generate_sequence_opts(
    label: usize,
    rng: &mut SeededRng,
    sigma: f64,
    with_outliers: bool,
) -> Sequence {
    let lat = Latents {
        s: rng.uniform(0.12, 0.28),
        phi: rng.uniform(0.0, std::f64::consts::TAU),
        alpha: 1.0 + 0.1 * rng.gaussian_pair().0,
    };
    let mut x = clean_path(label, &lat);
    for j in 0..SYNTH_LEN {
        let (gx, gy) = rng.gaussian_pair();
        x.row_mut(j)[0] += sigma * gx;
        x.row_mut(j)[1] += sigma * gy;
    }
    let n_sp = rng.next_below(4) as usize;
    let positions = rng.sample_indices(SYNTH_LEN, n_sp);
    for &j in &positions {
        let (dx, dy) = rng.gaussian_pair();
        if with_outliers {
            x.row_mut(j)[0] += dx;
            x.row_mut(j)[1] += dy;
        }
    }
    Sequence {
        input: SequenceInput::Continuous(x),
        label: Some(label),
        pad_len: SYNTH_LEN,
    }
}

/// Generate one synthetic sequence with the standard noise settings.
pub fn generate_sequence(label: usize, rng: &mut SeededRng) -> Sequence {
    generate_sequence_opts(label, rng, SYNTH_NOISE_SIGMA, true)
}

/// Requested split sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unlabeled: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 100,
            val: 200,
            test: 400,
            unlabeled: 12_000,
        }
    }
}

/// Stable split identifiers used to key per-sequence RNG streams.
pub const SPLIT_TRAIN: u64 = 0;
pub const SPLIT_VAL: u64 = 1;
pub const SPLIT_TEST: u64 = 2;
pub const SPLIT_UNLABELED: u64 = 3;

/// The four splits of a dataset, synthetic or user-supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Dataset {
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
    pub test: Vec<Sequence>,
    pub unlabeled: Vec<Sequence>,
}

impl Dataset {
    /// SHA-256 over a canonical byte encoding of every split; identifies the
    /// dataset in checkpoints and run manifests.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, split) in [
            (b"trn", &self.train),
            (b"val", &self.val),
            (b"tst", &self.test),
            (b"unl", &self.unlabeled),
        ] {
            h.update(tag);
            h.update((split.len() as u64).to_le_bytes());
            for seq in split {
                match seq.label {
                    Some(l) => h.update((l as i64).to_le_bytes()),
                    None => h.update((-1i64).to_le_bytes()),
                }
                h.update((seq.pad_len as u64).to_le_bytes());
                match &seq.input {
                    SequenceInput::Continuous(x) => {
                        h.update([0u8]);
                        h.update((x.rows() as u64).to_le_bytes());
                        h.update((x.cols() as u64).to_le_bytes());
                        for v in x.data() {
                            h.update(v.to_le_bytes());
                        }
                    }
                    SequenceInput::Tokens(t) => {
                        h.update([1u8]);
                        h.update((t.len() as u64).to_le_bytes());
                        for &id in t {
                            h.update((id as u64).to_le_bytes());
                        }
                    }
                }
            }
        }
        hex_string(&h.finalize())
    }
}

/// A generated synthetic dataset plus the knobs that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub splits: Dataset,
    pub master_seed: u64,
    pub flip_fraction: f64,
}

/// Indices of train labels to flip: exactly `⌊flip_fraction·n⌋` distinct
/// positions, chosen uniformly from a stream keyed only by the master seed.
pub fn flip_indices(master_seed: u64, n: usize, flip_fraction: f64) -> Vec<usize> {
    let k = (flip_fraction * n as f64).floor() as usize;
    let mut rng = SeededRng::from_stream(master_seed, streams::label_flips());
    rng.sample_indices(n, k)
}

/// Generate the full synthetic dataset.
///
/// Labeled splits alternate labels by index (balanced before flips); the
/// unlabeled split is drawn from the same alternating class mixture but its
/// labels are discarded. Exactly `⌊flip_fraction·|train|⌋` train labels are
/// flipped; other splits are never flipped.
pub fn generate_dataset(
    master_seed: u64,
    sizes: SplitSizes,
    flip_fraction: f64,
) -> Result<SyntheticDataset> {
    for (name, n) in [("train", sizes.train), ("val", sizes.val), ("test", sizes.test)] {
        if n == 0 || n % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "labeled split '{}' must have positive even size, got {}",
                name, n
            )));
        }
    }
    if !(0.0..=1.0).contains(&flip_fraction) {
        return Err(Error::InvalidArgument(format!(
            "flip_fraction must be in [0,1], got {}",
            flip_fraction
        )));
    }

    let gen_split = |split_id: u64, n: usize, keep_labels: bool| -> Vec<Sequence> {
        (0..n)
            .map(|i| {
                let mut rng =
                    SeededRng::from_stream(master_seed, streams::sequence(split_id, i as u64));
                let mut seq = generate_sequence(i % 2, &mut rng);
                if !keep_labels {
                    seq.label = None;
                }
                seq
            })
            .collect()
    };

    let mut train = gen_split(SPLIT_TRAIN, sizes.train, true);
    let val = gen_split(SPLIT_VAL, sizes.val, true);
    let test = gen_split(SPLIT_TEST, sizes.test, true);
    let unlabeled = gen_split(SPLIT_UNLABELED, sizes.unlabeled, false);

    for i in flip_indices(master_seed, sizes.train, flip_fraction) {
        let l = train[i].label.expect("train sequences are labeled");
        train[i].label = Some(1 - l);
    }

    Ok(SyntheticDataset {
        splits: Dataset {
            train,
            val,
            test,
            unlabeled,
        },
        master_seed,
        flip_fraction,
    })
}

/// JSONL input schema selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JsonlSchema {
    Continuous,
    Token,
}

#[derive(Deserialize)]
struct JsonlLine {
    label: Option<i64>,
    #[serde(default)]
    x: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    tokens: Option<Vec<i64>>,
}

/// Load one JSONL file of sequences. Each line is
/// `{"label": int|null, "x": [[f,...],...]}` (continuous) or
/// `{"label": int|null, "tokens": [int,...]}` (token). All sequences are
/// zero-padded to the longest length in the file, with the original length
/// recorded as `pad_len`.
pub fn load_jsonl_dataset(path: &Path, schema: JsonlSchema) -> Result<Vec<Sequence>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?;
    let reader = BufReader::new(file);

    struct RawSeq {
        label: Option<usize>,
        x: Option<Vec<Vec<f64>>>,
        tokens: Option<Vec<usize>>,
    }
    let mut raw: Vec<RawSeq> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut max_len = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Data(format!("line {}: {}", lineno, e)))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlLine = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: malformed JSON: {}", lineno, e)))?;
        let label = match parsed.label {
            None => None,
            Some(l) if l >= 0 => Some(l as usize),
            Some(l) => {
                return Err(Error::Data(format!(
                    "line {}: negative label {}",
                    lineno, l
                )))
            }
        };
        match schema {
            JsonlSchema::Continuous => {
                let x = parsed.x.ok_or_else(|| {
                    Error::Data(format!("line {}: missing \"x\" field", lineno))
                })?;
                if x.is_empty() {
                    return Err(Error::Data(format!("line {}: empty sequence", lineno)));
                }
                let d = x[0].len();
                if d == 0 {
                    return Err(Error::Data(format!(
                        "line {}: zero inner dimension",
                        lineno
                    )));
                }
                for (j, row) in x.iter().enumerate() {
                    if row.len() != d {
                        return Err(Error::Data(format!(
                            "line {}: position {} has dimension {}, expected {}",
                            lineno,
                            j,
                            row.len(),
                            d
                        )));
                    }
                }
                match dim {
                    None => dim = Some(d),
                    Some(prev) if prev != d => {
                        return Err(Error::Data(format!(
                            "line {}: inner dimension {} inconsistent with earlier {}",
                            lineno, d, prev
                        )))
                    }
                    _ => {}
                }
                max_len = max_len.max(x.len());
                raw.push(RawSeq {
                    label,
                    x: Some(x),
                    tokens: None,
                });
            }
            JsonlSchema::Token => {
                let toks = parsed.tokens.ok_or_else(|| {
                    Error::Data(format!("line {}: missing \"tokens\" field", lineno))
                })?;
                if toks.is_empty() {
                    return Err(Error::Data(format!("line {}: empty sequence", lineno)));
                }
                let mut ids = Vec::with_capacity(toks.len());
                for &t in &toks {
                    if t < 0 {
                        return Err(Error::Data(format!(
                            "line {}: negative token id {}",
                            lineno, t
                        )));
                    }
                    ids.push(t as usize);
                }
                max_len = max_len.max(ids.len());
                raw.push(RawSeq {
                    label,
                    x: None,
                    tokens: Some(ids),
                });
            }
        }
    }

    let out = raw
        .into_iter()
        .map(|r| match schema {
            JsonlSchema::Continuous => {
                let x = r.x.unwrap();
                let pad_len = x.len();
                let d = dim.unwrap();
                let padded = Matrix::from_fn(max_len, d, |i, j| {
                    if i < pad_len {
                        x[i][j]
                    } else {
                        0.0
                    }
                });
                Sequence {
                    input: SequenceInput::Continuous(padded),
                    label: r.label,
                    pad_len,
                }
            }
            JsonlSchema::Token => {
                let mut t = r.tokens.unwrap();
                let pad_len = t.len();
                t.resize(max_len, 0);
                Sequence {
                    input: SequenceInput::Tokens(t),
                    label: r.label,
                    pad_len,
                }
            }
        })
        .collect();
    Ok(out)
}

/// Write sequences as JSONL (the format `load_jsonl_dataset` reads). Only
/// the valid prefix of each sequence is written; padding is reconstructed
/// on load.
pub fn save_jsonl_dataset(path: &Path, seqs: &[Sequence]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for seq in seqs {
        let label_json = match seq.label {
            Some(l) => serde_json::Value::from(l as u64),
            None => serde_json::Value::Null,
        };
        let line = match &seq.input {
            SequenceInput::Continuous(x) => {
                let rows: Vec<Vec<f64>> = (0..seq.pad_len).map(|i| x.row(i).to_vec()).collect();
                serde_json::json!({ "label": label_json, "x": rows })
            }
            SequenceInput::Tokens(t) => {
                serde_json::json!({ "label": label_json, "tokens": &t[..seq.pad_len] })
            }
        };
        writeln!(file, "{}", line)?;
    }
    Ok(())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{:02x}", b));
    }
    s
}
