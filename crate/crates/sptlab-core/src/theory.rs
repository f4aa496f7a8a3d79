//! Local sensitivity of supervised vs. reconstruction losses to
//! attention-score directions, checked numerically.
//!
//! Setting: input-independent scores `s_ij(α) = α·Δ_ij`, attention
//! `a_ij(α) = softmax_j(s_ij)`, outputs `o_i = Σ_j a_ij X_j` over centered
//! random tokens `X` with autocorrelation `C_ij = E[X_iᵀX_j]`. For any
//! column-centered direction (`Δᵀ1 = 0`), the mean-pooled supervised loss
//! has zero derivative at `α = 0` — uniform attention is a blind spot —
//! while the masked-reconstruction loss `(1/2L)Σ_i E‖X_i − o_i‖²` has
//! derivative `−(1/L²)⟨Δ̄, C⟩_F` with `Δ̄` the row-centered direction. A
//! variant that excludes token-to-same-token attention (`a_ii = 0`) has
//! derivative `−(1/(L−1)²)Σ_{i≠j} Δ_ij C_ij` for doubly off-diagonal
//! centered `Δ`. Both are verified here against Monte-Carlo
//! finite differences with common random numbers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax_rows, streams, Matrix, SeededRng};

/// Centering residual accepted by the pattern certificates.
pub const CENTERING_TOL: f64 = 1e-10;
/// Target residual for the alternating off-diagonal centering projection.
const PROJECTION_TOL: f64 = 1e-12;
const PROJECTION_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternVariant {
    /// Full softmax rows; directions live in `{Γ : Γᵀ1 = 0}`.
    #[serde(rename = "plain")]
    Plain,
    /// Self-attention excluded: `a_ii = 0`; directions have zero diagonal
    /// and zero off-diagonal row and column sums.
    #[serde(rename = "diag-masked")]
    DiagMasked,
}

/// A validated score direction with its centering certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePattern {
    delta: Matrix,
    variant: PatternVariant,
    /// Max |column sum| (plain) or |off-diagonal column sum| (diag-masked).
    pub max_col_sum: f64,
    /// Max |off-diagonal row sum|; populated for diag-masked patterns.
    pub max_offdiag_row_sum: f64,
    /// True when every diagonal entry is exactly zero.
    pub diag_is_zero: bool,
    /// Human-readable construction label carried into reports.
    pub label: String,
}

impl ScorePattern {
    /// Wrap an already-centered direction, computing and checking the
    /// certificate.
    pub fn new(delta: Matrix, variant: PatternVariant, label: impl Into<String>) -> Result<Self> {
        if delta.rows() != delta.cols() || delta.rows() < 2 {
            return Err(Error::Shape(format!(
                "score pattern must be square with L ≥ 2, got {:?}",
                delta.shape()
            )));
        }
        let l = delta.rows();
        let mut max_col = 0.0f64;
        let mut max_offdiag_row = 0.0f64;
        let mut diag_zero = true;
        for j in 0..l {
            let mut col = 0.0;
            for i in 0..l {
                if !(variant == PatternVariant::DiagMasked && i == j) {
                    col += delta.at(i, j);
                }
            }
            max_col = max_col.max(col.abs());
        }
        for i in 0..l {
            let mut row = 0.0;
            for j in 0..l {
                if i != j {
                    row += delta.at(i, j);
                }
            }
            max_offdiag_row = max_offdiag_row.max(row.abs());
            if delta.at(i, i) != 0.0 {
                diag_zero = false;
            }
        }
        let p = ScorePattern {
            delta,
            variant,
            max_col_sum: max_col,
            max_offdiag_row_sum: max_offdiag_row,
            diag_is_zero: diag_zero,
            label: label.into(),
        };
        p.validate()?;
        Ok(p)
    }

    /// Check the centering certificate against [`CENTERING_TOL`].
    pub fn validate(&self) -> Result<()> {
        match self.variant {
            PatternVariant::Plain => {
                if self.max_col_sum >= CENTERING_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "pattern '{}' is not column-centered: max |column sum| = {:e}",
                        self.label, self.max_col_sum
                    )));
                }
            }
            PatternVariant::DiagMasked => {
                if !self.diag_is_zero {
                    return Err(Error::InvalidArgument(format!(
                        "pattern '{}' has nonzero diagonal entries",
                        self.label
                    )));
                }
                if self.max_col_sum >= CENTERING_TOL || self.max_offdiag_row_sum >= CENTERING_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "pattern '{}' off-diagonal sums not centered: row {:e}, col {:e}",
                        self.label, self.max_offdiag_row_sum, self.max_col_sum
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn delta(&self) -> &Matrix {
        &self.delta
    }

    pub fn variant(&self) -> PatternVariant {
        self.variant
    }

    pub fn seq_len(&self) -> usize {
        self.delta.rows()
    }

    /// Attention weights `a_ij(α)` for this pattern (input-independent).
    pub fn attention_at(&self, alpha: f64) -> Matrix {
        let l = self.seq_len();
        let scores = self.delta.scaled(alpha);
        match self.variant {
            PatternVariant::Plain => softmax_rows(&scores).expect("finite scores"),
            PatternVariant::DiagMasked => {
                let mut a = Matrix::zeros(l, l);
                for i in 0..l {
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..l {
                        if j != i {
                            mx = mx.max(scores.at(i, j));
                        }
                    }
                    let mut denom = 0.0;
                    for j in 0..l {
                        if j != i {
                            let e = (scores.at(i, j) - mx).exp();
                            a.set(i, j, e);
                            denom += e;
                        }
                    }
                    for j in 0..l {
                        if j != i {
                            a.set(i, j, a.at(i, j) / denom);
                        }
                    }
                }
                a
            }
        }
    }
}

/// Recipe for a raw direction before projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PatternKind {
    /// `amp` inside the band `|i−j| ≤ w`, zero outside.
    Locality { w: usize, amp: f64 },
    /// Uniform `U(−1, 1)` entries from the given seed.
    Random { seed: u64 },
}

impl PatternKind {
    fn label(&self) -> String {
        match self {
            PatternKind::Locality { w, amp } => format!("locality(w={}, amp={})", w, amp),
            PatternKind::Random { seed } => format!("random(seed={})", seed),
        }
    }
}

/// Build a raw pattern and project it into the variant's feasible set:
/// plain → column-center; diag-masked → zero the diagonal, then alternate
/// off-diagonal row/column centering until both residuals are below 1e-12.
pub fn make_pattern(kind: PatternKind, l: usize, variant: PatternVariant) -> Result<ScorePattern> {
    if l < 2 {
        return Err(Error::InvalidArgument(format!(
            "pattern length must be ≥ 2, got {}",
            l
        )));
    }
    let mut delta = match kind {
        PatternKind::Locality { w, amp } => {
            Matrix::from_fn(l, l, |i, j| if i.abs_diff(j) <= w { amp } else { 0.0 })
        }
        PatternKind::Random { seed } => {
            let mut rng = SeededRng::from_stream(seed, streams::theory_mc(PATTERN_DRAW_PAYLOAD));
            let mut m = Matrix::zeros(l, l);
            for v in m.data_mut() {
                *v = rng.uniform(-1.0, 1.0);
            }
            m
        }
    };

    match variant {
        PatternVariant::Plain => {
            // Subtract each column mean; exact in one pass.
            for j in 0..l {
                let mean = (0..l).map(|i| delta.at(i, j)).sum::<f64>() / l as f64;
                for i in 0..l {
                    delta.set(i, j, delta.at(i, j) - mean);
                }
            }
        }
        PatternVariant::DiagMasked => {
            for i in 0..l {
                delta.set(i, i, 0.0);
            }
            let mut converged = false;
            for _ in 0..PROJECTION_MAX_ITERS {
                for i in 0..l {
                    let mean =
                        (0..l).filter(|&j| j != i).map(|j| delta.at(i, j)).sum::<f64>()
                            / (l - 1) as f64;
                    for j in 0..l {
                        if j != i {
                            delta.set(i, j, delta.at(i, j) - mean);
                        }
                    }
                }
                for j in 0..l {
                    let mean =
                        (0..l).filter(|&i| i != j).map(|i| delta.at(i, j)).sum::<f64>()
                            / (l - 1) as f64;
                    for i in 0..l {
                        if i != j {
                            delta.set(i, j, delta.at(i, j) - mean);
                        }
                    }
                }
                let row_res = (0..l)
                    .map(|i| {
                        (0..l)
                            .filter(|&j| j != i)
                            .map(|j| delta.at(i, j))
                            .sum::<f64>()
                            .abs()
                    })
                    .fold(0.0f64, f64::max);
                let col_res = (0..l)
                    .map(|j| {
                        (0..l)
                            .filter(|&i| i != j)
                            .map(|i| delta.at(i, j))
                            .sum::<f64>()
                            .abs()
                    })
                    .fold(0.0f64, f64::max);
                if row_res < PROJECTION_TOL && col_res < PROJECTION_TOL {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::InvalidArgument(
                    "off-diagonal centering projection did not converge".into(),
                ));
            }
        }
    }
    ScorePattern::new(delta, variant, kind.label())
}

/// Centered random token models with closed-form autocorrelation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TokenKind {
    /// Independent `N(0, σ²I_d)` tokens: `C_ij = σ²d·[i = j]`.
    Iid { sigma2: f64 },
    /// Stationary AR(1) over positions: `C_ij = σ²d·ρ^|i−j|`.
    Ar1 { rho: f64, sigma2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenModel {
    pub kind: TokenKind,
    pub dim: usize,
    pub len: usize,
}

impl TokenModel {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.len < 2 {
            return Err(Error::InvalidArgument(format!(
                "token model needs d ≥ 1 and L ≥ 2, got d={}, L={}",
                self.dim, self.len
            )));
        }
        let sigma2 = match self.kind {
            TokenKind::Iid { sigma2 } => sigma2,
            TokenKind::Ar1 { rho, sigma2 } => {
                if rho.abs() >= 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "AR(1) requires |ρ| < 1, got {}",
                        rho
                    )));
                }
                sigma2
            }
        };
        if sigma2 <= 0.0 {
            return Err(Error::InvalidArgument(
                "degenerate token model: σ² must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Exact autocorrelation matrix `C_ij = E[X_iᵀX_j]`.
    pub fn autocorrelation(&self) -> Matrix {
        let d = self.dim as f64;
        match self.kind {
            TokenKind::Iid { sigma2 } => {
                Matrix::from_fn(self.len, self.len, |i, j| {
                    if i == j {
                        sigma2 * d
                    } else {
                        0.0
                    }
                })
            }
            TokenKind::Ar1 { rho, sigma2 } => Matrix::from_fn(self.len, self.len, |i, j| {
                sigma2 * d * rho.powi(i.abs_diff(j) as i32)
            }),
        }
    }

    /// Draw one L×d token matrix.
    pub fn sample(&self, rng: &mut SeededRng) -> Matrix {
        let mut x = Matrix::zeros(self.len, self.dim);
        match self.kind {
            TokenKind::Iid { sigma2 } => {
                let s = sigma2.sqrt();
                fill_gaussian(rng, x.data_mut(), s);
            }
            TokenKind::Ar1 { rho, sigma2 } => {
                let s = sigma2.sqrt();
                let innov = s * (1.0 - rho * rho).sqrt();
                let mut g = vec![0.0; self.len * self.dim];
                fill_gaussian(rng, &mut g, 1.0);
                for c in 0..self.dim {
                    let mut prev = s * g[c];
                    x.set(0, c, prev);
                    for i in 1..self.len {
                        prev = rho * prev + innov * g[i * self.dim + c];
                        x.set(i, c, prev);
                    }
                }
            }
        }
        x
    }
}

fn fill_gaussian(rng: &mut SeededRng, out: &mut [f64], scale: f64) {
    let mut i = 0;
    while i + 1 < out.len() {
        let (a, b) = rng.gaussian_pair();
        out[i] = scale * a;
        out[i + 1] = scale * b;
        i += 2;
    }
    if i < out.len() {
        let (a, _) = rng.gaussian_pair();
        out[i] = scale * a;
    }
}

/// Exact derivative of the reconstruction loss at `α = 0`:
/// plain `−(1/L²)⟨Δ̄, C⟩_F` with `Δ̄ = Δ − (1/L)Δ11ᵀ`;
/// diag-masked `−(1/(L−1)²)Σ_{i≠j} Δ_ij C_ij`.
pub fn spt_grad_closed_form(p: &ScorePattern, c: &Matrix) -> Result<f64> {
    p.validate()?;
    let l = p.seq_len();
    if c.shape() != (l, l) {
        return Err(Error::Shape(format!(
            "autocorrelation shape {:?} does not match pattern length {}",
            c.shape(),
            l
        )));
    }
    let delta = p.delta();
    Ok(match p.variant() {
        PatternVariant::Plain => {
            let mut acc = 0.0;
            for i in 0..l {
                let row_mean = (0..l).map(|j| delta.at(i, j)).sum::<f64>() / l as f64;
                for j in 0..l {
                    acc += (delta.at(i, j) - row_mean) * c.at(i, j);
                }
            }
            -acc / (l * l) as f64
        }
        PatternVariant::DiagMasked => {
            let mut acc = 0.0;
            for i in 0..l {
                for j in 0..l {
                    if i != j {
                        acc += delta.at(i, j) * c.at(i, j);
                    }
                }
            }
            -acc / ((l - 1) * (l - 1)) as f64
        }
    })
}

/// Everything one verification run measured, serializable as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropositionReport {
    pub pattern: String,
    pub variant: String,
    pub seq_len: usize,
    pub token_dim: usize,
    pub token_model: String,
    /// Supervised loss used for the probe: squared error of a fixed random
    /// linear readout against a token-correlated scalar label.
    pub label_model: String,
    pub n_mc: usize,
    pub h: f64,
    pub closed_form: f64,
    pub fd_sup: f64,
    pub fd_spt: f64,
    pub mc_stderr_sup: f64,
    pub mc_stderr_spt: f64,
    /// |fd_sup| must fall below max(1e-3, 3·stderr).
    pub tol_sup: f64,
    /// |closed_form − fd_spt| must fall below 3·stderr + 1e-4.
    pub tol_spt: f64,
    pub pass_sup: bool,
    pub pass_spt: bool,
    pub pass: bool,
}

const MC_BATCH: usize = 1000;
/// Stream payloads above the batch range, reserved for one-off draws.
const PROBE_DRAW_PAYLOAD: u64 = 1 << 40;
const PATTERN_DRAW_PAYLOAD: u64 = (1 << 40) + 1;

struct McMoments {
    n: usize,
    sum_sup: f64,
    sumsq_sup: f64,
    sum_spt: f64,
    sumsq_spt: f64,
}

/// Estimate both loss derivatives at `α = 0` by central finite differences
/// under Monte Carlo, and compare against the closed form.
///
/// Common random numbers: each sample evaluates both `α = ±h` on the same
/// tokens and label, so the differenced estimator's variance is orders of
/// magnitude below naive two-run differencing. Batches use independent RNG
/// streams and are reduced in fixed order, so the result is independent of
/// thread count.
pub fn verify_proposition(
    p: &ScorePattern,
    tm: &TokenModel,
    n_mc: usize,
    h: f64,
    seed: u64,
) -> Result<PropositionReport> {
    p.validate()?;
    tm.validate()?;
    if tm.len != p.seq_len() {
        return Err(Error::Shape(format!(
            "token model length {} does not match pattern length {}",
            tm.len,
            p.seq_len()
        )));
    }
    if n_mc < 1000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1000 Monte Carlo samples, got {}",
            n_mc
        )));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("step h must be positive".into()));
    }

    let l = p.seq_len();
    let d = tm.dim;
    // Scores are input-independent, so each ±h attention matrix is fixed
    // across all samples and computed once.
    let a_plus = p.attention_at(h);
    let a_minus = p.attention_at(-h);

    // Fixed random probe w (readout) and label direction v.
    let mut probe_rng = SeededRng::from_stream(seed, streams::theory_mc(PROBE_DRAW_PAYLOAD));
    let mut w = vec![0.0; d];
    let mut v = vec![0.0; d];
    fill_gaussian(&mut probe_rng, &mut w, 1.0);
    fill_gaussian(&mut probe_rng, &mut v, 1.0);
    let label_noise = 0.1;

    let n_batches = n_mc.div_ceil(MC_BATCH);
    let moments: Vec<McMoments> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let start = b * MC_BATCH;
            let count = MC_BATCH.min(n_mc - start);
            let mut rng = SeededRng::from_stream(seed, streams::theory_mc(b as u64));
            let mut acc = McMoments {
                n: count,
                sum_sup: 0.0,
                sumsq_sup: 0.0,
                sum_spt: 0.0,
                sumsq_spt: 0.0,
            };
            for _ in 0..count {
                let x = tm.sample(&mut rng);
                let (noise, _) = rng.gaussian_pair();
                // Label correlated with the token mean through v.
                let mut y = label_noise * noise;
                for i in 0..l {
                    for c in 0..d {
                        y += v[c] * x.at(i, c) / l as f64;
                    }
                }
                let eval = |a: &Matrix| -> (f64, f64) {
                    let o = a.matmul(&x);
                    let mut readout = 0.0;
                    let mut recon = 0.0;
                    for i in 0..l {
                        for c in 0..d {
                            let oic = o.at(i, c);
                            readout += w[c] * oic / l as f64;
                            let r = x.at(i, c) - oic;
                            recon += r * r;
                        }
                    }
                    let sup = (readout - y) * (readout - y);
                    (sup, recon / (2.0 * l as f64))
                };
                let (sup_p, spt_p) = eval(&a_plus);
                let (sup_m, spt_m) = eval(&a_minus);
                let d_sup = (sup_p - sup_m) / (2.0 * h);
                let d_spt = (spt_p - spt_m) / (2.0 * h);
                acc.sum_sup += d_sup;
                acc.sumsq_sup += d_sup * d_sup;
                acc.sum_spt += d_spt;
                acc.sumsq_spt += d_spt * d_spt;
            }
            acc
        })
        .collect();

    let mut total = McMoments {
        n: 0,
        sum_sup: 0.0,
        sumsq_sup: 0.0,
        sum_spt: 0.0,
        sumsq_spt: 0.0,
    };
    for m in moments {
        total.n += m.n;
        total.sum_sup += m.sum_sup;
        total.sumsq_sup += m.sumsq_sup;
        total.sum_spt += m.sum_spt;
        total.sumsq_spt += m.sumsq_spt;
    }
    let n = total.n as f64;
    let stderr = |sum: f64, sumsq: f64| -> f64 {
        let var = ((sumsq - sum * sum / n) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    };
    let fd_sup = total.sum_sup / n;
    let fd_spt = total.sum_spt / n;
    let mc_stderr_sup = stderr(total.sum_sup, total.sumsq_sup);
    let mc_stderr_spt = stderr(total.sum_spt, total.sumsq_spt);

    let closed_form = spt_grad_closed_form(p, &tm.autocorrelation())?;
    let tol_sup = (3.0 * mc_stderr_sup).max(1e-3);
    let tol_spt = 3.0 * mc_stderr_spt + 1e-4;
    let pass_sup = fd_sup.abs() < tol_sup;
    let pass_spt = (closed_form - fd_spt).abs() < tol_spt;

    Ok(PropositionReport {
        pattern: p.label.clone(),
        variant: match p.variant() {
            PatternVariant::Plain => "plain".into(),
            PatternVariant::DiagMasked => "diag-masked".into(),
        },
        seq_len: l,
        token_dim: d,
        token_model: match tm.kind {
            TokenKind::Iid { sigma2 } => format!("iid(sigma2={})", sigma2),
            TokenKind::Ar1 { rho, sigma2 } => format!("ar1(rho={}, sigma2={})", rho, sigma2),
        },
        label_model: "squared-error linear probe of the pooled output".into(),
        n_mc: total.n,
        h,
        closed_form,
        fd_sup,
        fd_spt,
        mc_stderr_sup,
        mc_stderr_spt,
        tol_sup,
        tol_spt,
        pass_sup,
        pass_spt,
        pass: pass_sup && pass_spt,
    })
}

/// Max |difference| between attention weights from scores `b + αΔ` and
/// from `b + αΔ̄` with `Δ̄` the row-centered direction. Softmax is
/// invariant to per-row shifts, so this should vanish to float noise.
pub fn lemma_invariance_check(delta: &Matrix, b: &Matrix, alpha: f64) -> Result<f64> {
    if delta.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "direction shape {:?} does not match base scores {:?}",
            delta.shape(),
            b.shape()
        )));
    }
    let (l, cols) = delta.shape();
    let mut centered = delta.clone();
    for i in 0..l {
        let mean = (0..cols).map(|j| delta.at(i, j)).sum::<f64>() / cols as f64;
        for j in 0..cols {
            centered.set(i, j, delta.at(i, j) - mean);
        }
    }
    let mut s1 = b.clone();
    s1.add_scaled(delta, alpha);
    let mut s2 = b.clone();
    s2.add_scaled(&centered, alpha);
    let a1 = softmax_rows(&s1)?;
    let a2 = softmax_rows(&s2)?;
    let mut max_dev = 0.0f64;
    for (x, y) in a1.data().iter().zip(a2.data()) {
        max_dev = max_dev.max((x - y).abs());
    }
    Ok(max_dev)
}
