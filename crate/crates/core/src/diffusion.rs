//! Discrete diffusion over the shifted alphabet: noise schedule,
//! discretized-Gaussian transition matrices, cumulative products, forward
//! corruption, and reverse posteriors (single-step and step-skipping).
//!
//! Matrices are `2^k × 2^k` with `Q[(a, b)] = Pr(x_t = b | x_{t-1} = a)`
//! (zero-based indices, symbol `s` lives at index `s − 1`).

use std::borrow::Cow;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Constellation, SymbolVector};

/// How off-diagonal Gaussian weights are normalized in [`build_transition`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalizer {
    /// `Σ_{m=-(2^k-1)}^{2^k-1} exp(−4m²/((2^k−1)²β))`. Every row is a valid
    /// distribution with a strictly positive diagonal for any `β > 0`.
    #[default]
    TwoSided,
    /// `Σ_{m=1}^{2^k} exp(−4m²/((2^k−1)²β))`. Interior rows get a negative
    /// diagonal unless `β` is large; construction then fails.
    OneSided,
}

/// Linear schedule `β_1 … β_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start.is_finite() && beta_end.is_finite()) || beta_end < beta_start {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self { betas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn start(&self) -> f64 {
        self.betas[0]
    }

    pub fn end(&self) -> f64 {
        *self.betas.last().expect("non-empty schedule")
    }
}

fn gaussian_weight(distance: usize, levels: usize, beta: f64) -> f64 {
    let span = (levels - 1) as f64;
    (-4.0 * (distance * distance) as f64 / (span * span * beta)).exp()
}

/// Discretized-Gaussian transition matrix for one step.
pub fn build_transition(c: Constellation, beta: f64, normalizer: Normalizer) -> Result<DMatrix<f64>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let levels = c.levels();
    let z: f64 = match normalizer {
        Normalizer::TwoSided => (0..levels)
            .map(|m| if m == 0 { 1.0 } else { 2.0 * gaussian_weight(m, levels, beta) })
            .sum(),
        Normalizer::OneSided => (1..=levels).map(|m| gaussian_weight(m, levels, beta)).sum(),
    };
    let mut q = DMatrix::from_fn(levels, levels, |i, j| {
        if i == j {
            0.0
        } else {
            gaussian_weight(i.abs_diff(j), levels, beta) / z
        }
    });
    for i in 0..levels {
        let off: f64 = q.row(i).sum();
        let diag = 1.0 - off;
        if diag < 0.0 {
            return Err(Error::NegativeDiagonal { beta, row: i, value: diag });
        }
        q[(i, i)] = diag;
    }
    Ok(q)
}

/// Per-step and cumulative transition matrices for a schedule.
#[derive(Clone, Debug)]
pub struct TransitionSet {
    constellation: Constellation,
    schedule: NoiseSchedule,
    normalizer: Normalizer,
    q: Vec<DMatrix<f64>>,
    /// `qbar[t] = Q_1 ⋯ Q_t`, with `qbar[0] = I`.
    qbar: Vec<DMatrix<f64>>,
}

impl TransitionSet {
    pub fn new(c: Constellation, schedule: NoiseSchedule) -> Result<Self> {
        Self::with_normalizer(c, schedule, Normalizer::TwoSided)
    }

    pub fn with_normalizer(c: Constellation, schedule: NoiseSchedule, normalizer: Normalizer) -> Result<Self> {
        let q = schedule
            .betas()
            .iter()
            .map(|&b| build_transition(c, b, normalizer))
            .collect::<Result<Vec<_>>>()?;
        let mut qbar = Vec::with_capacity(q.len() + 1);
        qbar.push(DMatrix::identity(c.levels(), c.levels()));
        for qt in &q {
            let next = qbar.last().expect("seeded with identity") * qt;
            qbar.push(next);
        }
        Ok(Self {
            constellation: c,
            schedule,
            normalizer,
            q,
            qbar,
        })
    }

    pub fn constellation(&self) -> Constellation {
        self.constellation
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
    }

    pub fn steps(&self) -> usize {
        self.q.len()
    }

    /// `Q_t`, `t ∈ 1..=T`.
    pub fn q(&self, t: usize) -> &DMatrix<f64> {
        &self.q[t - 1]
    }

    /// `Q̄_t`, `t ∈ 0..=T`.
    pub fn qbar(&self, t: usize) -> &DMatrix<f64> {
        &self.qbar[t]
    }

    /// `Q̄_{t1,t2} = Q_{t1+1} ⋯ Q_{t2}` by forward multiplication.
    pub fn between(&self, t1: usize, t2: usize) -> Cow<'_, DMatrix<f64>> {
        assert!(t1 < t2 && t2 <= self.steps(), "need t1 < t2 <= T, got {t1}, {t2}");
        if t1 == 0 {
            return Cow::Borrowed(&self.qbar[t2]);
        }
        if t2 == t1 + 1 {
            return Cow::Borrowed(&self.q[t1]);
        }
        let mut acc = self.q[t1].clone();
        for qt in &self.q[t1 + 1..t2] {
            acc *= qt;
        }
        Cow::Owned(acc)
    }

    /// Expected fraction of corrupted entries in `x_t` under a uniform `x_0`.
    pub fn expected_forward_ser(&self, t: usize) -> f64 {
        let levels = self.constellation.levels() as f64;
        1.0 - self.qbar[t].trace() / levels
    }

    /// Checksum identifying the alphabet and schedule (bitwise).
    pub fn schedule_hash(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.constellation.bits().to_le_bytes());
        h.update(&[self.normalizer as u8]);
        for b in self.schedule.betas() {
            h.update(&b.to_bits().to_le_bytes());
        }
        h.finalize()
    }
}

/// Row-stochastic matrix, one categorical distribution per symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ProbabilityMatrix {
    pub const ROW_TOLERANCE: f64 = 1e-9;

    /// Wraps row-major data, checking non-negativity and unit row sums.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols || cols == 0 {
            return Err(Error::Dimension(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        let out = Self { rows, cols, data };
        for i in 0..rows {
            let row = out.row(i);
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Degenerate(format!("row {i} has a negative or NaN entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::Degenerate(format!("row {i} sums to {s}")));
            }
        }
        Ok(out)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![1.0 / cols as f64; rows * cols])
    }

    /// `1(x)`.
    pub fn one_hot(x: &[u32], levels: usize) -> Self {
        let mut data = vec![0.0; x.len() * levels];
        for (i, &s) in x.iter().enumerate() {
            data[i * levels + s as usize - 1] = 1.0;
        }
        Self::from_raw(x.len(), levels, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.data[i * self.cols + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Most probable symbol per row; ties go to the smallest symbol.
    pub fn argmax(&self) -> SymbolVector {
        SymbolVector(
            (0..self.rows)
                .map(|i| {
                    let row = self.row(i);
                    let mut best = 0;
                    for (c, &p) in row.iter().enumerate() {
                        if p > row[best] {
                            best = c;
                        }
                    }
                    best as u32 + 1
                })
                .collect(),
        )
    }

    /// Draws one symbol per row.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SymbolVector {
        SymbolVector((0..self.rows).map(|i| sample_row(self.row(i), rng)).collect())
    }
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> u32 {
    let mut u = rng.gen::<f64>() * row.iter().sum::<f64>();
    for (c, &p) in row.iter().enumerate() {
        if u < p {
            return c as u32 + 1;
        }
        u -= p;
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1) as u32 + 1
}

/// `x_t ~ Cat(1(x_0) Q̄_t)`, entrywise.
pub fn forward_sample<R: Rng + ?Sized>(x0: &[u32], t: usize, ts: &TransitionSet, rng: &mut R) -> SymbolVector {
    let qbar = ts.qbar(t);
    let levels = qbar.ncols();
    let mut row = vec![0.0; levels];
    SymbolVector(
        x0.iter()
            .map(|&s| {
                for (c, r) in row.iter_mut().enumerate() {
                    *r = qbar[(s as usize - 1, c)];
                }
                sample_row(&row, rng)
            })
            .collect(),
    )
}

/// Row `i`: `∝ (1(x_hi)_i Q_skipᵀ) ⊙ (P_i Q̄_lo)`, where `Q_skip` carries the
/// chain from the lower step to the upper one.
pub fn reverse_posterior(
    x_hi: &[u32],
    p: &ProbabilityMatrix,
    q_skip: &DMatrix<f64>,
    qbar_lo: &DMatrix<f64>,
) -> Result<ProbabilityMatrix> {
    let levels = p.cols();
    if x_hi.len() != p.rows() || q_skip.nrows() != levels || qbar_lo.nrows() != levels {
        return Err(Error::Dimension(format!(
            "{} symbols, {}x{} probabilities, {} levels in transitions",
            x_hi.len(),
            p.rows(),
            levels,
            q_skip.nrows()
        )));
    }
    let mut out = vec![0.0; p.rows() * levels];
    for (i, &s) in x_hi.iter().enumerate() {
        let prow = p.row(i);
        let orow = &mut out[i * levels..(i + 1) * levels];
        let mut total = 0.0;
        for (c, o) in orow.iter_mut().enumerate() {
            let mut mixed = 0.0;
            for (a, &pa) in prow.iter().enumerate() {
                mixed += pa * qbar_lo[(a, c)];
            }
            *o = q_skip[(c, s as usize - 1)] * mixed;
            total += *o;
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Degenerate(format!("posterior normalizer {total:e} at row {i}")));
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    Ok(ProbabilityMatrix::from_raw(p.rows(), levels, out))
}

/// Pulls a gradient on the output of [`reverse_posterior`] back to `p`.
pub fn reverse_posterior_backward(
    x_hi: &[u32],
    p: &ProbabilityMatrix,
    q_skip: &DMatrix<f64>,
    qbar_lo: &DMatrix<f64>,
    post: &ProbabilityMatrix,
    d_post: &[f64],
) -> Vec<f64> {
    let levels = p.cols();
    let mut d_p = vec![0.0; p.rows() * levels];
    let mut d_mixed = vec![0.0; levels];
    for (i, &s) in x_hi.iter().enumerate() {
        let prow = p.row(i);
        let qrow = post.row(i);
        let drow = &d_post[i * levels..(i + 1) * levels];
        // Recover the normalizer S = Σ_c A_c B_c.
        let mut total = 0.0;
        for c in 0..levels {
            let mut mixed = 0.0;
            for (a, &pa) in prow.iter().enumerate() {
                mixed += pa * qbar_lo[(a, c)];
            }
            total += q_skip[(c, s as usize - 1)] * mixed;
        }
        let centred: f64 = drow.iter().zip(qrow).map(|(d, q)| d * q).sum();
        for c in 0..levels {
            d_mixed[c] = (drow[c] - centred) / total * q_skip[(c, s as usize - 1)];
        }
        let out = &mut d_p[i * levels..(i + 1) * levels];
        for (a, o) in out.iter_mut().enumerate() {
            *o = (0..levels).map(|c| d_mixed[c] * qbar_lo[(a, c)]).sum();
        }
    }
    d_p
}

/// `P_θ(x_{t−1} | x_t, y)` built from a clean-symbol prediction.
pub fn model_posterior(xt: &[u32], p: &ProbabilityMatrix, t: usize, ts: &TransitionSet) -> Result<ProbabilityMatrix> {
    check_step(t, ts)?;
    reverse_posterior(xt, p, ts.q(t), ts.qbar(t - 1))
}

/// `P(x_{t−1} | x_t, x_0)`.
pub fn true_posterior(xt: &[u32], x0: &[u32], t: usize, ts: &TransitionSet) -> Result<ProbabilityMatrix> {
    let levels = ts.constellation().levels();
    model_posterior(xt, &ProbabilityMatrix::one_hot(x0, levels), t, ts)
}

/// `P_θ(x_{t1} | x_{t2}, y)` for `0 ≤ t1 < t2 ≤ T`.
pub fn skip_posterior(
    x_t2: &[u32],
    p: &ProbabilityMatrix,
    t1: usize,
    t2: usize,
    ts: &TransitionSet,
) -> Result<ProbabilityMatrix> {
    if !(t1 < t2 && t2 <= ts.steps()) {
        return Err(Error::InvalidArgument(format!("need 0 <= t1 < t2 <= T, got {t1}, {t2}")));
    }
    reverse_posterior(x_t2, p, &ts.between(t1, t2), ts.qbar(t1))
}

fn check_step(t: usize, ts: &TransitionSet) -> Result<()> {
    if t == 0 || t > ts.steps() {
        return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", ts.steps())));
    }
    Ok(())
}
