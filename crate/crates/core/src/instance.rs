//! Constellations, the complex → real → shifted-integer system pipeline,
//! instance sampling and the L2-regularized system used for
//! under-determined detection.
//!
//! Detectors in this crate work on the shifted alphabet `{1, …, 2^k}`:
//! a real-domain vector `x_r` with odd entries in `{±1, …, ±(2^k−1)}` maps
//! to `x = (x_r + (2^k+1)e)/2`, the received vector to
//! `y = y_r + (2^k+1) H_r e` and the channel to `H = 2 H_r`. The residual
//! `‖y − Hx‖` is unchanged by the map.

use std::ops::Deref;

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square QAM constellation with `2^k` levels per real dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constellation {
    bits: u32,
}

impl Constellation {
    pub const MAX_BITS: u32 = 8;

    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > Self::MAX_BITS {
            return Err(Error::InvalidArgument(format!(
                "bits per real dimension must be in 1..={}, got {bits}",
                Self::MAX_BITS
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    /// Alphabet size `2^k`.
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    /// `{−(2^k−1), …, −1, 1, …, 2^k−1}` in ascending order.
    pub fn real_alphabet(&self) -> Vec<i64> {
        let top = self.levels() as i64 - 1;
        (0..self.levels() as i64).map(|i| -top + 2 * i).collect()
    }

    /// Per-entry variance of a uniform symbol, by enumeration of the alphabet.
    pub fn variance(&self) -> f64 {
        let alphabet = self.real_alphabet();
        let n = alphabet.len() as f64;
        let mean = alphabet.iter().sum::<i64>() as f64 / n;
        alphabet
            .iter()
            .map(|&a| (a as f64 - mean).powi(2))
            .sum::<f64>()
            / n
    }

    /// The shift `2^k + 1` between real and shifted coordinates.
    pub fn offset(&self) -> f64 {
        (self.levels() + 1) as f64
    }

    /// Shifted-domain image of the real origin, `(2^k+1)/2`.
    pub fn midpoint(&self) -> f64 {
        self.offset() / 2.0
    }

    pub fn contains(&self, symbol: u32) -> bool {
        symbol >= 1 && symbol as usize <= self.levels()
    }

    pub fn contains_real(&self, value: i64) -> bool {
        value.rem_euclid(2) == 1 && value.abs() < self.levels() as i64
    }
}

/// Detected or transmitted symbols in the shifted alphabet `{1, …, 2^k}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SymbolVector(pub Vec<u32>);

impl SymbolVector {
    pub fn as_f64(&self) -> DVector<f64> {
        DVector::from_iterator(self.0.len(), self.0.iter().map(|&s| s as f64))
    }

    pub fn check_alphabet(&self, c: Constellation) -> Result<()> {
        match self.0.iter().position(|&s| !c.contains(s)) {
            Some(index) => Err(Error::OutOfAlphabet {
                index,
                value: self.0[index] as i64,
            }),
            None => Ok(()),
        }
    }
}

impl Deref for SymbolVector {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for SymbolVector {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// `y_c = H_c x_c + n_c` with circular Gaussian noise of std `sigma_c`.
#[derive(Clone, Debug)]
pub struct ComplexSystem {
    pub h: DMatrix<Complex<f64>>,
    pub y: DVector<Complex<f64>>,
    pub sigma_c: f64,
    pub x: Option<Vec<Complex<i64>>>,
}

/// Real-valued equivalent of a [`ComplexSystem`].
#[derive(Clone, Debug)]
pub struct RealSystem {
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma_n: f64,
    pub x: Option<Vec<i64>>,
}

/// A detection problem in shifted coordinates.
///
/// `regularized` marks the augmented system produced by [`regularize`];
/// such instances have `2N_r + 2N_t` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "InstanceRecord", try_from = "InstanceRecord")]
pub struct ProblemInstance {
    pub constellation: Constellation,
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma_n: f64,
    pub x_star: Option<SymbolVector>,
    pub snr_db: f64,
    pub regularized: bool,
}

impl ProblemInstance {
    /// Number of real unknowns, `2N_t`.
    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    /// True when the (unregularized) channel has fewer rows than columns.
    pub fn is_underdetermined(&self) -> bool {
        !self.regularized && self.h.nrows() < self.h.ncols()
    }

    pub fn truth(&self) -> Result<&SymbolVector> {
        self.x_star.as_ref().ok_or(Error::MissingGroundTruth)
    }

    /// Squared residual `‖y − Hx‖²`.
    pub fn residual(&self, x: &[u32]) -> f64 {
        let mut total = 0.0;
        for r in 0..self.h.nrows() {
            let mut acc = self.y[r];
            for (c, &s) in x.iter().enumerate() {
                acc -= self.h[(r, c)] * s as f64;
            }
            total += acc * acc;
        }
        total
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    k: u32,
    snr_db: f64,
    sigma_n: f64,
    #[serde(default)]
    regularized: bool,
    h: Vec<Vec<f64>>,
    y: Vec<f64>,
    #[serde(default)]
    x_star: Option<Vec<u32>>,
}

impl From<ProblemInstance> for InstanceRecord {
    fn from(p: ProblemInstance) -> Self {
        Self {
            k: p.constellation.bits(),
            snr_db: p.snr_db,
            sigma_n: p.sigma_n,
            regularized: p.regularized,
            h: p.h.row_iter().map(|r| r.iter().copied().collect()).collect(),
            y: p.y.iter().copied().collect(),
            x_star: p.x_star.map(|x| x.0),
        }
    }
}

impl TryFrom<InstanceRecord> for ProblemInstance {
    type Error = Error;

    fn try_from(r: InstanceRecord) -> Result<Self> {
        let constellation = Constellation::new(r.k)?;
        let rows = r.h.len();
        let cols = r.h.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || r.h.iter().any(|row| row.len() != cols) {
            return Err(Error::Dimension("channel matrix must be non-empty and rectangular".into()));
        }
        if r.y.len() != rows {
            return Err(Error::Dimension(format!("y has {} entries, H has {rows} rows", r.y.len())));
        }
        let x_star = r.x_star.map(SymbolVector);
        if let Some(x) = &x_star {
            if x.len() != cols {
                return Err(Error::Dimension(format!("x_star has {} entries, H has {cols} columns", x.len())));
            }
            x.check_alphabet(constellation)?;
        }
        Ok(Self {
            constellation,
            h: DMatrix::from_fn(rows, cols, |i, j| r.h[i][j]),
            y: DVector::from_vec(r.y),
            sigma_n: r.sigma_n,
            x_star,
            snr_db: r.snr_db,
            regularized: r.regularized,
        })
    }
}

/// Stacks real and imaginary parts.
pub fn realify(cs: &ComplexSystem) -> Result<RealSystem> {
    let (m, n) = cs.h.shape();
    if cs.y.len() != m {
        return Err(Error::Dimension(format!("y_c has {} entries, H_c has {m} rows", cs.y.len())));
    }
    if let Some(x) = &cs.x {
        if x.len() != n {
            return Err(Error::Dimension(format!("x_c has {} entries, H_c has {n} columns", x.len())));
        }
    }
    let h = DMatrix::from_fn(2 * m, 2 * n, |i, j| {
        let z = cs.h[(i % m, j % n)];
        match (i < m, j < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    });
    let y = DVector::from_fn(2 * m, |i, _| if i < m { cs.y[i].re } else { cs.y[i - m].im });
    let x = cs
        .x
        .as_ref()
        .map(|x| x.iter().map(|z| z.re).chain(x.iter().map(|z| z.im)).collect());
    Ok(RealSystem {
        h,
        y,
        sigma_n: cs.sigma_c / std::f64::consts::SQRT_2,
        x,
    })
}

/// Maps a real system onto the shifted alphabet.
pub fn transform(rs: &RealSystem, c: Constellation, snr_db: f64) -> Result<ProblemInstance> {
    let offset = c.offset();
    let x_star = match &rs.x {
        Some(xr) => {
            if xr.len() != rs.h.ncols() {
                return Err(Error::Dimension(format!(
                    "x_r has {} entries, H_r has {} columns",
                    xr.len(),
                    rs.h.ncols()
                )));
            }
            let mut out = Vec::with_capacity(xr.len());
            for (index, &v) in xr.iter().enumerate() {
                if !c.contains_real(v) {
                    return Err(Error::OutOfAlphabet { index, value: v });
                }
                out.push(((v + offset as i64) / 2) as u32);
            }
            Some(SymbolVector(out))
        }
        None => None,
    };
    let row_sums: DVector<f64> = rs.h.column_sum();
    Ok(ProblemInstance {
        constellation: c,
        h: &rs.h * 2.0,
        y: &rs.y + row_sums * offset,
        sigma_n: rs.sigma_n,
        x_star,
        snr_db,
        regularized: false,
    })
}

/// Maps shifted symbols back to the odd real alphabet: `x_r = 2x − (2^k+1)e`.
pub fn inverse_transform(x: &[u32], c: Constellation) -> Result<Vec<i64>> {
    let offset = c.offset() as i64;
    x.iter()
        .enumerate()
        .map(|(index, &s)| {
            if c.contains(s) {
                Ok(2 * s as i64 - offset)
            } else {
                Err(Error::OutOfAlphabet { index, value: s as i64 })
            }
        })
        .collect()
}

/// Real noise std for a target SNR, with `H_c` entries of variance `1/N_r`:
/// `σ_n² = N_t σ_x² / (N_r 10^{snr/10})`.
pub fn sigma_from_snr(snr_db: f64, n_t: usize, n_r: usize, c: Constellation) -> f64 {
    let linear = 10f64.powf(snr_db / 10.0);
    (n_t as f64 * c.variance() / (n_r as f64 * linear)).sqrt()
}

/// Draws `(H_c, x_c, n_c)` and forms `y_c`.
pub fn sample_complex_system<R: Rng + ?Sized>(
    rng: &mut R,
    n_t: usize,
    n_r: usize,
    c: Constellation,
    snr_db: f64,
) -> ComplexSystem {
    let sigma_n = sigma_from_snr(snr_db, n_t, n_r, c);
    let channel = Normal::new(0.0, (0.5 / n_r as f64).sqrt()).expect("positive std");
    let h = DMatrix::from_fn(n_r, n_t, |_, _| Complex::new(channel.sample(rng), channel.sample(rng)));
    let alphabet = c.real_alphabet();
    let x: Vec<Complex<i64>> = (0..n_t)
        .map(|_| {
            let re = alphabet[rng.gen_range(0..alphabet.len())];
            let im = alphabet[rng.gen_range(0..alphabet.len())];
            Complex::new(re, im)
        })
        .collect();
    let xf = DVector::from_iterator(n_t, x.iter().map(|z| Complex::new(z.re as f64, z.im as f64)));
    let mut y = &h * xf;
    if sigma_n > 0.0 {
        let noise = Normal::new(0.0, sigma_n).expect("finite std");
        for v in y.iter_mut() {
            *v += Complex::new(noise.sample(rng), noise.sample(rng));
        }
    }
    ComplexSystem {
        h,
        y,
        sigma_c: sigma_n * std::f64::consts::SQRT_2,
        x: Some(x),
    }
}

/// Samples a shifted-domain instance with `2N_t` unknowns and `2N_r` observations.
pub fn sample_instance<R: Rng + ?Sized>(
    rng: &mut R,
    n_t: usize,
    n_r: usize,
    c: Constellation,
    snr_db: f64,
) -> Result<ProblemInstance> {
    if n_t == 0 || n_r == 0 {
        return Err(Error::InvalidArgument("antenna counts must be positive".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr_db must be finite, got {snr_db}")));
    }
    let cs = sample_complex_system(rng, n_t, n_r, c, snr_db);
    transform(&realify(&cs)?, c, snr_db)
}

/// Augments the system with `λ = σ_n/σ_x` ridge rows.
pub fn regularize(inst: &ProblemInstance) -> Result<ProblemInstance> {
    let lambda = inst.sigma_n / inst.constellation.variance().sqrt();
    regularize_with(inst, lambda)
}

/// Appends rows so that, in shifted coordinates,
/// `‖y_aug − H_aug x‖² = ‖y − Hx‖² + λ²‖x_r‖²` with `x_r = 2x − (2^k+1)e`.
/// The ridge therefore pulls `x` toward the constellation midpoint.
pub fn regularize_with(inst: &ProblemInstance, lambda: f64) -> Result<ProblemInstance> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "regularization weight must be positive and finite, got {lambda}"
        )));
    }
    if inst.regularized {
        return Err(Error::InvalidArgument("instance is already regularized".into()));
    }
    let (m, n) = inst.h.shape();
    let scale = 2.0 * lambda;
    let mid = inst.constellation.midpoint();
    let h = DMatrix::from_fn(m + n, n, |i, j| {
        if i < m {
            inst.h[(i, j)]
        } else if i - m == j {
            scale
        } else {
            0.0
        }
    });
    let y = DVector::from_fn(m + n, |i, _| if i < m { inst.y[i] } else { scale * mid });
    Ok(ProblemInstance {
        h,
        y,
        regularized: true,
        ..inst.clone()
    })
}

/// The system classical detectors should work on: regularized when the
/// channel is under-determined, unchanged otherwise.
pub fn detection_system(inst: &ProblemInstance) -> Result<ProblemInstance> {
    if inst.is_underdetermined() {
        regularize(inst)
    } else {
        Ok(inst.clone())
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn inverse_then_transform_is_identity(k in 1u32..=4, raw in proptest::collection::vec(any::<u32>(), 1..=8)) {
            let c = Constellation::new(k).unwrap();
            let x: Vec<u32> = raw.iter().map(|r| r % c.levels() as u32 + 1).collect();
            let xr = inverse_transform(&x, c).unwrap();
            let rs = RealSystem {
                h: DMatrix::identity(x.len(), x.len()),
                y: DVector::zeros(x.len()),
                sigma_n: 1.0,
                x: Some(xr),
            };
            prop_assert_eq!(transform(&rs, c, 0.0).unwrap().x_star.unwrap().0, x);
        }
    }
}
