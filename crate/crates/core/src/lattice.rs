//! Classical detectors: box-constrained Babai (ZF-SIC), the K-best randomized
//! Klein-Babai point, and an exhaustive ILS solver used as a test oracle.
//!
//! All detectors work in shifted coordinates, so the box is `{1, …, 2^k}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::instance::{detection_system, Constellation, ProblemInstance, SymbolVector};

/// Below this noise level Klein sampling degenerates to rounding.
pub const KLEIN_DETERMINISTIC_SIGMA: f64 = 1e-9;

/// Largest search space [`brute_force_ils`] accepts.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Thin QR factorization `H = QR` with a positive diagonal on `R`.
#[derive(Clone, Debug)]
pub struct QrFactorization {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `Qᵀy`.
    pub ybar: DVector<f64>,
    /// `‖y − QQᵀy‖²`, the part of the residual no choice of `x` can remove.
    pub residual_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorResult {
    pub x_hat: SymbolVector,
    /// `‖y − H x̂‖²` on the system the detector ran on.
    pub residual: f64,
    pub candidates_evaluated: usize,
}

pub fn qr_factor(h: &DMatrix<f64>, y: &DVector<f64>) -> Result<QrFactorization> {
    let (m, n) = h.shape();
    if m < n {
        return Err(Error::Dimension(format!(
            "QR needs at least as many rows as columns, got {m}x{n}; regularize first"
        )));
    }
    if y.len() != m {
        return Err(Error::Dimension(format!("y has {} entries, H has {m} rows", y.len())));
    }
    let qr = h.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let tol = 1e-12 * h.norm();
    for i in 0..n {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
            q.column_mut(i).neg_mut();
        }
        if r[(i, i)].abs() < tol || r[(i, i)] == 0.0 {
            return Err(Error::RankDeficient { index: i, value: r[(i, i)] });
        }
    }
    let ybar = q.tr_mul(y);
    let residual_floor = (y - &q * &ybar).norm_squared();
    Ok(QrFactorization { q, r, ybar, residual_floor })
}

impl QrFactorization {
    pub fn dim(&self) -> usize {
        self.r.ncols()
    }

    /// Back-substitution centre at level `i`, given `x[i+1..]`.
    fn centre(&self, i: usize, x: &[u32]) -> f64 {
        let n = self.dim();
        let mut acc = self.ybar[i];
        for j in i + 1..n {
            acc -= self.r[(i, j)] * x[j] as f64;
        }
        acc / self.r[(i, i)]
    }

    /// `‖y − Hx‖²` evaluated through the factorization.
    pub fn residual(&self, x: &[u32]) -> f64 {
        let n = self.dim();
        let mut total = self.residual_floor;
        for i in 0..n {
            let mut acc = self.ybar[i];
            for j in i..n {
                acc -= self.r[(i, j)] * x[j] as f64;
            }
            total += acc * acc;
        }
        total
    }
}

fn round_into_box(c: f64, levels: usize) -> u32 {
    c.round_ties_even().clamp(1.0, levels as f64) as u32
}

/// Box-constrained Babai point by back-substitution with round-half-even.
pub fn babai_box(qr: &QrFactorization, c: Constellation) -> DetectorResult {
    let n = qr.dim();
    let mut x = vec![0u32; n];
    for i in (0..n).rev() {
        x[i] = round_into_box(qr.centre(i, &x), c.levels());
    }
    DetectorResult {
        residual: qr.residual(&x),
        x_hat: SymbolVector(x),
        candidates_evaluated: 1,
    }
}

/// One randomized Klein-Babai candidate: level `i` is drawn from
/// `∝ exp(−R_ii² (v − c_i)² / (2σ²))` over the box.
pub fn klein_sample<R: Rng + ?Sized>(
    qr: &QrFactorization,
    c: Constellation,
    sigma: f64,
    rng: &mut R,
) -> SymbolVector {
    let n = qr.dim();
    let levels = c.levels();
    let mut x = vec![0u32; n];
    let mut weights = vec![0.0; levels];
    for i in (0..n).rev() {
        let centre = qr.centre(i, &x);
        if sigma <= KLEIN_DETERMINISTIC_SIGMA {
            x[i] = round_into_box(centre, levels);
            continue;
        }
        let scale = qr.r[(i, i)].powi(2) / (2.0 * sigma * sigma);
        let mut max_log = f64::NEG_INFINITY;
        for (v, w) in weights.iter_mut().enumerate() {
            *w = -scale * ((v + 1) as f64 - centre).powi(2);
            max_log = max_log.max(*w);
        }
        let mut total = 0.0;
        for w in weights.iter_mut() {
            *w = (*w - max_log).exp();
            total += *w;
        }
        x[i] = sample_index(&weights, total, rng) as u32 + 1;
    }
    SymbolVector(x)
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], total: f64, rng: &mut R) -> usize {
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // Rounding can leave u marginally above the last weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Babai on the detection system (regularized when under-determined).
pub fn babai_detect(inst: &ProblemInstance) -> Result<DetectorResult> {
    let sys = detection_system(inst)?;
    let qr = qr_factor(&sys.h, &sys.y)?;
    Ok(babai_box(&qr, sys.constellation))
}

/// Best of the Babai point and `k` Klein samples by residual on the
/// detection system. Ties keep the earliest candidate, Babai first.
pub fn kbest_klein_babai<R: Rng + ?Sized>(
    inst: &ProblemInstance,
    k: usize,
    rng: &mut R,
) -> Result<DetectorResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let sys = detection_system(inst)?;
    let qr = qr_factor(&sys.h, &sys.y)?;
    let mut best = babai_box(&qr, sys.constellation);
    for _ in 0..k {
        let cand = klein_sample(&qr, sys.constellation, sys.sigma_n, rng);
        let residual = qr.residual(&cand);
        if residual < best.residual {
            best.x_hat = cand;
            best.residual = residual;
        }
    }
    best.candidates_evaluated = k + 1;
    Ok(best)
}

/// Exact minimizer of `‖y − Hx‖²` over the box by exhaustive enumeration
/// in lexicographic order (first minimum wins).
pub fn brute_force_ils(inst: &ProblemInstance) -> Result<DetectorResult> {
    let c = inst.constellation;
    let n = inst.dim();
    let m = inst.h.nrows();
    let levels = c.levels();
    let size = (levels as f64).powi(n as i32);
    if size > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge { size });
    }
    let h = &inst.h;
    let mut x = vec![1u32; n];
    // Running residual y − Hx, updated column by column as digits change.
    let mut res: Vec<f64> = (0..m)
        .map(|r| inst.y[r] - (0..n).map(|j| h[(r, j)]).sum::<f64>())
        .collect();
    let mut best = x.clone();
    let mut best_val = res.iter().map(|v| v * v).sum::<f64>();
    let mut evaluated = 1usize;
    loop {
        // Odometer increment with the last index fastest (lexicographic order).
        let mut pos = n;
        loop {
            if pos == 0 {
                let residual = inst.residual(&best);
                return Ok(DetectorResult {
                    x_hat: SymbolVector(best),
                    residual,
                    candidates_evaluated: evaluated,
                });
            }
            pos -= 1;
            if (x[pos] as usize) < levels {
                x[pos] += 1;
                for (r, v) in res.iter_mut().enumerate() {
                    *v -= h[(r, pos)];
                }
                break;
            }
            let back = (levels - 1) as f64;
            x[pos] = 1;
            for (r, v) in res.iter_mut().enumerate() {
                *v += back * h[(r, pos)];
            }
        }
        evaluated += 1;
        let val = res.iter().map(|v| v * v).sum::<f64>();
        if val < best_val {
            best_val = val;
            best.copy_from_slice(&x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{regularize, sample_instance};
    use crate::rng::stream;
    use approx::assert_relative_eq;

    fn k2() -> Constellation {
        Constellation::new(2).unwrap()
    }

    fn diag_qr(diag: &[f64], ybar: &[f64]) -> QrFactorization {
        let n = diag.len();
        QrFactorization {
            q: DMatrix::identity(n, n),
            r: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
            ybar: DVector::from_column_slice(ybar),
            residual_floor: 0.0,
        }
    }

    #[test]
    fn qr_of_scaled_identity() {
        let y = DVector::from_element(3, 1.0);
        let f = qr_factor(&DMatrix::identity(3, 3), &y).unwrap();
        assert_relative_eq!(f.q, DMatrix::identity(3, 3), epsilon = 1e-15);
        assert_relative_eq!(f.r, DMatrix::identity(3, 3), epsilon = 1e-15);
        let f = qr_factor(&(DMatrix::identity(3, 3) * 2.0), &y).unwrap();
        assert_relative_eq!(f.r, DMatrix::identity(3, 3) * 2.0, epsilon = 1e-15);
        let f = qr_factor(&(DMatrix::identity(3, 3) * -2.0), &y).unwrap();
        assert_relative_eq!(f.r, DMatrix::identity(3, 3) * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn qr_reconstructs_random_matrix() {
        let mut rng = stream(11, &[]);
        let h = DMatrix::from_fn(8, 4, |_, _| rng.gen::<f64>() - 0.5);
        let y = DVector::from_fn(8, |_, _| rng.gen::<f64>());
        let f = qr_factor(&h, &y).unwrap();
        assert!((&f.q * &f.r - &h).norm() <= 1e-10 * h.norm());
        assert!((f.q.tr_mul(&f.q) - DMatrix::identity(4, 4)).norm() <= 1e-10);
        for i in 0..4 {
            assert!(f.r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(f.r[(i, j)], 0.0);
            }
        }
        let x = [1, 2, 3, 4];
        let direct = (&y - &h * DVector::from_column_slice(&[1.0, 2.0, 3.0, 4.0])).norm_squared();
        assert_relative_eq!(f.residual(&x), direct, max_relative = 1e-12);
    }

    #[test]
    fn qr_rejects_rank_deficiency() {
        let mut h = DMatrix::identity(4, 3);
        h.set_column(2, &h.column(0).clone_owned());
        assert!(matches!(
            qr_factor(&h, &DVector::zeros(4)),
            Err(Error::RankDeficient { .. })
        ));
        assert!(qr_factor(&DMatrix::identity(2, 3), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn babai_diagonal_round_and_clamp() {
        let out = babai_box(&diag_qr(&[1.0, 1.0], &[1.2, 3.9]), k2());
        assert_eq!(out.x_hat.0, vec![1, 4]);
        let out = babai_box(&diag_qr(&[1.0], &[7.3]), k2());
        assert_eq!(out.x_hat.0, vec![4]);
        // half-to-even
        let out = babai_box(&diag_qr(&[1.0, 1.0], &[2.5, 3.5]), k2());
        assert_eq!(out.x_hat.0, vec![2, 4]);
    }

    #[test]
    fn babai_never_beats_brute_force() {
        let mut rng = stream(12, &[]);
        for _ in 0..50 {
            let inst = sample_instance(&mut rng, 2, 2, k2(), 8.0).unwrap();
            let qr = qr_factor(&inst.h, &inst.y).unwrap();
            let babai = babai_box(&qr, k2());
            let exact = brute_force_ils(&inst).unwrap();
            assert!(babai.residual >= exact.residual * (1.0 - 1e-12));
            assert_relative_eq!(babai.residual, inst.residual(&babai.x_hat), max_relative = 1e-10);
        }
    }

    #[test]
    fn babai_is_exact_for_orthogonal_columns() {
        let mut rng = stream(13, &[]);
        for _ in 0..20 {
            let g = DMatrix::from_fn(4, 4, |_, _| rng.gen::<f64>() - 0.5);
            let q = g.qr().q();
            let d = DMatrix::from_diagonal(&DVector::from_fn(4, |_, _| 0.5 + rng.gen::<f64>()));
            let h = q * d;
            let y = DVector::from_fn(4, |_, _| 6.0 * rng.gen::<f64>());
            let inst = ProblemInstance {
                constellation: k2(),
                h: h.clone(),
                y: y.clone(),
                sigma_n: 0.1,
                x_star: None,
                snr_db: 0.0,
                regularized: false,
            };
            let qr = qr_factor(&h, &y).unwrap();
            let babai = babai_box(&qr, k2());
            let exact = brute_force_ils(&inst).unwrap();
            assert_relative_eq!(babai.residual, exact.residual, max_relative = 1e-9);
        }
    }

    #[test]
    fn klein_zero_temperature_is_babai() {
        let mut rng = stream(14, &[]);
        let inst = sample_instance(&mut rng, 4, 4, k2(), 20.0).unwrap();
        let qr = qr_factor(&inst.h, &inst.y).unwrap();
        let babai = babai_box(&qr, k2());
        for sigma in [0.0, 1e-12, 1e-9] {
            assert_eq!(klein_sample(&qr, k2(), sigma, &mut rng), babai.x_hat);
        }
    }

    #[test]
    fn klein_symmetric_centre_at_high_temperature() {
        let qr = diag_qr(&[1.0], &[2.5]);
        let mut rng = stream(15, &[]);
        let mut counts = [0usize; 4];
        let draws = 40_000;
        for _ in 0..draws {
            counts[klein_sample(&qr, k2(), 1e3, &mut rng)[0] as usize - 1] += 1;
        }
        let (a, b) = (counts[1] as f64, counts[2] as f64);
        // Each count is Binomial(draws, ~1/4).
        let sd = (draws as f64 * 0.25 * 0.75).sqrt();
        assert!((a - b).abs() < 4.0 * sd * 2f64.sqrt(), "{counts:?}");
    }

    #[test]
    fn klein_frequencies_match_weights() {
        let qr = diag_qr(&[1.3], &[2.2 * 1.3]);
        let sigma = 0.8;
        let centre: f64 = 2.2;
        let w: Vec<f64> = (1..=4)
            .map(|v| (-(1.3f64.powi(2)) * (v as f64 - centre).powi(2) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = w.iter().sum();
        let mut rng = stream(16, &[]);
        let draws = 10_000;
        let mut counts = [0f64; 4];
        for _ in 0..draws {
            counts[klein_sample(&qr, k2(), sigma, &mut rng)[0] as usize - 1] += 1.0;
        }
        let chi2: f64 = (0..4)
            .map(|i| {
                let e = draws as f64 * w[i] / total;
                (counts[i] - e).powi(2) / e
            })
            .sum();
        // 3 degrees of freedom, 99.9% quantile.
        assert!(chi2 < 16.27, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn kbest_properties() {
        let mut rng = stream(17, &[]);
        let mut hits = [0usize; 2];
        for trial in 0..300 {
            let inst = sample_instance(&mut rng, 2, 2, k2(), 12.0).unwrap();
            let exact = brute_force_ils(&inst).unwrap();
            let mut prev = f64::INFINITY;
            for k in [1usize, 2, 5, 10, 20] {
                let out = kbest_klein_babai(&inst, k, &mut stream(18, &[trial])).unwrap();
                assert!(out.residual <= prev);
                assert!(out.residual >= exact.residual * (1.0 - 1e-12));
                assert_eq!(out.candidates_evaluated, k + 1);
                prev = out.residual;
                if k == 1 && out.x_hat == exact.x_hat {
                    hits[0] += 1;
                }
                if k == 20 && out.x_hat == exact.x_hat {
                    hits[1] += 1;
                }
            }
        }
        assert!(hits[1] > hits[0], "{hits:?}");
        assert!(kbest_klein_babai(&sample_instance(&mut rng, 2, 2, k2(), 12.0).unwrap(), 0, &mut rng).is_err());
    }

    #[test]
    fn kbest_single_noiseless_equals_babai() {
        let mut rng = stream(19, &[]);
        let inst = sample_instance(&mut rng, 3, 3, k2(), 20.0).unwrap();
        let inst = ProblemInstance { sigma_n: 0.0, ..inst };
        let out = kbest_klein_babai(&inst, 1, &mut rng).unwrap();
        assert_eq!(out.x_hat, babai_detect(&inst).unwrap().x_hat);
    }

    #[test]
    fn brute_force_examples() {
        let inst = ProblemInstance {
            constellation: k2(),
            h: DMatrix::from_element(1, 1, 2.0),
            y: DVector::from_element(1, 5.0),
            sigma_n: 1.0,
            x_star: None,
            snr_db: 0.0,
            regularized: false,
        };
        let out = brute_force_ils(&inst).unwrap();
        assert_eq!(out.x_hat.0, vec![2]);
        assert_eq!(out.residual, 1.0);
        assert_eq!(out.candidates_evaluated, 4);

        let mut rng = stream(20, &[]);
        let inst = sample_instance(&mut rng, 2, 2, k2(), 300.0).unwrap();
        let out = brute_force_ils(&inst).unwrap();
        assert_eq!(&out.x_hat, inst.x_star.as_ref().unwrap());
        assert_eq!(out.candidates_evaluated, 256);

        let big = sample_instance(&mut rng, 16, 16, k2(), 10.0).unwrap();
        assert!(matches!(brute_force_ils(&big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn brute_force_minimum_over_all_candidates() {
        let mut rng = stream(21, &[]);
        let inst = sample_instance(&mut rng, 2, 2, k2(), 5.0).unwrap();
        let out = brute_force_ils(&inst).unwrap();
        for code in 0..256u32 {
            let x: Vec<u32> = (0..4).map(|i| (code >> (2 * (3 - i))) % 4 + 1).collect();
            assert!(out.residual <= inst.residual(&x) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn underdetermined_detection_uses_regularized_objective() {
        let mut rng = stream(22, &[]);
        let inst = sample_instance(&mut rng, 4, 3, k2(), 15.0).unwrap();
        assert!(qr_factor(&inst.h, &inst.y).is_err());
        let out = babai_detect(&inst).unwrap();
        let reg = regularize(&inst).unwrap();
        assert_relative_eq!(out.residual, reg.residual(&out.x_hat), max_relative = 1e-10);
        out.x_hat.check_alphabet(k2()).unwrap();
    }
}
