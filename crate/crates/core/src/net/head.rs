//! Discretized logistic output head.
//!
//! The interval `[−1, 1]` holds `2^k` evenly spaced bin centres
//! `b_c = −1 + 2(c−1)/(2^k−1)`. Class `c` receives the logistic mass of
//! `[b_c − Δ/2, b_c + Δ/2]`; the two extreme classes also absorb the tails,
//! so every row sums to one.

/// Bounds on the log-scale output before exponentiation.
pub const LOG_SCALE_MIN: f64 = -7.0;
pub const LOG_SCALE_MAX: f64 = 2.0;

pub fn bin_centres(levels: usize) -> Vec<f64> {
    let span = (levels - 1) as f64;
    (0..levels).map(|c| -1.0 + 2.0 * c as f64 / span).collect()
}

pub fn bin_width(levels: usize) -> f64 {
    2.0 / (levels - 1) as f64
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Interior boundary `u_c = b_c + Δ/2` for `c = 1..levels−1` (one-based).
#[inline]
fn boundary(c: usize, levels: usize) -> f64 {
    -1.0 + (2 * c - 1) as f64 / (levels - 1) as f64
}

/// Writes the class probabilities for a logistic with location `mu` and scale `sigma`.
pub fn discretized_logistic(mu: f64, sigma: f64, out: &mut [f64]) {
    let levels = out.len();
    // F(u_c) for c = 0..=levels with F(u_0) = 0 and F(u_levels) = 1; the
    // survival function is used where both edges lie above the location.
    for (c, p) in out.iter_mut().enumerate() {
        let lo = if c == 0 { None } else { Some(boundary(c, levels)) };
        let hi = if c + 1 == levels { None } else { Some(boundary(c + 1, levels)) };
        *p = match (lo, hi) {
            (None, None) => 1.0,
            (None, Some(h)) => sigmoid((h - mu) / sigma),
            (Some(l), None) => sigmoid(-(l - mu) / sigma),
            (Some(l), Some(h)) => {
                if l >= mu {
                    sigmoid(-(l - mu) / sigma) - sigmoid(-(h - mu) / sigma)
                } else {
                    sigmoid((h - mu) / sigma) - sigmoid((l - mu) / sigma)
                }
            }
        }
        .max(0.0);
    }
}

/// Gradient of `Σ_c dp[c]·p_c` with respect to `(mu, sigma)`.
pub fn discretized_logistic_backward(mu: f64, sigma: f64, dp: &[f64]) -> (f64, f64) {
    let levels = dp.len();
    let mut d_mu = 0.0;
    let mut d_sigma = 0.0;
    // dF(u)/dmu = −F(1−F)/σ and dF(u)/dσ = −F(1−F)(u−μ)/σ² at each interior boundary;
    // the boundary u_c enters p_c with + and p_{c+1} with −.
    for c in 1..levels {
        let u = boundary(c, levels);
        let z = (u - mu) / sigma;
        let dens = sigmoid(z) * sigmoid(-z);
        let weight = dp[c - 1] - dp[c];
        d_mu += weight * (-dens / sigma);
        d_sigma += weight * (-dens * z / sigma);
    }
    (d_mu, d_sigma)
}
