//! Graph inputs: instance features, normalized noisy symbols and
//! sinusoidal embeddings.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::instance::{Constellation, ProblemInstance};

/// Temperature of the sinusoidal embeddings.
pub const EMBED_TEMPERATURE: f64 = 10_000.0;

/// Scale of the multiplicative training-time symbol perturbation.
pub const PERTURBATION_SCALE: f64 = 0.05;

/// Node features `[yᵀh_i, h_iᵀh_i, σ²]` and edge features `[−h_iᵀh_j, σ²]`
/// of the fully connected graph (self-loops included).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphFeatures {
    n: usize,
    node: Vec<[f64; 3]>,
    edge: Vec<[f64; 2]>,
}

impl GraphFeatures {
    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn node(&self, i: usize) -> &[f64; 3] {
        &self.node[i]
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f64; 2] {
        &self.edge[i * self.n + j]
    }

    /// Reorders nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        Self {
            n,
            node: perm.iter().map(|&p| self.node[p]).collect(),
            edge: (0..n * n).map(|ij| self.edge[perm[ij / n] * n + perm[ij % n]]).collect(),
        }
    }
}

pub fn init_graph_features(inst: &ProblemInstance) -> GraphFeatures {
    let h = &inst.h;
    let n = h.ncols();
    let gram = h.tr_mul(h);
    let hty = h.tr_mul(&inst.y);
    let noise = inst.sigma_n * inst.sigma_n;
    GraphFeatures {
        n,
        node: (0..n).map(|i| [hty[i], gram[(i, i)], noise]).collect(),
        edge: (0..n * n).map(|ij| [-gram[(ij / n, ij % n)], noise]).collect(),
    }
}

/// `s(i) = ((2x(i)−2)/(2^k−1) − 1)(1 + 0.05 ε_i)`, with `ε = 0` when `eps` is `None`.
pub fn normalize_symbols(xt: &[u32], c: Constellation, eps: Option<&[f64]>) -> Vec<f64> {
    let span = (c.levels() - 1) as f64;
    xt.iter()
        .enumerate()
        .map(|(i, &x)| {
            let base = (2.0 * x as f64 - 2.0) / span - 1.0;
            base * (1.0 + PERTURBATION_SCALE * eps.map_or(0.0, |e| e[i]))
        })
        .collect()
}

/// Standard-normal perturbations, one per node.
pub fn draw_perturbation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `out[2j−2] = sin(x / τ^{2j/D})`, `out[2j−1] = cos(x / τ^{2j/D})` for `j = 1..D/2`.
pub fn sinusoidal_embed(x: f64, tau: f64, out: &mut [f64]) -> Result<()> {
    let dim = out.len();
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding width must be even, got {dim}")));
    }
    for j in 1..=dim / 2 {
        let arg = x / tau.powf(2.0 * j as f64 / dim as f64);
        out[2 * j - 2] = arg.sin();
        out[2 * j - 1] = arg.cos();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::sample_instance;
    use crate::rng::stream;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn features_for_orthonormal_columns() {
        let inst = ProblemInstance {
            constellation: Constellation::new(2).unwrap(),
            h: DMatrix::identity(2, 2),
            y: DVector::from_column_slice(&[1.0, 2.0]),
            sigma_n: 0.5,
            x_star: None,
            snr_db: 0.0,
            regularized: false,
        };
        let f = init_graph_features(&inst);
        assert_eq!(f.node(0), &[1.0, 1.0, 0.25]);
        assert_eq!(f.node(1), &[2.0, 1.0, 0.25]);
        assert_eq!(f.edge(0, 1), &[0.0, 0.25]);
        assert_eq!(f.edge(1, 1), &[-1.0, 0.25]);
    }

    #[test]
    fn features_match_inner_products() {
        let inst = sample_instance(&mut stream(40, &[]), 3, 2, Constellation::new(2).unwrap(), 10.0).unwrap();
        let f = init_graph_features(&inst);
        let n = inst.dim();
        for i in 0..n {
            let hi = inst.h.column(i);
            assert!((f.node(i)[0] - hi.dot(&inst.y)).abs() <= 1e-12 * (1.0 + hi.dot(&inst.y).abs()));
            assert!((f.node(i)[1] - hi.dot(&hi)).abs() <= 1e-12 * hi.dot(&hi));
            for j in 0..n {
                let hj = inst.h.column(j);
                assert!((f.edge(i, j)[0] + hi.dot(&hj)).abs() <= 1e-12 * (1.0 + hi.dot(&hj).abs()));
                assert_eq!(f.edge(i, j)[0], f.edge(j, i)[0]);
            }
        }
    }

    #[test]
    fn normalized_levels() {
        let c = Constellation::new(2).unwrap();
        let s = normalize_symbols(&[1, 2, 3, 4], c, None);
        assert_eq!(s[0], -1.0);
        assert!((s[1] + 1.0 / 3.0).abs() < 1e-15);
        assert!((s[2] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s[3], 1.0);
        let s = normalize_symbols(&[4], c, Some(&[2.0]));
        assert!((s[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn sinusoidal_embedding_values() {
        let mut out = [0.0; 8];
        sinusoidal_embed(0.0, EMBED_TEMPERATURE, &mut out).unwrap();
        assert_eq!(out, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        sinusoidal_embed(std::f64::consts::PI, 1.0, &mut out).unwrap();
        for j in 0..4 {
            assert!(out[2 * j].abs() <= 1e-12);
            assert!((out[2 * j + 1] + 1.0).abs() <= 1e-12);
        }
        for x in [-50.0, 0.3, 17.0, 1e4] {
            sinusoidal_embed(x, EMBED_TEMPERATURE, &mut out).unwrap();
            assert!(out.iter().all(|v| v.abs() <= 1.0));
        }
        assert!(sinusoidal_embed(1.0, 10.0, &mut [0.0; 3]).is_err());
    }
}
