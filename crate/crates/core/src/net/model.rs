//! Forward and reverse-mode passes of the gated message-passing denoiser.

use crate::diffusion::ProbabilityMatrix;
use crate::error::{Error, Result};
use crate::instance::{ProblemInstance, SymbolVector};

use super::features::{init_graph_features, normalize_symbols, sinusoidal_embed, GraphFeatures, EMBED_TEMPERATURE};
use super::head::{discretized_logistic, discretized_logistic_backward, LOG_SCALE_MAX, LOG_SCALE_MIN};
use super::params::{Affine, NetworkParams};

/// `out = W[:, col..col+len] · x` (+ bias when given), `W` row-major with `stride` columns.
#[inline]
fn matvec(w: &[f64], stride: usize, col: usize, x: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let len = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * stride + col..r * stride + col + len];
        let mut acc = bias.map_or(0.0, |b| b[r]);
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

/// `out += W[:, col..col+len]ᵀ · g`.
#[inline]
fn matvec_t_acc(w: &[f64], stride: usize, col: usize, g: &[f64], out: &mut [f64]) {
    let len = out.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * stride + col..r * stride + col + len];
        for (o, a) in out.iter_mut().zip(row) {
            *o += gr * a;
        }
    }
}

/// `dW[:, col..col+len] += g ⊗ x`.
#[inline]
fn outer_acc(dw: &mut [f64], stride: usize, col: usize, g: &[f64], x: &[f64]) {
    let len = x.len();
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &mut dw[r * stride + col..r * stride + col + len];
        for (d, b) in row.iter_mut().zip(x) {
            *d += gr * b;
        }
    }
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

fn weights<'a>(p: &'a [f64], a: &Affine) -> (&'a [f64], &'a [f64]) {
    (&p[a.w..a.w + a.rows * a.cols], &p[a.b..a.b + a.rows])
}

fn check_finite(values: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

struct LayerTrace {
    v: Vec<f64>,
    e: Vec<f64>,
    gate: Vec<f64>,
    message: Vec<f64>,
    pre: Vec<f64>,
}

/// Intermediates of one forward pass, consumed by [`backward`].
pub struct ForwardTrace {
    n: usize,
    levels: usize,
    raw_node: Vec<[f64; 3]>,
    raw_edge: Vec<[f64; 2]>,
    input: Vec<f64>,
    t_emb: Vec<f64>,
    layers: Vec<LayerTrace>,
    v_out: Vec<f64>,
    mu: Vec<f64>,
    rho: Vec<f64>,
    sigma: Vec<f64>,
    probs: ProbabilityMatrix,
}

impl ForwardTrace {
    pub fn probabilities(&self) -> &ProbabilityMatrix {
        &self.probs
    }

    pub fn into_probabilities(self) -> ProbabilityMatrix {
        self.probs
    }

    /// Location `μ_i ∈ (−1, 1)` of each node's logistic.
    pub fn locations(&self) -> &[f64] {
        &self.mu
    }

    /// Scale `σ_i` of each node's logistic.
    pub fn scales(&self) -> &[f64] {
        &self.sigma
    }
}

/// Runs the network on precomputed features and normalized symbols `s`.
pub fn forward(params: &NetworkParams, feats: &GraphFeatures, s: &[f64], t: usize) -> Result<ForwardTrace> {
    let n = feats.nodes();
    if s.len() != n {
        return Err(Error::Dimension(format!("{} symbols for {n} nodes", s.len())));
    }
    let cfg = params.config();
    let d = cfg.hidden;
    let levels = cfg.constellation().levels();
    let lay = params.layout();
    let p = params.values();

    let mut input = vec![0.0; n * 2 * d];
    {
        let (w2, b2) = weights(p, &lay.embed_node);
        for i in 0..n {
            let row = &mut input[i * 2 * d..(i + 1) * 2 * d];
            matvec(w2, 3, 0, feats.node(i), Some(b2), &mut row[..d]);
            sinusoidal_embed(s[i], EMBED_TEMPERATURE, &mut row[d..])?;
        }
    }
    let mut t_emb = vec![0.0; d];
    sinusoidal_embed(t as f64, EMBED_TEMPERATURE, &mut t_emb)?;

    let mut v = vec![0.0; n * d];
    {
        let (w1, b1) = weights(p, &lay.embed_input);
        for i in 0..n {
            matvec(w1, 2 * d, 0, &input[i * 2 * d..(i + 1) * 2 * d], Some(b1), &mut v[i * d..(i + 1) * d]);
        }
    }
    let mut e = vec![0.0; n * n * d];
    {
        let (we, be) = weights(p, &lay.embed_edge);
        for i in 0..n {
            for j in 0..n {
                let ij = i * n + j;
                matvec(we, 2, 0, feats.edge(i, j), Some(be), &mut e[ij * d..(ij + 1) * d]);
            }
        }
    }
    check_finite(&v, || "input embedding".into())?;
    check_finite(&e, || "edge embedding".into())?;

    let literal = cfg.self_message_aggregation;
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut own = vec![0.0; n * d];
    let mut other = vec![0.0; n * d];
    let mut step = vec![0.0; d];
    for (l, off) in lay.layers.iter().enumerate() {
        let (wr, br) = weights(p, &off.relation);
        let (w3, b3) = weights(p, &off.self_loop);
        let (w4, b4) = weights(p, &off.message);
        let (wt, bt) = weights(p, &off.step);

        for i in 0..n {
            let vi = &v[i * d..(i + 1) * d];
            matvec(wr, 3 * d, d, vi, Some(br), &mut own[i * d..(i + 1) * d]);
            matvec(wr, 3 * d, 2 * d, vi, None, &mut other[i * d..(i + 1) * d]);
        }
        let mut r = vec![0.0; n * n * d];
        for i in 0..n {
            for j in 0..n {
                let ij = i * n + j;
                let rij = &mut r[ij * d..(ij + 1) * d];
                matvec(wr, 3 * d, 0, &e[ij * d..(ij + 1) * d], None, rij);
                for k in 0..d {
                    rij[k] += own[i * d + k] + other[j * d + k];
                }
            }
        }
        let gate: Vec<f64> = r.iter().map(|&z| sigmoid(z)).collect();
        let mut message = vec![0.0; n * d];
        for i in 0..n {
            matvec(w4, d, 0, &v[i * d..(i + 1) * d], Some(b4), &mut message[i * d..(i + 1) * d]);
        }
        let mut pre = vec![0.0; n * d];
        for i in 0..n {
            let hi = &mut pre[i * d..(i + 1) * d];
            matvec(w3, d, 0, &v[i * d..(i + 1) * d], Some(b3), hi);
            for j in 0..n {
                let g = &gate[(i * n + j) * d..(i * n + j + 1) * d];
                let src = if literal { i } else { j };
                let m = &message[src * d..(src + 1) * d];
                for k in 0..d {
                    hi[k] += g[k] * m[k];
                }
            }
        }
        matvec(wt, d, 0, &t_emb, Some(bt), &mut step);

        let mut v_next = v.clone();
        for i in 0..n {
            for k in 0..d {
                v_next[i * d + k] += pre[i * d + k].max(0.0) + step[k];
            }
        }
        let mut e_next = e.clone();
        for (a, b) in e_next.iter_mut().zip(&r) {
            *a += b;
        }
        check_finite(&v_next, || format!("layer {l} node activations"))?;
        check_finite(&e_next, || format!("layer {l} edge activations"))?;
        layers.push(LayerTrace {
            v: std::mem::replace(&mut v, v_next),
            e: std::mem::replace(&mut e, e_next),
            gate,
            message,
            pre,
        });
    }

    let (wo, bo) = weights(p, &lay.head);
    let mut mu = vec![0.0; n];
    let mut rho = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    let mut probs = vec![0.0; n * levels];
    let mut z = vec![0.0; d];
    let mut out = [0.0; 2];
    for i in 0..n {
        for k in 0..d {
            z[k] = v[i * d + k].max(0.0);
        }
        matvec(wo, d, 0, &z, Some(bo), &mut out);
        mu[i] = (out[0] + s[i]).tanh();
        rho[i] = out[1];
        sigma[i] = out[1].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX).exp();
        discretized_logistic(mu[i], sigma[i], &mut probs[i * levels..(i + 1) * levels]);
    }
    check_finite(&probs, || "output head".into())?;

    Ok(ForwardTrace {
        n,
        levels,
        raw_node: (0..n).map(|i| *feats.node(i)).collect(),
        raw_edge: (0..n * n).map(|ij| *feats.edge(ij / n, ij % n)).collect(),
        input,
        t_emb,
        layers,
        v_out: v,
        mu,
        rho,
        sigma,
        probs: ProbabilityMatrix::from_raw(n, levels, probs),
    })
}

/// Accumulates into `grad` the gradient of `Σ_ic d_probs[i·levels + c] · P[i, c]`
/// with respect to the flat parameter vector.
pub fn backward(params: &NetworkParams, trace: &ForwardTrace, d_probs: &[f64], grad: &mut [f64]) {
    let cfg = params.config();
    let d = cfg.hidden;
    let n = trace.n;
    let levels = trace.levels;
    assert_eq!(d_probs.len(), n * levels, "upstream gradient shape");
    assert_eq!(grad.len(), params.len(), "gradient buffer length");
    let lay = params.layout();
    let p = params.values();

    let mut dv = vec![0.0; n * d];
    {
        let head = &lay.head;
        let (wo, _) = weights(p, head);
        let mut z = vec![0.0; d];
        let mut dz = vec![0.0; d];
        for i in 0..n {
            let (d_mu, d_sigma) =
                discretized_logistic_backward(trace.mu[i], trace.sigma[i], &d_probs[i * levels..(i + 1) * levels]);
            let d_loc = d_mu * (1.0 - trace.mu[i] * trace.mu[i]);
            let rho = trace.rho[i];
            let d_rho = if rho > LOG_SCALE_MIN && rho < LOG_SCALE_MAX {
                d_sigma * trace.sigma[i]
            } else {
                0.0
            };
            let g = [d_loc, d_rho];
            for k in 0..d {
                z[k] = trace.v_out[i * d + k].max(0.0);
            }
            outer_acc(&mut grad[head.w..head.w + 2 * d], d, 0, &g, &z);
            grad[head.b] += g[0];
            grad[head.b + 1] += g[1];
            dz.iter_mut().for_each(|x| *x = 0.0);
            matvec_t_acc(wo, d, 0, &g, &mut dz);
            for k in 0..d {
                if trace.v_out[i * d + k] > 0.0 {
                    dv[i * d + k] = dz[k];
                }
            }
        }
    }

    let literal = cfg.self_message_aggregation;
    let mut de = vec![0.0; n * n * d];
    let mut d_pre = vec![0.0; n * d];
    let mut d_msg = vec![0.0; n * d];
    let mut d_own = vec![0.0; n * d];
    let mut d_other = vec![0.0; n * d];
    let mut dr = vec![0.0; n * n * d];
    let mut d_step = vec![0.0; d];
    for (off, lt) in lay.layers.iter().zip(&trace.layers).rev() {
        let (wr, _) = weights(p, &off.relation);
        let (w3, _) = weights(p, &off.self_loop);
        let (w4, _) = weights(p, &off.message);

        // v' = v + ReLU(pre) + W_t t_emb + b_t, e' = e + r; dv and de hold the
        // gradient at the outputs and are updated in place to the inputs.
        d_step.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            for k in 0..d {
                let g = dv[i * d + k];
                d_step[k] += g;
                d_pre[i * d + k] = if lt.pre[i * d + k] > 0.0 { g } else { 0.0 };
            }
        }
        outer_acc(&mut grad[off.step.w..off.step.w + d * d], d, 0, &d_step, &trace.t_emb);
        for k in 0..d {
            grad[off.step.b + k] += d_step[k];
        }

        dr.copy_from_slice(&de);
        d_msg.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let dh = &d_pre[i * d..(i + 1) * d];
            let vi = &lt.v[i * d..(i + 1) * d];
            outer_acc(&mut grad[off.self_loop.w..off.self_loop.w + d * d], d, 0, dh, vi);
            for k in 0..d {
                grad[off.self_loop.b + k] += dh[k];
            }
            matvec_t_acc(w3, d, 0, dh, &mut dv[i * d..(i + 1) * d]);
            for j in 0..n {
                let ij = i * n + j;
                let src = if literal { i } else { j };
                for k in 0..d {
                    let g = lt.gate[ij * d + k];
                    let m = lt.message[src * d + k];
                    d_msg[src * d + k] += dh[k] * g;
                    dr[ij * d + k] += dh[k] * m * g * (1.0 - g);
                }
            }
        }
        for i in 0..n {
            let dm = &d_msg[i * d..(i + 1) * d];
            outer_acc(&mut grad[off.message.w..off.message.w + d * d], d, 0, dm, &lt.v[i * d..(i + 1) * d]);
            for k in 0..d {
                grad[off.message.b + k] += dm[k];
            }
            matvec_t_acc(w4, d, 0, dm, &mut dv[i * d..(i + 1) * d]);
        }

        d_own.iter_mut().for_each(|x| *x = 0.0);
        d_other.iter_mut().for_each(|x| *x = 0.0);
        let rel_w = off.relation.w..off.relation.w + 3 * d * d;
        for i in 0..n {
            for j in 0..n {
                let ij = i * n + j;
                let g = &dr[ij * d..(ij + 1) * d];
                outer_acc(&mut grad[rel_w.clone()], 3 * d, 0, g, &lt.e[ij * d..(ij + 1) * d]);
                matvec_t_acc(wr, 3 * d, 0, g, &mut de[ij * d..(ij + 1) * d]);
                for k in 0..d {
                    d_own[i * d + k] += g[k];
                    d_other[j * d + k] += g[k];
                }
            }
        }
        for i in 0..n {
            let vi = &lt.v[i * d..(i + 1) * d];
            let da = &d_own[i * d..(i + 1) * d];
            let db = &d_other[i * d..(i + 1) * d];
            outer_acc(&mut grad[rel_w.clone()], 3 * d, d, da, vi);
            outer_acc(&mut grad[rel_w.clone()], 3 * d, 2 * d, db, vi);
            for k in 0..d {
                grad[off.relation.b + k] += da[k];
            }
            matvec_t_acc(wr, 3 * d, d, da, &mut dv[i * d..(i + 1) * d]);
            matvec_t_acc(wr, 3 * d, 2 * d, db, &mut dv[i * d..(i + 1) * d]);
        }
    }

    let edge = &lay.embed_edge;
    for ij in 0..n * n {
        let g = &de[ij * d..(ij + 1) * d];
        outer_acc(&mut grad[edge.w..edge.w + 2 * d], 2, 0, g, &trace.raw_edge[ij]);
        for k in 0..d {
            grad[edge.b + k] += g[k];
        }
    }
    let inp = &lay.embed_input;
    let node = &lay.embed_node;
    let (w1, _) = weights(p, inp);
    let mut da = vec![0.0; d];
    for i in 0..n {
        let g = &dv[i * d..(i + 1) * d];
        outer_acc(&mut grad[inp.w..inp.w + 2 * d * d], 2 * d, 0, g, &trace.input[i * 2 * d..(i + 1) * 2 * d]);
        for k in 0..d {
            grad[inp.b + k] += g[k];
        }
        da.iter_mut().for_each(|x| *x = 0.0);
        matvec_t_acc(w1, 2 * d, 0, g, &mut da);
        outer_acc(&mut grad[node.w..node.w + 3 * d], 3, 0, &da, &trace.raw_node[i]);
        for k in 0..d {
            grad[node.b + k] += da[k];
        }
    }
}

/// Inference-mode prediction `P_θ(x̂_0 | x_t, y)`.
pub fn predict(params: &NetworkParams, inst: &ProblemInstance, xt: &[u32], t: usize) -> Result<ProbabilityMatrix> {
    let c = params.config().constellation();
    if inst.constellation != c {
        return Err(Error::ConfigMismatch(format!(
            "network predicts over k={} but instance has k={}",
            c.bits(),
            inst.constellation.bits()
        )));
    }
    if xt.len() != inst.dim() {
        return Err(Error::Dimension(format!("x_t has {} entries, instance has {}", xt.len(), inst.dim())));
    }
    SymbolVector(xt.to_vec()).check_alphabet(c)?;
    let feats = init_graph_features(inst);
    let s = normalize_symbols(xt, c, None);
    Ok(forward(params, &feats, &s, t)?.into_probabilities())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{sample_instance, Constellation};
    use crate::net::params::NetConfig;
    use crate::rng::stream;
    use rand::Rng;

    fn setup(bits: u32, d: usize, layers: usize, seed: u64) -> (NetworkParams, ProblemInstance, Vec<u32>) {
        let c = Constellation::new(bits).unwrap();
        let mut rng = stream(seed, &[]);
        let params = NetworkParams::init_glorot(NetConfig::new(bits, d, layers).unwrap(), &mut rng).unwrap();
        let inst = sample_instance(&mut rng, 2, 2, c, 12.0).unwrap();
        let xt: Vec<u32> = (0..inst.dim()).map(|_| rng.gen_range(1..=c.levels() as u32)).collect();
        (params, inst, xt)
    }

    fn weighted_loss(params: &NetworkParams, inst: &ProblemInstance, xt: &[u32], t: usize, w: &[f64]) -> f64 {
        let p = predict(params, inst, xt, t).unwrap();
        p.as_slice().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn rows_are_distributions() {
        let (params, inst, xt) = setup(2, 8, 2, 3);
        let p = predict(&params, &inst, &xt, 17).unwrap();
        for i in 0..p.rows() {
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (params, inst, xt) = setup(2, 8, 3, 4);
        let a = predict(&params, &inst, &xt, 40).unwrap();
        let b = predict(&params, &inst, &xt, 40).unwrap();
        assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn permuting_nodes_permutes_rows() {
        for literal in [false, true] {
            let (mut params, inst, xt) = setup(2, 8, 2, 5);
            let mut cfg = *params.config();
            cfg.self_message_aggregation = literal;
            params = NetworkParams::from_values(cfg, params.values().to_vec()).unwrap();
            let feats = init_graph_features(&inst);
            let c = Constellation::new(2).unwrap();
            let perm = [2, 0, 3, 1];
            let s = normalize_symbols(&xt, c, None);
            let sp: Vec<f64> = perm.iter().map(|&p| s[p]).collect();
            let a = forward(&params, &feats, &s, 9).unwrap();
            let b = forward(&params, &feats.permuted(&perm), &sp, 9).unwrap();
            for (i, &pi) in perm.iter().enumerate() {
                for (x, y) in b.probabilities().row(i).iter().zip(a.probabilities().row(pi)) {
                    assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (params, inst, xt) = setup(2, 8, 2, 6);
        let feats = init_graph_features(&inst);
        let s = normalize_symbols(&xt, params.config().constellation(), None);
        let trace = forward(&params, &feats, &s, 3).unwrap();
        // Every row sums to one, so a row-constant upstream gradient is a constant loss.
        let mut grad = vec![0.0; params.len()];
        backward(&params, &trace, &vec![2.5; xt.len() * 4], &mut grad);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for literal in [false, true] {
            let (params, inst, xt) = setup(2, 6, 2, 7);
            let mut cfg = *params.config();
            cfg.self_message_aggregation = literal;
            let mut params = NetworkParams::from_values(cfg, params.values().to_vec()).unwrap();
            let mut rng = stream(8, &[]);
            let w: Vec<f64> = (0..xt.len() * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let feats = init_graph_features(&inst);
            let s = normalize_symbols(&xt, cfg.constellation(), None);
            let trace = forward(&params, &feats, &s, 30).unwrap();
            let mut grad = vec![0.0; params.len()];
            backward(&params, &trace, &w, &mut grad);
            let h = 1e-5;
            for b in params.layout().blocks().to_vec() {
                for idx in [b.offset, b.offset + b.len() / 2, b.offset + b.len() - 1] {
                    let orig = params.values()[idx];
                    params.values_mut()[idx] = orig + h;
                    let up = weighted_loss(&params, &inst, &xt, 30, &w);
                    params.values_mut()[idx] = orig - h;
                    let down = weighted_loss(&params, &inst, &xt, 30, &w);
                    params.values_mut()[idx] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let err = (grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs()).max(1e-6);
                    assert!(err <= 1e-4, "{} [{idx}]: analytic {} vs fd {fd}", b.name, grad[idx]);
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (params, inst, xt) = setup(2, 4, 1, 9);
        assert!(predict(&params, &inst, &xt[1..], 1).is_err());
        let mut bad = xt.clone();
        bad[0] = 5;
        assert!(predict(&params, &inst, &bad, 1).is_err());
    }
}
