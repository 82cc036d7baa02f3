//! Training loop: instance generation, forward corruption, the variational and
//! cross-entropy losses, and Adam with decoupled weight decay.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_sample, model_posterior, reverse_posterior_backward, true_posterior, NoiseSchedule, Normalizer,
    ProbabilityMatrix, TransitionSet,
};
use crate::error::{Error, Result};
use crate::instance::{sample_instance, Constellation, ProblemInstance};
use crate::net::{backward, draw_perturbation, forward, init_graph_features, normalize_symbols, NetConfig, NetworkParams};
use crate::rng::{stream, DetRng};

/// Floor applied to probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-30;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub snr_range_db: (f64, f64),
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub normalizer: Normalizer,
    pub n_t: usize,
    pub n_r: usize,
    pub bits: u32,
    pub hidden: usize,
    pub layers: usize,
    pub self_message_aggregation: bool,
    /// Multiplicative symbol perturbation during training.
    pub train_perturbation: bool,
    pub seed: u64,
    /// Iterations between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
}

impl TrainConfig {
    /// 4×4 real-valued-per-dimension 16-QAM setting that trains on one core in minutes.
    pub fn desk() -> Self {
        Self {
            iterations: 5_000,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 5e-5,
            snr_range_db: (20.0, 30.0),
            steps: 100,
            beta_start: 0.03,
            beta_end: 0.3,
            normalizer: Normalizer::TwoSided,
            n_t: 4,
            n_r: 4,
            bits: 2,
            hidden: 32,
            layers: 6,
            self_message_aggregation: false,
            train_perturbation: true,
            seed: 0,
            checkpoint_interval: 1_000,
        }
    }

    /// The published 32×32 setting.
    pub fn full_scale() -> Self {
        Self {
            iterations: 380_000,
            learning_rate: 1e-4,
            snr_range_db: (30.0, 40.0),
            n_t: 32,
            n_r: 32,
            layers: 12,
            checkpoint_interval: 10_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let (lo, hi) = self.snr_range_db;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return bad(format!("SNR range [{lo}, {hi}]"));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {}", self.weight_decay));
        }
        if self.n_t == 0 || self.n_r == 0 {
            return bad("antenna counts must be positive".into());
        }
        self.net_config()?;
        NoiseSchedule::linear(self.beta_start, self.beta_end, self.steps)?;
        Ok(())
    }

    pub fn constellation(&self) -> Result<Constellation> {
        Constellation::new(self.bits)
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        let mut cfg = NetConfig::new(self.bits, self.hidden, self.layers)?;
        cfg.self_message_aggregation = self.self_message_aggregation;
        Ok(cfg)
    }

    pub fn transitions(&self) -> Result<TransitionSet> {
        TransitionSet::with_normalizer(
            self.constellation()?,
            NoiseSchedule::linear(self.beta_start, self.beta_end, self.steps)?,
            self.normalizer,
        )
    }
}

/// `Σ_i Σ_c p log(p / max(q, 1e-30))`, with `0 log 0 = 0`.
pub fn loss_vb(p: &ProbabilityMatrix, q: &ProbabilityMatrix) -> Result<f64> {
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(Error::Dimension(format!(
            "{}x{} against {}x{}",
            p.rows(),
            p.cols(),
            q.rows(),
            q.cols()
        )));
    }
    Ok(p.as_slice()
        .iter()
        .zip(q.as_slice())
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(LOG_FLOOR).ln()))
        .sum())
}

/// `−Σ_i log max(P[i, x0(i)], 1e-30)`.
pub fn loss_ce(x0: &[u32], p: &ProbabilityMatrix) -> f64 {
    x0.iter().enumerate().map(|(i, &s)| -p.get(i, s as usize - 1).max(LOG_FLOOR).ln()).sum()
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·wd·θ`.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64, wd: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powf(self.step as f64);
        let bc2 = 1.0 - ADAM_BETA2.powf(self.step as f64);
        for (((theta, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            *theta -= lr * update + lr * wd * *theta;
        }
    }
}

/// One `(instance, t, x_t)` draw from the training distribution.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub instance: ProblemInstance,
    pub t: usize,
    pub xt: Vec<u32>,
    /// Symbol perturbation; `None` trains on clean normalized symbols.
    pub eps: Option<Vec<f64>>,
}

pub fn draw_sample(cfg: &TrainConfig, ts: &TransitionSet, rng: &mut DetRng) -> Result<TrainingSample> {
    let (lo, hi) = cfg.snr_range_db;
    let snr = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    let instance = sample_instance(rng, cfg.n_t, cfg.n_r, ts.constellation(), snr)?;
    let t = rng.gen_range(1..=ts.steps());
    let xt = forward_sample(instance.truth()?, t, ts, rng).0;
    let eps = cfg.train_perturbation.then(|| draw_perturbation(xt.len(), rng));
    Ok(TrainingSample { instance, t, xt, eps })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleLoss {
    pub vb: f64,
    pub ce: f64,
}

impl SampleLoss {
    pub fn total(&self) -> f64 {
        self.vb + self.ce
    }
}

/// Losses of one sample; adds `scale · ∇(L_vb + L_ce)` into `grad` when given.
pub fn sample_loss(
    params: &NetworkParams,
    ts: &TransitionSet,
    sample: &TrainingSample,
    grad: Option<(&mut [f64], f64)>,
) -> Result<SampleLoss> {
    let inst = &sample.instance;
    let x0 = inst.truth()?;
    let c = ts.constellation();
    if params.config().constellation() != c || inst.constellation != c {
        return Err(Error::ConfigMismatch("network, schedule and instance disagree on k".into()));
    }
    let feats = init_graph_features(inst);
    let s = normalize_symbols(&sample.xt, c, sample.eps.as_deref());
    let trace = forward(params, &feats, &s, sample.t)?;
    let p = trace.probabilities();
    let target = true_posterior(&sample.xt, x0, sample.t, ts)?;
    let model = model_posterior(&sample.xt, p, sample.t, ts)?;
    let loss = SampleLoss {
        vb: loss_vb(&target, &model)?,
        ce: loss_ce(x0, p),
    };
    if !(loss.vb.is_finite() && loss.ce.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss at t={} (vb={}, ce={})",
            sample.t, loss.vb, loss.ce
        )));
    }
    if let Some((grad, scale)) = grad {
        let levels = c.levels();
        let d_model: Vec<f64> = target
            .as_slice()
            .iter()
            .zip(model.as_slice())
            .map(|(&a, &b)| if a > 0.0 && b >= LOG_FLOOR { -scale * a / b } else { 0.0 })
            .collect();
        let mut d_p = reverse_posterior_backward(&sample.xt, p, ts.q(sample.t), ts.qbar(sample.t - 1), &model, &d_model);
        for (i, &s) in x0.iter().enumerate() {
            let v = p.get(i, s as usize - 1);
            if v >= LOG_FLOOR {
                d_p[i * levels + s as usize - 1] -= scale / v;
            }
        }
        backward(params, &trace, &d_p, grad);
    }
    Ok(loss)
}

/// Mean losses over one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub iteration: u64,
    pub loss_vb: f64,
    pub loss_ce: f64,
}

/// Parameters, optimizer and position of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: NetworkParams,
    pub optimizer: OptimizerState,
    /// Completed iterations.
    pub iteration: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = NetworkParams::init(config.net_config()?, &mut stream(config.seed, &[u64::MAX]))?;
        let optimizer = OptimizerState::new(params.len());
        Ok(Self {
            config,
            params,
            optimizer,
            iteration: 0,
        })
    }

    /// Batch at iteration `it`: instance `b` is drawn from its own stream.
    pub fn batch(&self, ts: &TransitionSet, it: u64) -> Result<Vec<TrainingSample>> {
        (0..self.config.batch_size)
            .map(|b| draw_sample(&self.config, ts, &mut stream(self.config.seed, &[it, b as u64])))
            .collect()
    }

    /// One Adam step on the mean loss over `samples`.
    pub fn step_on(&mut self, ts: &TransitionSet, samples: &[TrainingSample]) -> Result<StepMetrics> {
        let scale = 1.0 / samples.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut total = SampleLoss::default();
        for (b, sample) in samples.iter().enumerate() {
            let loss = sample_loss(&self.params, ts, sample, Some((&mut grad, scale))).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::NonFinite(format!("{msg} at iteration {}, batch entry {b}", self.iteration))
                }
                other => other,
            })?;
            total.vb += loss.vb * scale;
            total.ce += loss.ce * scale;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at iteration {}", self.iteration)));
        }
        self.optimizer.apply(
            self.params.values_mut(),
            &grad,
            self.config.learning_rate,
            self.config.weight_decay,
        );
        let metrics = StepMetrics {
            iteration: self.iteration,
            loss_vb: total.vb,
            loss_ce: total.ce,
        };
        self.iteration += 1;
        Ok(metrics)
    }

    pub fn train_step(&mut self, ts: &TransitionSet) -> Result<StepMetrics> {
        let batch = self.batch(ts, self.iteration)?;
        self.step_on(ts, &batch)
    }
}

/// Runs until `state.iteration == state.config.iterations`, appending
/// `iteration,loss_vb,loss_ce,wall_time` rows to `log` and writing a
/// checkpoint every `checkpoint_interval` iterations and at the end.
pub fn train(
    state: &mut TrainState,
    log: Option<&Path>,
    checkpoint: Option<&Path>,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    let ts = state.config.transitions()?;
    let mut log = match log {
        Some(path) => {
            let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(file, "iteration,loss_vb,loss_ce,wall_time")?;
            }
            Some(file)
        }
        None => None,
    };
    let started = Instant::now();
    let mut trace = Vec::new();
    while state.iteration < state.config.iterations {
        let m = state.train_step(&ts)?;
        if let Some(file) = log.as_mut() {
            writeln!(
                file,
                "{},{},{},{:.3}",
                m.iteration,
                m.loss_vb,
                m.loss_ce,
                started.elapsed().as_secs_f64()
            )?;
        }
        progress(&m);
        trace.push(m);
        let interval = state.config.checkpoint_interval;
        if let Some(path) = checkpoint {
            if interval > 0 && state.iteration % interval == 0 && state.iteration < state.config.iterations {
                crate::checkpoint::save_checkpoint(state, path)?;
            }
        }
    }
    if let Some(path) = checkpoint {
        crate::checkpoint::save_checkpoint(state, path)?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny() -> TrainConfig {
        TrainConfig {
            iterations: 4,
            batch_size: 3,
            steps: 20,
            n_t: 2,
            n_r: 2,
            hidden: 8,
            layers: 2,
            seed: 11,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn desk_schedule_reaches_full_corruption() {
        let ts = TrainConfig::desk().transitions().unwrap();
        assert!(ts.expected_forward_ser(ts.steps()) >= 0.70);
        TrainConfig::desk().validate().unwrap();
        TrainConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn kl_examples() {
        let p = ProbabilityMatrix::new(2, 2, vec![1.0, 0.0, 0.3, 0.7]).unwrap();
        assert_eq!(loss_vb(&p, &p).unwrap(), 0.0);
        let q = ProbabilityMatrix::uniform(2, 2);
        let one_hot = ProbabilityMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert_relative_eq!(loss_vb(&one_hot, &ProbabilityMatrix::uniform(1, 2)).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let mut oracle = 0.0;
        for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
            if *a > 0.0 {
                oracle += a * (a / b).ln();
            }
        }
        assert_relative_eq!(loss_vb(&p, &q).unwrap(), oracle, epsilon = 1e-14);
        assert!(loss_vb(&p, &one_hot).is_err());
    }

    #[test]
    fn ce_examples() {
        let x0 = [1u32, 4, 2];
        assert_eq!(loss_ce(&x0, &ProbabilityMatrix::one_hot(&x0, 4)), 0.0);
        assert_relative_eq!(loss_ce(&x0, &ProbabilityMatrix::uniform(3, 4)), 3.0 * 4f64.ln(), epsilon = 1e-14);
        let mut rng = stream(2, &[]);
        let raw: Vec<f64> = (0..12).map(|_| rng.gen_range(0.01..1.0)).collect();
        let data: Vec<f64> = raw
            .chunks(4)
            .flat_map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(move |v| v / s)
            })
            .collect();
        let p = ProbabilityMatrix::new(3, 4, data).unwrap();
        // −trace(onehot(x0)ᵀ log P)
        let mut trace = 0.0;
        for i in 0..3 {
            for c in 0..4 {
                let indicator = if x0[i] as usize == c + 1 { 1.0 } else { 0.0 };
                trace -= indicator * p.get(i, c).ln();
            }
        }
        assert_relative_eq!(loss_ce(&x0, &p), trace, epsilon = 1e-14);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = tiny();
        cfg.learning_rate = 0.0;
        let mut state = TrainState::new(cfg).unwrap();
        let before = state.params.clone();
        let ts = state.config.transitions().unwrap();
        state.train_step(&ts).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn runs_are_reproducible() {
        let run = || {
            let mut state = TrainState::new(tiny()).unwrap();
            train(&mut state, None, None, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss_vb.to_bits(), y.loss_vb.to_bits());
            assert_eq!(x.loss_ce.to_bits(), y.loss_ce.to_bits());
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let state = TrainState::new(tiny()).unwrap();
        let ts = state.config.transitions().unwrap();
        let batch = state.batch(&ts, 0).unwrap();
        let mut joint = vec![0.0; state.params.len()];
        for s in &batch {
            sample_loss(&state.params, &ts, s, Some((&mut joint, 1.0 / 3.0))).unwrap();
        }
        let mut separate = vec![0.0; state.params.len()];
        for s in &batch {
            let mut g = vec![0.0; state.params.len()];
            sample_loss(&state.params, &ts, s, Some((&mut g, 1.0))).unwrap();
            for (a, b) in separate.iter_mut().zip(g) {
                *a += b / 3.0;
            }
        }
        for (a, b) in joint.iter().zip(&separate) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut state = TrainState::new(tiny()).unwrap();
        state.params = NetworkParams::init_glorot(*state.params.config(), &mut stream(6, &[])).unwrap();
        let ts = state.config.transitions().unwrap();
        let mut rng = stream(5, &[]);
        for t in [1, 2, 13, 20] {
            let mut sample = draw_sample(&state.config, &ts, &mut rng).unwrap();
            sample.t = t;
            sample.xt = forward_sample(sample.instance.truth().unwrap(), t, &ts, &mut rng).0;
            let mut grad = vec![0.0; state.params.len()];
            sample_loss(&state.params, &ts, &sample, Some((&mut grad, 1.0))).unwrap();
            let h = 1e-5;
            for idx in (0..state.params.len()).step_by(37) {
                let orig = state.params.values()[idx];
                state.params.values_mut()[idx] = orig + h;
                let up = sample_loss(&state.params, &ts, &sample, None).unwrap().total();
                state.params.values_mut()[idx] = orig - h;
                let down = sample_loss(&state.params, &ts, &sample, None).unwrap().total();
                state.params.values_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = (grad[idx] - fd).abs() / grad[idx].abs().max(fd.abs()).max(1e-4);
                assert!(err <= 1e-4, "t={t} [{idx}]: {} vs {fd}", grad[idx]);
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut opt = OptimizerState::new(2);
        let mut theta = [1.0, -2.0];
        opt.apply(&mut theta, &[0.5, -3.0], 0.1, 0.0);
        assert_relative_eq!(theta[0], 0.9, epsilon = 1e-6);
        assert_relative_eq!(theta[1], -1.9, epsilon = 1e-6);
        let mut opt = OptimizerState::new(1);
        let mut theta = [2.0];
        opt.apply(&mut theta, &[0.0], 0.1, 0.5);
        assert_relative_eq!(theta[0], 2.0 - 0.1 * 0.5 * 2.0, epsilon = 1e-15);
    }
}
