//! Detection with a trained denoiser: cold start from uniform noise along a
//! shortened reverse chain, and warm start from the Babai point at a
//! calibrated step `t_B`.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::load_checkpoint;
use crate::diffusion::{skip_posterior, ProbabilityMatrix, TransitionSet};
use crate::error::{Error, Result};
use crate::instance::{sample_instance, Constellation, ProblemInstance, SymbolVector};
use crate::lattice::babai_detect;
use crate::net::{predict, NetworkParams};
use crate::rng::{label_tag, stream};

/// Step times `t_M = T > … > t_0 = 0`, linearly spaced and rounded.
///
/// A schedule with `M` reverse steps visits `M + 1` times and evaluates the
/// network at each of the first `M`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepSchedule {
    times: Vec<usize>,
}

impl StepSchedule {
    pub fn linear(steps: usize, total: usize) -> Result<Self> {
        if steps == 0 || steps > total {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= M <= T, got M={steps}, T={total}"
            )));
        }
        let times = (0..=steps)
            .map(|m| (total as f64 * (steps - m) as f64 / steps as f64).round() as usize)
            .collect();
        Ok(Self { times })
    }

    /// Explicit decreasing times from `T` to `0`.
    pub fn from_times(times: Vec<usize>, total: usize) -> Result<Self> {
        let ok = times.len() >= 2
            && times[0] == total
            && *times.last().unwrap() == 0
            && times.windows(2).all(|w| w[0] > w[1]);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "times must decrease strictly from {total} to 0, got {times:?}"
            )));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    /// Number of reverse steps (network evaluations).
    pub fn len(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How intermediate reverse transitions are decoded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SampleMode {
    #[default]
    Sample,
    Argmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub x_hat: SymbolVector,
    pub evaluations: usize,
}

/// A trained network paired with the transition set it was trained on.
#[derive(Clone, Debug)]
pub struct Denoiser {
    params: NetworkParams,
    ts: TransitionSet,
}

impl Denoiser {
    pub fn new(params: NetworkParams, ts: TransitionSet) -> Result<Self> {
        if params.config().constellation() != ts.constellation() {
            return Err(Error::ConfigMismatch(format!(
                "network k={} with schedule k={}",
                params.config().bits,
                ts.constellation().bits()
            )));
        }
        Ok(Self { params, ts })
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let state = load_checkpoint(path)?;
        let ts = state.config.transitions()?;
        Self::new(state.params, ts)
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn transitions(&self) -> &TransitionSet {
        &self.ts
    }

    pub fn constellation(&self) -> Constellation {
        self.ts.constellation()
    }

    fn check(&self, inst: &ProblemInstance) -> Result<()> {
        if inst.constellation != self.constellation() {
            return Err(Error::ConfigMismatch(format!(
                "instance k={} with network k={}",
                inst.constellation.bits(),
                self.constellation().bits()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, inst: &ProblemInstance, xt: &[u32], t: usize) -> Result<ProbabilityMatrix> {
        predict(&self.params, inst, xt, t)
    }

    pub fn cold_start<R: Rng + ?Sized>(
        &self,
        inst: &ProblemInstance,
        schedule: &StepSchedule,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<Detection> {
        self.check(inst)?;
        let total = self.ts.steps();
        if schedule.times()[0] != total {
            return Err(Error::InvalidArgument(format!(
                "schedule starts at {}, chain has T={total}",
                schedule.times()[0]
            )));
        }
        let n = inst.dim();
        let mut x = ProbabilityMatrix::uniform(n, self.constellation().levels()).sample(rng).0;
        let mut evaluations = 0;
        for w in schedule.times().windows(2) {
            let (hi, lo) = (w[0], w[1]);
            let p = self.predict(inst, &x, hi)?;
            evaluations += 1;
            if lo == 0 {
                return Ok(Detection {
                    x_hat: p.argmax(),
                    evaluations,
                });
            }
            let post = skip_posterior(&x, &p, lo, hi, &self.ts)?;
            x = match mode {
                SampleMode::Sample => post.sample(rng).0,
                SampleMode::Argmax => post.argmax().0,
            };
        }
        unreachable!("schedules end at t = 0")
    }

    /// One evaluation at `t_B` from the Babai point; the network sees the
    /// unregularized instance.
    pub fn warm_start(&self, inst: &ProblemInstance, table: &CalibrationTable) -> Result<Detection> {
        self.check(inst)?;
        table.check_compatible(inst, &self.ts)?;
        let t_b = table.lookup(inst.snr_db)?.t_b;
        self.warm_start_at(inst, t_b)
    }

    pub fn warm_start_at(&self, inst: &ProblemInstance, t_b: usize) -> Result<Detection> {
        self.check(inst)?;
        if t_b == 0 || t_b > self.ts.steps() {
            return Err(Error::InvalidArgument(format!("t_B = {t_b} outside 1..={}", self.ts.steps())));
        }
        let babai = babai_detect(inst)?;
        let p = self.predict(inst, &babai.x_hat, t_b)?;
        Ok(Detection {
            x_hat: p.argmax(),
            evaluations: 1,
        })
    }
}

/// Fraction of entries where `x_hat` and `x_star` differ.
pub fn compute_ser(x_hat: &[u32], x_star: &[u32]) -> Result<f64> {
    if x_hat.len() != x_star.len() || x_hat.is_empty() {
        return Err(Error::Dimension(format!(
            "comparing {} entries with {}",
            x_hat.len(),
            x_star.len()
        )));
    }
    Ok(symbol_errors(x_hat, x_star) as f64 / x_hat.len() as f64)
}

pub(crate) fn symbol_errors(x_hat: &[u32], x_star: &[u32]) -> usize {
    x_hat.iter().zip(x_star).filter(|(a, b)| a != b).count()
}

/// Smallest `t` minimizing `|expected_forward_ser(t) − ser|`.
pub fn step_for_ser(ts: &TransitionSet, ser: f64) -> usize {
    let mut best = 1;
    let mut gap = f64::INFINITY;
    for t in 1..=ts.steps() {
        let g = (ts.expected_forward_ser(t) - ser).abs();
        if g < gap {
            gap = g;
            best = t;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationEntry {
    pub snr_db: f64,
    pub babai_ser: f64,
    pub t_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    pub bits: u32,
    pub n_t: usize,
    pub n_r: usize,
    pub schedule_hash: u32,
    pub samples: usize,
    pub entries: Vec<CalibrationEntry>,
}

/// Maximum distance between a requested SNR and a calibrated grid point.
pub const CALIBRATION_TOLERANCE_DB: f64 = 1.0;

pub const MIN_CALIBRATION_SAMPLES: usize = 1_000;

impl CalibrationTable {
    /// Babai SER by Monte Carlo at each SNR (regularized when `n_r < n_t`),
    /// mapped to the closest forward-process step.
    pub fn calibrate(
        ts: &TransitionSet,
        n_t: usize,
        n_r: usize,
        snr_grid_db: &[f64],
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if samples < MIN_CALIBRATION_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {samples}"
            )));
        }
        let c = ts.constellation();
        let tag = label_tag("calibrate");
        let mut entries = Vec::with_capacity(snr_grid_db.len());
        for (si, &snr) in snr_grid_db.iter().enumerate() {
            let mut errors = 0usize;
            for i in 0..samples {
                let inst = sample_instance(&mut stream(seed, &[tag, si as u64, i as u64]), n_t, n_r, c, snr)?;
                let babai = babai_detect(&inst)?;
                errors += symbol_errors(&babai.x_hat, inst.truth()?);
            }
            let babai_ser = errors as f64 / (samples * 2 * n_t) as f64;
            entries.push(CalibrationEntry {
                snr_db: snr,
                babai_ser,
                t_b: step_for_ser(ts, babai_ser),
            });
        }
        let table = Self {
            bits: c.bits(),
            n_t,
            n_r,
            schedule_hash: ts.schedule_hash(),
            samples,
            entries,
        };
        table.check_monotone()?;
        Ok(table)
    }

    /// Higher Babai SER never maps to a smaller step.
    pub fn check_monotone(&self) -> Result<()> {
        for a in &self.entries {
            for b in &self.entries {
                if a.babai_ser < b.babai_ser && a.t_b > b.t_b {
                    return Err(Error::Degenerate(format!(
                        "calibration not monotone: SER {} -> t {}, SER {} -> t {}",
                        a.babai_ser, a.t_b, b.babai_ser, b.t_b
                    )));
                }
            }
        }
        Ok(())
    }

    /// Nearest grid point within [`CALIBRATION_TOLERANCE_DB`]; ties go to the first entry.
    pub fn lookup(&self, snr_db: f64) -> Result<&CalibrationEntry> {
        self.entries
            .iter()
            .filter(|e| (e.snr_db - snr_db).abs() <= CALIBRATION_TOLERANCE_DB)
            .fold(None, |best: Option<&CalibrationEntry>, e| match best {
                Some(b) if (b.snr_db - snr_db).abs() <= (e.snr_db - snr_db).abs() => Some(b),
                _ => Some(e),
            })
            .ok_or(Error::MissingCalibration { snr_db })
    }

    pub fn check_compatible(&self, inst: &ProblemInstance, ts: &TransitionSet) -> Result<()> {
        if self.bits != inst.constellation.bits() || self.schedule_hash != ts.schedule_hash() {
            return Err(Error::ConfigMismatch(format!(
                "calibration for k={} schedule {:08x}, detector k={} schedule {:08x}",
                self.bits,
                self.schedule_hash,
                inst.constellation.bits(),
                ts.schedule_hash()
            )));
        }
        if inst.h.ncols() != 2 * self.n_t || inst.h.nrows() != 2 * self.n_r {
            return Err(Error::ConfigMismatch(format!(
                "calibration for {}x{} antennas, instance is {}x{}",
                self.n_t,
                self.n_r,
                inst.h.ncols() / 2,
                inst.h.nrows() / 2
            )));
        }
        Ok(())
    }

    fn body(&self) -> String {
        let mut s = String::from("snr_db,babai_ser,t_b\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.snr_db, e.babai_ser, e.t_b));
        }
        s
    }

    fn metadata(&self) -> String {
        format!(
            "k={} n_t={} n_r={} schedule_hash={:08x} samples={}",
            self.bits, self.n_t, self.n_r, self.schedule_hash, self.samples
        )
    }

    /// `# gd4-calibration <metadata> hash=<crc32>` followed by `snr_db,babai_ser,t_b` rows.
    pub fn to_csv(&self) -> String {
        let meta = self.metadata();
        let body = self.body();
        let hash = crc32fast::hash(format!("{meta}\n{body}").as_bytes());
        format!("# gd4-calibration {meta} hash={hash:08x}\n{body}")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (first, rest) = text.split_once('\n').ok_or_else(|| Error::Parse("empty calibration file".into()))?;
        let meta = first
            .strip_prefix("# gd4-calibration ")
            .ok_or_else(|| Error::Parse("missing calibration header".into()))?;
        let mut kv = std::collections::BTreeMap::new();
        for part in meta.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad metadata field {part:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Parse(format!("missing metadata {k}")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Parse(format!("bad {k}"))) };
        let hex = |k: &str| -> Result<u32> {
            u32::from_str_radix(get(k)?, 16).map_err(|_| Error::Parse(format!("bad {k}")))
        };
        let mut rdr = csv::Reader::from_reader(rest.as_bytes());
        let mut entries = Vec::new();
        for row in rdr.deserialize() {
            let (snr_db, babai_ser, t_b): (f64, f64, usize) = row?;
            entries.push(CalibrationEntry { snr_db, babai_ser, t_b });
        }
        let table = Self {
            bits: num("k")? as u32,
            n_t: num("n_t")?,
            n_r: num("n_r")?,
            schedule_hash: hex("schedule_hash")?,
            samples: num("samples")?,
            entries,
        };
        let expected = hex("hash")?;
        let actual = crc32fast::hash(format!("{}\n{}", table.metadata(), table.body()).as_bytes());
        if expected != actual {
            return Err(Error::Parse(format!(
                "calibration hash {expected:08x} does not match contents {actual:08x}"
            )));
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(self.to_csv().as_bytes())?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
