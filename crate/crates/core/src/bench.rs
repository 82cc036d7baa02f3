//! SER benchmark harness.
//!
//! Every method sees the same instance stream: instance `i` at SNR index `s`
//! is drawn from `stream(seed, [instance, s, i])`, and detector randomness
//! from a separate per-method stream. The results CSV
//! (`method,snr_db,n_instances,ser,ser_ci95_halfwidth`) depends only on the
//! configuration; wall-clock runtimes go to a `.timing.csv` sidecar.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::inference::{symbol_errors, CalibrationTable, Denoiser, SampleMode, StepSchedule};
use crate::instance::{sample_instance, Constellation, ProblemInstance, SymbolVector};
use crate::lattice::{babai_detect, brute_force_ils, kbest_klein_babai, BRUTE_FORCE_LIMIT};
use crate::rng::{label_tag, stream, DetRng};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Babai,
    KBest(usize),
    Cold(usize),
    Warm,
    Brute,
}

impl Method {
    pub fn needs_denoiser(&self) -> bool {
        matches!(self, Method::Cold(_) | Method::Warm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Babai => write!(f, "babai"),
            Method::KBest(k) => write!(f, "kbest:{k}"),
            Method::Cold(m) => write!(f, "cold:{m}"),
            Method::Warm => write!(f, "warm"),
            Method::Brute => write!(f, "brute"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unknown method {s:?} (babai | kbest:K | cold:M | warm | brute)"));
        let count = |v: &str| match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(bad()),
        };
        match s.trim().split_once(':') {
            None => match s.trim() {
                "babai" => Ok(Method::Babai),
                "warm" => Ok(Method::Warm),
                "brute" => Ok(Method::Brute),
                _ => Err(bad()),
            },
            Some(("kbest", k)) => Ok(Method::KBest(count(k)?)),
            Some(("cold", m)) => Ok(Method::Cold(count(m)?)),
            Some(_) => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_t: usize,
    pub n_r: usize,
    pub bits: u32,
    pub snr_list_db: Vec<f64>,
    pub n_instances: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub output: PathBuf,
    pub sample_mode: SampleMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_t: 4,
            n_r: 4,
            bits: 2,
            snr_list_db: vec![10.0, 15.0, 20.0, 25.0, 30.0],
            n_instances: 10_000,
            methods: vec![Method::Babai, Method::KBest(10)],
            seed: 0,
            checkpoint: None,
            calibration: None,
            output: PathBuf::from("bench.csv"),
            sample_mode: SampleMode::Sample,
        }
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| Error::Parse(format!("{key}: cannot parse {s:?}"))))
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot parse {value:?}")))
}

impl BenchConfig {
    /// Sets one `key=value` field. Lists are comma separated.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        match key.as_str() {
            "n_t" => self.n_t = parse_one(&key, value)?,
            "n_r" => self.n_r = parse_one(&key, value)?,
            "k" => self.bits = parse_one(&key, value)?,
            "snr_db" | "snr_list_db" => self.snr_list_db = parse_list(&key, value)?,
            "n_instances" => self.n_instances = parse_one(&key, value)?,
            "methods" => {
                self.methods = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?
            }
            "seed" => self.seed = parse_one(&key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value.trim())),
            "calibration" => self.calibration = Some(PathBuf::from(value.trim())),
            "output" => self.output = PathBuf::from(value.trim()),
            "sample_mode" => {
                self.sample_mode = match value.trim() {
                    "sample" => SampleMode::Sample,
                    "argmax" => SampleMode::Argmax,
                    other => return Err(Error::Parse(format!("sample_mode: {other:?}"))),
                }
            }
            _ => return Err(Error::Parse(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` file; blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = Constellation::new(self.bits)?;
        if self.n_t == 0 || self.n_r == 0 {
            return Err(Error::InvalidArgument("antenna counts must be positive".into()));
        }
        if self.n_instances == 0 {
            return Err(Error::InvalidArgument("n_instances must be at least 1".into()));
        }
        if self.snr_list_db.is_empty() || self.methods.is_empty() {
            return Err(Error::InvalidArgument("need at least one SNR and one method".into()));
        }
        if self.methods.contains(&Method::Brute) {
            let size = (c.levels() as f64).powi(2 * self.n_t as i32);
            if size > BRUTE_FORCE_LIMIT {
                return Err(Error::TooLarge { size });
            }
        }
        Ok(())
    }

    pub fn constellation(&self) -> Result<Constellation> {
        Constellation::new(self.bits)
    }

    /// Instance `index` at SNR position `snr_index`; identical for every method.
    pub fn instance(&self, snr_index: usize, index: usize) -> Result<ProblemInstance> {
        let snr = self.snr_list_db[snr_index];
        let mut rng = stream(self.seed, &[label_tag("instance"), snr_index as u64, index as u64]);
        sample_instance(&mut rng, self.n_t, self.n_r, self.constellation()?, snr)
    }

    pub fn detector_rng(&self, method: &Method, snr_index: usize, index: usize) -> DetRng {
        stream(
            self.seed,
            &[label_tag("detector"), label_tag(&method.to_string()), snr_index as u64, index as u64],
        )
    }
}

/// Loaded model state for the diffusion methods.
#[derive(Clone, Debug, Default)]
pub struct Gd4Context {
    pub denoiser: Option<Denoiser>,
    pub calibration: Option<CalibrationTable>,
    pub sample_mode: SampleMode,
}

impl Gd4Context {
    pub fn load(cfg: &BenchConfig) -> Result<Self> {
        let mut ctx = Self {
            sample_mode: cfg.sample_mode,
            ..Self::default()
        };
        if cfg.methods.iter().any(Method::needs_denoiser) {
            let path = cfg
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("diffusion methods need a checkpoint".into()))?;
            ctx.denoiser = Some(Denoiser::from_checkpoint(path)?);
        }
        if cfg.methods.contains(&Method::Warm) {
            let path = cfg
                .calibration
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("warm start needs a calibration table".into()))?;
            ctx.calibration = Some(CalibrationTable::load(path)?);
        }
        Ok(ctx)
    }
}

/// Runs one detector on one instance. Lattice detectors regularize
/// under-determined systems themselves; the denoiser never sees ridge rows.
pub fn detect(method: &Method, inst: &ProblemInstance, ctx: &Gd4Context, rng: &mut DetRng) -> Result<SymbolVector> {
    let denoiser = || {
        ctx.denoiser
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{method} needs a checkpoint")))
    };
    Ok(match method {
        Method::Babai => babai_detect(inst)?.x_hat,
        Method::KBest(k) => kbest_klein_babai(inst, *k, rng)?.x_hat,
        Method::Brute => brute_force_ils(inst)?.x_hat,
        Method::Cold(m) => {
            let den = denoiser()?;
            let schedule = StepSchedule::linear(*m, den.transitions().steps())?;
            den.cold_start(inst, &schedule, ctx.sample_mode, rng)?.x_hat
        }
        Method::Warm => {
            let table = ctx
                .calibration
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("warm start needs a calibration table".into()))?;
            denoiser()?.warm_start(inst, table)?.x_hat
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkRecord {
    pub method: String,
    pub snr_db: f64,
    pub n_instances: usize,
    pub ser: f64,
    pub ser_ci95_halfwidth: f64,
    pub mean_runtime_s: f64,
}

/// `1.96·sqrt(ser(1−ser)/(n·2N_t))`.
pub fn ci95_halfwidth(ser: f64, symbols: usize) -> f64 {
    1.96 * (ser * (1.0 - ser) / symbols as f64).sqrt()
}

/// Symbol errors per instance for one method at one SNR.
pub fn error_counts(cfg: &BenchConfig, ctx: &Gd4Context, method: &Method, snr_index: usize) -> Result<Vec<usize>> {
    (0..cfg.n_instances)
        .map(|i| {
            let inst = cfg.instance(snr_index, i)?;
            let x = detect(method, &inst, ctx, &mut cfg.detector_rng(method, snr_index, i))?;
            Ok(symbol_errors(&x, inst.truth()?))
        })
        .collect()
}

pub fn run_with(cfg: &BenchConfig, ctx: &Gd4Context) -> Result<Vec<BenchmarkRecord>> {
    cfg.validate()?;
    let mut records = Vec::new();
    let symbols = cfg.n_instances * 2 * cfg.n_t;
    for method in &cfg.methods {
        for (si, &snr) in cfg.snr_list_db.iter().enumerate() {
            let mut errors = 0usize;
            let mut elapsed = 0.0;
            for i in 0..cfg.n_instances {
                let inst = cfg.instance(si, i)?;
                let mut rng = cfg.detector_rng(method, si, i);
                let start = Instant::now();
                let x = detect(method, &inst, ctx, &mut rng)?;
                elapsed += start.elapsed().as_secs_f64();
                errors += symbol_errors(&x, inst.truth()?);
            }
            let ser = errors as f64 / symbols as f64;
            records.push(BenchmarkRecord {
                method: method.to_string(),
                snr_db: snr,
                n_instances: cfg.n_instances,
                ser,
                ser_ci95_halfwidth: ci95_halfwidth(ser, symbols),
                mean_runtime_s: elapsed / cfg.n_instances as f64,
            });
        }
    }
    Ok(records)
}

/// Loads model state as configured, runs every method and writes the
/// results CSV and its timing sidecar.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<Vec<BenchmarkRecord>> {
    cfg.validate()?;
    let ctx = Gd4Context::load(cfg)?;
    let records = run_with(cfg, &ctx)?;
    write_records(&records, &cfg.output)?;
    write_timing(&records, &timing_path(&cfg.output))?;
    Ok(records)
}

pub fn timing_path(output: &Path) -> PathBuf {
    let mut name = output.file_stem().unwrap_or_default().to_os_string();
    name.push(".timing.csv");
    output.with_file_name(name)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn records_csv(records: &[BenchmarkRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &["method", "snr_db", "n_instances", "ser", "ser_ci95_halfwidth"],
        records.iter().map(|r| {
            vec![
                r.method.clone(),
                r.snr_db.to_string(),
                r.n_instances.to_string(),
                r.ser.to_string(),
                r.ser_ci95_halfwidth.to_string(),
            ]
        }),
    )
}

pub fn write_records(records: &[BenchmarkRecord], path: &Path) -> Result<()> {
    write_atomic(path, &records_csv(records)?)
}

pub fn write_timing(records: &[BenchmarkRecord], path: &Path) -> Result<()> {
    let bytes = csv_bytes(
        &["method", "snr_db", "mean_runtime_s"],
        records
            .iter()
            .map(|r| vec![r.method.clone(), r.snr_db.to_string(), format!("{:e}", r.mean_runtime_s)]),
    )?;
    write_atomic(path, &bytes)
}

/// Wide table: `snr_db` then one SER column per method in first-appearance
/// order; SNR rows ascend. Missing combinations are left empty.
pub fn plotdata_csv(records: &[BenchmarkRecord]) -> Result<Vec<u8>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to plot".into()));
    }
    let mut methods: Vec<&str> = Vec::new();
    let mut snrs: Vec<f64> = Vec::new();
    for r in records {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !snrs.iter().any(|s| s.to_bits() == r.snr_db.to_bits()) {
            snrs.push(r.snr_db);
        }
    }
    snrs.sort_by(f64::total_cmp);
    let mut header = vec!["snr_db"];
    header.extend(&methods);
    let rows = snrs.iter().map(|&snr| {
        let mut row = vec![snr.to_string()];
        for m in &methods {
            let cell = records
                .iter()
                .find(|r| r.method == *m && r.snr_db.to_bits() == snr.to_bits())
                .map(|r| r.ser.to_string())
                .unwrap_or_default();
            row.push(cell);
        }
        row
    });
    csv_bytes(&header, rows)
}

pub fn emit_plotdata(records: &[BenchmarkRecord], path: &Path) -> Result<()> {
    write_atomic(path, &plotdata_csv(records)?)
}

/// `(method, snr_db, ser)` triples in column-major order.
pub fn parse_plotdata(bytes: &[u8]) -> Result<Vec<(String, f64, f64)>> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("snr_db") {
        return Err(Error::Parse("plot data must start with an snr_db column".into()));
    }
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let mut out = Vec::new();
    for (col, method) in header.iter().enumerate().skip(1) {
        for row in &rows {
            let snr: f64 = parse_one("snr_db", &row[0])?;
            if !row[col].is_empty() {
                out.push((method.clone(), snr, parse_one(method, &row[col])?));
            }
        }
    }
    Ok(out)
}
