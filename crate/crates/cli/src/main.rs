use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gd4::bench::{emit_plotdata, run_benchmark, BenchConfig, Gd4Context, Method};
use gd4::checkpoint::load_checkpoint;
use gd4::diffusion::{NoiseSchedule, TransitionSet};
use gd4::inference::{compute_ser, CalibrationTable, Denoiser};
use gd4::instance::{sample_instance, Constellation, ProblemInstance};
use gd4::rng::stream;
use gd4::train::{train, TrainConfig, TrainState};

#[derive(Parser)]
#[command(name = "gd4", version, about = "Diffusion-based MIMO detection and lattice baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser and write a checkpoint.
    Train(TrainArgs),
    /// Estimate Babai SER per SNR and map it to a warm-start step.
    Calibrate(CalibrateArgs),
    /// Detect a single instance read from a JSON file.
    Detect(DetectArgs),
    /// Run an SER benchmark sweep.
    Bench(BenchArgs),
    /// Write a random instance as JSON.
    Sample(SampleArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long, short)]
    out: PathBuf,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append-only CSV loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Start from the published 32x32 configuration instead of the desk one.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    snr_lo: Option<f64>,
    #[arg(long)]
    snr_hi: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    n_t: Option<usize>,
    #[arg(long)]
    n_r: Option<usize>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Aggregate W4·v_i instead of W4·v_j.
    #[arg(long)]
    self_message_aggregation: bool,
    /// Disable the multiplicative symbol perturbation.
    #[arg(long)]
    no_perturbation: bool,
    /// Print the mean loss every this many iterations.
    #[arg(long, default_value_t = 100)]
    report_every: u64,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Take the diffusion schedule from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    k: u32,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.03)]
    beta_start: f64,
    #[arg(long, default_value_t = 0.3)]
    beta_end: f64,
    #[arg(long, default_value_t = 4)]
    n_t: usize,
    #[arg(long, default_value_t = 4)]
    n_r: usize,
    /// Comma-separated SNR grid in dB.
    #[arg(long, value_delimiter = ',', required = true)]
    snr_db: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Instance JSON (as written by `gd4 sample`).
    #[arg(long)]
    instance: PathBuf,
    /// babai | kbest:K | cold:M | warm | brute
    #[arg(long, default_value = "babai")]
    method: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Flat key=value file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_t: Option<usize>,
    #[arg(long)]
    n_r: Option<usize>,
    #[arg(long)]
    k: Option<u32>,
    /// Comma-separated SNR list in dB.
    #[arg(long)]
    snr_db: Option<String>,
    #[arg(long)]
    n_instances: Option<usize>,
    /// Comma-separated methods.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// sample | argmax for intermediate cold-start transitions.
    #[arg(long)]
    sample_mode: Option<String>,
    /// Also write the wide SNR-by-method table here.
    #[arg(long)]
    plotdata: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, default_value_t = 4)]
    n_t: usize,
    #[arg(long, default_value_t = 4)]
    n_r: usize,
    #[arg(long, default_value_t = 2)]
    k: u32,
    #[arg(long, default_value_t = 20.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sample(a) => cmd_sample(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut state = match &a.resume {
        Some(path) => {
            let mut s = load_checkpoint(path)?;
            if let Some(n) = a.iterations {
                s.config.iterations = n;
            }
            s
        }
        None => {
            let mut cfg = if a.full_scale { TrainConfig::full_scale() } else { TrainConfig::desk() };
            macro_rules! set {
                ($($field:ident <- $arg:expr),* $(,)?) => { $(if let Some(v) = $arg { cfg.$field = v; })* };
            }
            set!(
                iterations <- a.iterations,
                batch_size <- a.batch_size,
                learning_rate <- a.lr,
                weight_decay <- a.weight_decay,
                steps <- a.steps,
                beta_start <- a.beta_start,
                beta_end <- a.beta_end,
                n_t <- a.n_t,
                n_r <- a.n_r,
                bits <- a.k,
                hidden <- a.hidden,
                layers <- a.layers,
                seed <- a.seed,
                checkpoint_interval <- a.checkpoint_interval,
            );
            if let Some(lo) = a.snr_lo {
                cfg.snr_range_db.0 = lo;
            }
            if let Some(hi) = a.snr_hi {
                cfg.snr_range_db.1 = hi;
            }
            cfg.self_message_aggregation |= a.self_message_aggregation;
            cfg.train_perturbation &= !a.no_perturbation;
            TrainState::new(cfg)?
        }
    };
    let every = a.report_every.max(1);
    let mut sums = (0.0, 0.0, 0u64);
    train(&mut state, a.log.as_deref(), Some(&a.out), |m| {
        sums.0 += m.loss_vb;
        sums.1 += m.loss_ce;
        sums.2 += 1;
        if (m.iteration + 1) % every == 0 {
            eprintln!(
                "iteration {:>7}  L_vb {:.5}  L_ce {:.5}",
                m.iteration + 1,
                sums.0 / sums.2 as f64,
                sums.1 / sums.2 as f64
            );
            sums = (0.0, 0.0, 0);
        }
    })?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let ts = match &a.checkpoint {
        Some(path) => load_checkpoint(path)?.config.transitions()?,
        None => TransitionSet::new(
            Constellation::new(a.k)?,
            NoiseSchedule::linear(a.beta_start, a.beta_end, a.steps)?,
        )?,
    };
    let table = CalibrationTable::calibrate(&ts, a.n_t, a.n_r, &a.snr_db, a.samples, a.seed)?;
    table.save(&a.out)?;
    for e in &table.entries {
        println!("{} dB: Babai SER {:.5} -> t_B {}", e.snr_db, e.babai_ser, e.t_b);
    }
    Ok(())
}

fn read_instance(path: &Path) -> Result<ProblemInstance> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let inst = read_instance(&a.instance)?;
    let method: Method = a.method.parse()?;
    let mut ctx = Gd4Context::default();
    if method.needs_denoiser() {
        let Some(path) = &a.checkpoint else { bail!("{method} needs --checkpoint") };
        ctx.denoiser = Some(Denoiser::from_checkpoint(path)?);
    }
    if method == Method::Warm {
        let Some(path) = &a.calibration else { bail!("warm needs --calibration") };
        ctx.calibration = Some(CalibrationTable::load(path)?);
    }
    let x = gd4::bench::detect(&method, &inst, &ctx, &mut stream(a.seed, &[]))?;
    let mut out = serde_json::json!({ "method": method.to_string(), "x_hat": x.0 });
    if let Some(truth) = &inst.x_star {
        out["ser"] = serde_json::json!(compute_ser(&x, truth)?);
    }
    println!("{out}");
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_file_text(&text)?;
    }
    let overrides = [
        ("n_t", a.n_t.map(|v| v.to_string())),
        ("n_r", a.n_r.map(|v| v.to_string())),
        ("k", a.k.map(|v| v.to_string())),
        ("snr_db", a.snr_db),
        ("n_instances", a.n_instances.map(|v| v.to_string())),
        ("methods", a.methods),
        ("seed", a.seed.map(|v| v.to_string())),
        ("checkpoint", a.checkpoint.map(|p| p.display().to_string())),
        ("calibration", a.calibration.map(|p| p.display().to_string())),
        ("output", a.output.map(|p| p.display().to_string())),
        ("sample_mode", a.sample_mode),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    let records = run_benchmark(&cfg)?;
    for r in &records {
        println!(
            "{:>10} {:>6} dB  SER {:.5} ± {:.5}  {:.3e} s/instance",
            r.method, r.snr_db, r.ser, r.ser_ci95_halfwidth, r.mean_runtime_s
        );
    }
    if let Some(path) = &a.plotdata {
        emit_plotdata(&records, path)?;
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let inst = sample_instance(
        &mut stream(a.seed, &[]),
        a.n_t,
        a.n_r,
        Constellation::new(a.k)?,
        a.snr_db,
    )?;
    let json = serde_json::to_string_pretty(&inst)?;
    match &a.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}
