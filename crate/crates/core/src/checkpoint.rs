//! Checkpoint container.
//!
//! A UTF-8 header of `key value` lines, terminated by a line `end`, followed
//! by a little-endian payload:
//!
//! ```text
//! gd4-checkpoint
//! format_version 1
//! k 2
//! hidden 32
//! layers 6
//! steps 100
//! beta_start 0.03
//! beta_end 0.3
//! normalizer TwoSided
//! self_message_aggregation false
//! train_perturbation true
//! iteration 5000
//! config {...}
//! params 63458
//! block embed_node.weight 32 3
//! ...
//! end
//! <params: f64 × P> <adam m: f64 × P> <adam v: f64 × P> <adam step: u64> <crc32 of all preceding bytes: u32>
//! ```
//!
//! Blocks appear in [`ParamLayout`](crate::net::ParamLayout) order; each is a
//! row-major `rows × cols` array.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::instance::Constellation;
use crate::net::NetworkParams;
use crate::train::{OptimizerState, TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "gd4-checkpoint";

fn header(state: &TrainState) -> Result<String> {
    let cfg = &state.config;
    let mut h = String::new();
    let mut line = |k: &str, v: String| {
        h.push_str(k);
        h.push(' ');
        h.push_str(&v);
        h.push('\n');
    };
    line("format_version", FORMAT_VERSION.to_string());
    line("k", cfg.bits.to_string());
    line("hidden", cfg.hidden.to_string());
    line("layers", cfg.layers.to_string());
    line("steps", cfg.steps.to_string());
    line("beta_start", cfg.beta_start.to_string());
    line("beta_end", cfg.beta_end.to_string());
    line("normalizer", format!("{:?}", cfg.normalizer));
    line("self_message_aggregation", cfg.self_message_aggregation.to_string());
    line("train_perturbation", cfg.train_perturbation.to_string());
    line("iteration", state.iteration.to_string());
    line("config", serde_json::to_string(cfg)?);
    line("params", state.params.len().to_string());
    for b in state.params.layout().blocks() {
        line("block", format!("{} {} {}", b.name, b.rows, b.cols));
    }
    Ok(format!("{MAGIC}\n{h}end\n"))
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = header(state)?.into_bytes();
    for v in [state.params.values(), &state.optimizer.m[..], &state.optimizer.v[..]] {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&state.optimizer.step.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn decode(bytes: &[u8]) -> std::result::Result<TrainState, String> {
    if bytes.len() < 4 {
        return Err("file too short".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err("checksum mismatch (truncated or corrupt)".into());
    }
    let end = body
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or("header terminator not found")?;
    let text = std::str::from_utf8(&body[..end]).map_err(|_| "header is not UTF-8")?;
    let payload = &body[end + 5..];

    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err("not a checkpoint file".into());
    }
    let mut fields = std::collections::BTreeMap::new();
    let mut blocks = Vec::new();
    for l in lines {
        let (k, v) = l.split_once(' ').ok_or_else(|| format!("malformed header line {l:?}"))?;
        if k == "block" {
            blocks.push(v.to_string());
        } else {
            fields.insert(k, v);
        }
    }
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| format!("missing header field {k}"));
    let version: u32 = field("format_version")?.parse().map_err(|_| "bad format_version")?;
    if version != FORMAT_VERSION {
        return Err(format!("format version {version}, expected {FORMAT_VERSION}"));
    }
    let config: TrainConfig = serde_json::from_str(field("config")?).map_err(|e| format!("config: {e}"))?;
    let k: u32 = field("k")?.parse().map_err(|_| "bad k")?;
    if k != config.bits {
        return Err(format!("header k={k} disagrees with stored config k={}", config.bits));
    }
    let iteration: u64 = field("iteration")?.parse().map_err(|_| "bad iteration")?;
    let n: usize = field("params")?.parse().map_err(|_| "bad params")?;

    let net = config.net_config().map_err(|e| e.to_string())?;
    let layout = crate::net::ParamLayout::new(&net);
    let expected: Vec<String> = layout.blocks().iter().map(|b| format!("{} {} {}", b.name, b.rows, b.cols)).collect();
    if blocks != expected || n != layout.len() {
        return Err("block table does not match the configured architecture".into());
    }
    if payload.len() != 3 * 8 * n + 8 {
        return Err(format!("payload has {} bytes, expected {}", payload.len(), 3 * 8 * n + 8));
    }
    let read = |i: usize| f64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().unwrap());
    let values: Vec<f64> = (0..n).map(read).collect();
    let m: Vec<f64> = (n..2 * n).map(read).collect();
    let v: Vec<f64> = (2 * n..3 * n).map(read).collect();
    let step = u64::from_le_bytes(payload[24 * n..24 * n + 8].try_into().unwrap());
    let params = NetworkParams::from_values(net, values).map_err(|e| e.to_string())?;
    Ok(TrainState {
        config,
        params,
        optimizer: OptimizerState { m, v, step },
        iteration,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

/// Loads a checkpoint and checks it predicts over constellation `c`.
pub fn load_for(path: &Path, c: Constellation) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if state.config.bits != c.bits() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint {} was trained for k={}, requested k={}",
            path.display(),
            state.config.bits,
            c.bits()
        )));
    }
    Ok(state)
}
