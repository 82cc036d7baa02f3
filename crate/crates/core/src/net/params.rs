//! Flat parameter storage with a named block layout.
//!
//! Block order (this is also the checkpoint order):
//!
//! | block                         | shape        |
//! |-------------------------------|--------------|
//! | `embed_node.weight` / `.bias` | `D×3`, `D×1` |
//! | `embed_input.weight` / `.bias`| `D×2D`, `D×1`|
//! | `embed_edge.weight` / `.bias` | `D×2`, `D×1` |
//! | per layer `l`: `layers.l.relation` | `D×3D`, `D×1` |
//! | `layers.l.self`               | `D×D`, `D×1` |
//! | `layers.l.message`            | `D×D`, `D×1` |
//! | `layers.l.step`               | `D×D`, `D×1` |
//! | `head.weight` / `.bias`       | `2×D`, `2×1` |
//!
//! Weights are row-major `out × in`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::Constellation;

/// Factor applied to the Glorot draw of the residual branch maps in [`NetworkParams::init`].
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Bits per real dimension of the constellation the head predicts over.
    pub bits: u32,
    /// Hidden width `D_h`.
    pub hidden: usize,
    /// Number of message-passing layers.
    pub layers: usize,
    /// Aggregate `σ(r_ij) ⊙ W_4 v_i` instead of `σ(r_ij) ⊙ W_4 v_j`.
    pub self_message_aggregation: bool,
}

impl NetConfig {
    pub fn new(bits: u32, hidden: usize, layers: usize) -> Result<Self> {
        let cfg = Self {
            bits,
            hidden,
            layers,
            self_message_aggregation: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        Constellation::new(self.bits)?;
        if self.hidden == 0 || self.hidden % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden width must be positive and even, got {}",
                self.hidden
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("need at least one layer".into()));
        }
        Ok(())
    }

    pub fn constellation(&self) -> Constellation {
        Constellation::new(self.bits).expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of a weight matrix and its bias inside the flat vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Affine {
    pub w: usize,
    pub b: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerOffsets {
    pub relation: Affine,
    pub self_loop: Affine,
    pub message: Affine,
    pub step: Affine,
}

#[derive(Clone, Debug)]
pub struct ParamLayout {
    blocks: Vec<Block>,
    pub(crate) embed_node: Affine,
    pub(crate) embed_input: Affine,
    pub(crate) embed_edge: Affine,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) head: Affine,
    len: usize,
}

impl ParamLayout {
    pub fn new(cfg: &NetConfig) -> Self {
        let d = cfg.hidden;
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut affine = |name: &str, rows: usize, cols: usize| {
            let w = offset;
            blocks.push(Block {
                name: format!("{name}.weight"),
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
            let b = offset;
            blocks.push(Block {
                name: format!("{name}.bias"),
                rows,
                cols: 1,
                offset,
            });
            offset += rows;
            Affine { w, b, rows, cols }
        };
        let embed_node = affine("embed_node", d, 3);
        let embed_input = affine("embed_input", d, 2 * d);
        let embed_edge = affine("embed_edge", d, 2);
        let layers = (0..cfg.layers)
            .map(|l| LayerOffsets {
                relation: affine(&format!("layers.{l}.relation"), d, 3 * d),
                self_loop: affine(&format!("layers.{l}.self"), d, d),
                message: affine(&format!("layers.{l}.message"), d, d),
                step: affine(&format!("layers.{l}.step"), d, d),
            })
            .collect();
        let head = affine("head", 2, d);
        Self {
            blocks,
            embed_node,
            embed_input,
            embed_edge,
            layers,
            head,
            len: offset,
        }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// All learnable weights of the denoiser as one flat vector.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    config: NetConfig,
    layout: ParamLayout,
    values: Vec<f64>,
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl NetworkParams {
    /// Glorot-uniform weights and zero biases, except that the residual
    /// branch maps (`self`, `message`, `step`) are scaled by
    /// [`RESIDUAL_INIT_SCALE`] and the head starts at zero, so the initial
    /// prediction is `μ = tanh(s)`, `σ = 1`.
    pub fn init<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::init_glorot(config, rng)?;
        for block in p.layout.blocks.clone() {
            let scale = if block.name.starts_with("head.") {
                0.0
            } else if [".self.", ".message.", ".step."].iter().any(|k| block.name.contains(k)) {
                RESIDUAL_INIT_SCALE
            } else {
                continue;
            };
            p.values[block.range()].iter_mut().for_each(|v| *v = if scale == 0.0 { 0.0 } else { *v * scale });
        }
        Ok(p)
    }

    /// Glorot-uniform weights in every block, zero biases.
    pub fn init_glorot<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut values = vec![0.0; layout.len()];
        for block in layout.blocks() {
            if block.name.ends_with(".bias") {
                continue;
            }
            let limit = (6.0 / (block.rows + block.cols) as f64).sqrt();
            for v in &mut values[block.range()] {
                *v = rng.gen_range(-limit..limit);
            }
        }
        Ok(Self { config, layout, values })
    }

    pub fn from_values(config: NetConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if values.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { config, layout, values })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .blocks()
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.values[b.range()])
    }
}
