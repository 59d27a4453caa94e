//! Shared graph-convolution encoder: `H ← elu(dropout(Â H W))` between layers,
//! no activation after the last one.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::csr::CsrMatrix;
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::math;
use crate::tape::{NodeId, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            layers: 3,
            dropout: 0.1,
            bias: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("encoder needs at least one layer of positive width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `in x h`, then `h x h` for the remaining layers.
    pub weights: Vec<DenseMatrix>,
    /// One `1 x h` row per layer, or empty when biases are disabled.
    pub biases: Vec<DenseMatrix>,
    pub dropout: f64,
}

/// Glorot-uniform `fan_in x fan_out` matrix.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> DenseMatrix {
    let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    DenseMatrix::from_fn(fan_in, fan_out, |_, _| (2.0 * rng.random::<f64>() - 1.0) * limit)
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let weights = (0..cfg.layers)
            .map(|l| glorot(if l == 0 { in_dim } else { cfg.hidden }, cfg.hidden, rng))
            .collect();
        let biases = if cfg.bias {
            (0..cfg.layers).map(|_| DenseMatrix::zeros(1, cfg.hidden)).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            weights,
            biases,
            dropout: cfg.dropout,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.first().map_or(0, DenseMatrix::rows)
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().map_or(0, DenseMatrix::cols)
    }

    /// Puts the weights on the tape, trainable or frozen.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> EncoderNodes {
        let mut leaf = |m: &DenseMatrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        EncoderNodes {
            weights: self.weights.iter().map(&mut leaf).collect(),
            biases: self.biases.iter().map(&mut leaf).collect(),
            dropout: self.dropout,
        }
    }
}

/// Encoder weights recorded on one tape.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub dropout: f64,
}

/// How the propagation matrix enters the tape.
#[derive(Clone, Debug)]
pub enum Propagation {
    Const(Arc<CsrMatrix>),
    /// Fixed pattern with values from a tape node, e.g. a refined adjacency.
    Valued { pattern: Arc<CsrMatrix>, values: NodeId },
}

impl Propagation {
    fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Self::Const(a) => tape.spmm_const(a.clone(), x),
            Self::Valued { pattern, values } => tape.spmm_valued(pattern.clone(), *values, x),
        }
    }
}

/// Forward pass. `rng` drives dropout and is untouched when `training` is false.
pub fn encode<R: Rng + ?Sized>(
    tape: &mut Tape,
    prop: &Propagation,
    x: NodeId,
    enc: &EncoderNodes,
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    let layers = enc.weights.len();
    let mut h = x;
    for (l, &w) in enc.weights.iter().enumerate() {
        let hw = tape.matmul(h, w)?;
        let mut out = prop.apply(tape, hw)?;
        if let Some(&b) = enc.biases.get(l) {
            out = tape.add_row_broadcast(out, b)?;
        }
        h = if l + 1 < layers {
            let dropped = tape.dropout(out, enc.dropout, training, rng)?;
            tape.elu(dropped)
        } else {
            out
        };
    }
    Ok(h)
}
