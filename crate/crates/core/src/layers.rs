//! Normalization and linear layers assembled from graph primitives.

use crate::error::Result;
use crate::graph::{BatchStats, Graph, Var};
use crate::params::{Bound, ParamStore};

/// Whether batch-norm layers use batch statistics (and report them) or
/// their running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: bound.get(&format!("{prefix}.gain"))?,
            bias: bound.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias)
    }
}

/// Batch norm over every axis but the last.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: Var,
    pub bias: Var,
    /// Running (mean, variance); set in evaluation mode.
    pub running: Option<(Vec<f64>, Vec<f64>)>,
}

impl BatchNorm {
    pub fn bind(bound: &Bound, store: &ParamStore, prefix: &str, mode: Mode) -> Result<Self> {
        let running = match mode {
            Mode::Train => None,
            Mode::Eval => Some((
                store.buffer(&format!("{prefix}.running_mean"))?.data().to_vec(),
                store.buffer(&format!("{prefix}.running_var"))?.data().to_vec(),
            )),
        };
        Ok(Self {
            gain: bound.get(&format!("{prefix}.gain"))?,
            bias: bound.get(&format!("{prefix}.bias"))?,
            running,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<(Var, Option<BatchStats>)> {
        let running = self
            .running
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()));
        g.batch_norm(x, self.gain, self.bias, running)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: bound.get(&format!("{prefix}.weight"))?,
            bias: bound.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, Some(self.bias))
    }
}
