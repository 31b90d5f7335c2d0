use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Parameter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Bias-corrected first and second moment estimates.
    #[default]
    Adam,
    /// Plain gradient descent.
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
    steps: i32,
}

/// First-order optimizer with per-parameter state keyed by parameter name.
///
/// Each parameter counts its own steps, so a module that starts training
/// late gets a fresh bias correction.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Updates every parameter from its accumulated gradient. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("gradient of {}", bad.name),
            });
        }
        for p in params.iter_mut() {
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= self.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => self.adam(p),
            }
        }
        Ok(())
    }

    fn adam(&mut self, p: &mut Parameter) {
        let (rows, cols) = p.value.shape();
        let state = self
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| Moments {
                m: Matrix::zeros(rows, cols),
                v: Matrix::zeros(rows, cols),
                steps: 0,
            });
        state.steps += 1;
        let c1 = 1.0 - self.beta1.powi(state.steps);
        let c2 = 1.0 - self.beta2.powi(state.steps);
        let values = p.value.data_mut();
        let (m, v) = (state.m.data_mut(), state.v.data_mut());
        for (i, &g) in p.grad.data().iter().enumerate() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
