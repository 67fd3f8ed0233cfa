//! First-order update rules over a [`ParamSet`]. Moment estimates persist in
//! the optimizer between calls, keyed by parameter name.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Zip;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;
use crate::tape::Array;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const RMS_DECAY: f64 = 0.99;
const RMS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    Sgd,
    AdamW,
    RmsProp,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Adam,
        OptimizerKind::Sgd,
        OptimizerKind::AdamW,
        OptimizerKind::RmsProp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            _ => Err(AutodiffError::UnknownOptimizer(s.to_string())),
        }
    }
}

impl Serialize for OptimizerKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for OptimizerKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: BTreeMap<String, Array>,
    second: BTreeMap<String, Array>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Every gradient must name an existing parameter of
    /// the same shape; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Array>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::ParamShape {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
        }
        self.steps += 1;
        let OptimizerConfig {
            kind,
            learning_rate: lr,
            weight_decay: wd,
        } = self.config;
        let t = self.steps as i32;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            match kind {
                OptimizerKind::Sgd => {
                    Zip::from(p).and(g).for_each(|p, &g| *p -= lr * (g + wd * *p));
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Array::zeros(g.raw_dim()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Array::zeros(g.raw_dim()));
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    let decoupled = kind == OptimizerKind::AdamW;
                    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        let g = if decoupled {
                            *p -= lr * wd * *p;
                            g
                        } else {
                            g + wd * *p
                        };
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    });
                }
                OptimizerKind::RmsProp => {
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Array::zeros(g.raw_dim()));
                    Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
                        let g = g + wd * *p;
                        *v = RMS_DECAY * *v + (1.0 - RMS_DECAY) * g * g;
                        *p -= lr * g / (v.sqrt() + RMS_EPS);
                    });
                }
            }
        }
        Ok(())
    }
}
