//! Analysis and metric computations behind the paper's tables and figures.
//! Everything here is a pure function of trained artifacts and data.

pub mod export;
pub mod recon;
pub mod similarity;
pub mod studies;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub context: BTreeMap<String, String>,
}

impl MetricRecord {
    pub fn new(name: impl Into<String>, value: f64) -> Result<Self> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("metric {name} = {value}")));
        }
        Ok(Self { name, value, context: BTreeMap::new() })
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.context.insert(key.into(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationStrategy {
    RebottleneckPrefix,
    Pca,
    RandomDropout,
}

impl AblationStrategy {
    pub const ALL: [AblationStrategy; 3] =
        [AblationStrategy::RebottleneckPrefix, AblationStrategy::Pca, AblationStrategy::RandomDropout];

    pub fn name(&self) -> &'static str {
        match self {
            AblationStrategy::RebottleneckPrefix => "rebottleneck-prefix",
            AblationStrategy::Pca => "pca",
            AblationStrategy::RandomDropout => "random-dropout",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationPoint {
    /// Retained channels.
    pub m: usize,
    pub stft: f64,
    pub mel: f64,
    pub sisdr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCurve {
    pub strategy: AblationStrategy,
    pub points: Vec<AblationPoint>,
}

impl AblationCurve {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Eval("ablation curve has no points".into()));
        }
        for w in self.points.windows(2) {
            if w[1].m <= w[0].m {
                return Err(Error::Eval(format!("ablation m values not strictly increasing: {} then {}", w[0].m, w[1].m)));
            }
        }
        for p in &self.points {
            if !(p.stft.is_finite() && p.mel.is_finite() && p.sisdr.is_finite()) {
                return Err(Error::NonFinite(format!("ablation point at m={}", p.m)));
            }
        }
        Ok(())
    }
}
