//! Training configuration shared by every trainer and the CLI.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Backpropagate the full loss.
    #[default]
    Global,
    /// Per-layer updates from each layer's own localized loss terms.
    Local,
    /// Per-time-slice updates from that slice's localized terms.
    SequentialLocal,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Global => "global",
            TrainMode::Local => "local",
            TrainMode::SequentialLocal => "sequential_local",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Sigmoid,
    Tanh,
    Softplus,
}

/// Architecture and dynamics settings. Each model reads the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of feed-forward networks.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Number of middle layers of a triangular flow (total layers = depth + 1).
    pub depth: usize,
    /// Logistic units per node in each triangular layer.
    pub units: usize,
    /// Hidden width of the conditioning network of a conditional flow.
    pub cond_hidden: usize,
    /// Optional column permutation for triangular flows.
    pub permutation: Option<Vec<usize>>,
    pub mode: TrainMode,
    /// Regression head with Σ fixed to the identity.
    pub fixed_covariance: bool,
    /// Time-evolution node count; defaults to twice the data dimension.
    pub nodes: Option<usize>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    pub poly_degree: usize,
    /// Initial value of the free parameters behind θ₁, θ₂ of the boundary functions.
    pub boundary_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![16, 16],
            activation: Activation::Sigmoid,
            depth: 2,
            units: 4,
            cond_hidden: 16,
            permutation: None,
            mode: TrainMode::Global,
            fixed_covariance: false,
            nodes: None,
            horizon: 1.0,
            dt: 1e-2,
            poly_degree: 3,
            boundary_init: -2.0,
        }
    }
}

/// Which dataset columns feed which role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnRoles {
    /// Inputs (or the modelled columns of an unconditional estimator).
    pub x: Vec<String>,
    /// Targets of regression / conditional flows.
    pub t: Vec<String>,
    /// Categorical label of a classifier.
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Convergence tolerance on the change of the epoch loss.
    pub tolerance: f64,
    pub model: ModelConfig,
    pub columns: ColumnRoles,
    /// Named overrides of verification tolerances.
    pub tolerances: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 2000,
            batch_size: 0,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            tolerance: 1e-6,
            model: ModelConfig::default(),
            columns: ColumnRoles::default(),
            tolerances: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Json(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        let m = &self.model;
        if m.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if m.units == 0 {
            return bad("units must be positive");
        }
        if !(m.dt > 0.0 && m.horizon > 0.0 && m.dt <= m.horizon) {
            return bad("need 0 < dt <= T");
        }
        if self.tolerances.values().any(|v| !(*v >= 0.0)) {
            return bad("tolerances must be non-negative");
        }
        Ok(())
    }

    pub fn tolerance_or(&self, name: &str, default: f64) -> f64 {
        self.tolerances.get(name).copied().unwrap_or(default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = TrainConfig::from_json(r#"{"seed": 9, "model": {"depth": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.depth, 3);
        assert_eq!(cfg.model.hidden, vec![16, 16]);
        assert_eq!(cfg.learning_rate, 1e-2);
    }

    #[test]
    fn schema_violations() {
        assert!(TrainConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"learning_rate": -1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"model": {"dt": 2.0}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"model": {"mode": "sideways"}}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }
}
