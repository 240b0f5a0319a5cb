//! The negative-log loss and the discrete estimators built on it.
//!
//! For a discrete support the model function is a softmax over free logits, so
//! the normalization `Σ Φ = 1` holds by construction and minimizing the mean
//! `-ln Φ` drives `Φ` to the empirical frequencies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{compensated_sum, log_sum_exp, KahanSum};

/// A strictly positive probability mass or density.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ModelFunctionValue(f64);

impl ModelFunctionValue {
    pub fn new(phi: f64) -> Result<Self> {
        if phi > 0.0 && phi.is_finite() {
            Ok(ModelFunctionValue(phi))
        } else {
            Err(Error::Domain {
                what: "phi".into(),
                value: phi,
            })
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Loss in nats.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LossValue(pub f64);

pub fn log_loss(phi: ModelFunctionValue) -> LossValue {
    LossValue(-phi.0.ln())
}

/// `-ln phi`, validating `phi` first.
pub fn log_loss_of(phi: f64) -> Result<LossValue> {
    Ok(log_loss(ModelFunctionValue::new(phi)?))
}

/// Compensated mean of `-ln model(i)` over `n` samples.
pub fn expected_loss<F>(n: usize, model: F) -> Result<f64>
where
    F: Fn(usize) -> f64,
{
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut acc = KahanSum::new();
    for i in 0..n {
        let l = log_loss_of(model(i)).map_err(|e| e.at_sample(i))?;
        acc.add(l.0);
    }
    Ok(acc.total() / n as f64)
}

/// Expected loss of a model evaluated on each row of a dataset.
pub fn expected_loss_on<F>(data: &Dataset, model: F) -> Result<f64>
where
    F: Fn(&Dataset, usize) -> f64,
{
    expected_loss(data.len(), |i| model(data, i))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logits);
    logits.iter().map(|l| (l - z).exp()).collect()
}

/// Softmax model over a finite support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteEstimator {
    pub support: Vec<String>,
    pub logits: Vec<f64>,
}

impl DiscreteEstimator {
    pub fn new(support: Vec<String>, logits: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::invalid("support must have at least one outcome"));
        }
        if support.len() != logits.len() {
            return Err(Error::Shape {
                expected: support.len(),
                got: logits.len(),
            });
        }
        let mut sorted = support.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != support.len() {
            return Err(Error::invalid("support outcomes must be distinct"));
        }
        Ok(DiscreteEstimator { support, logits })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn index_of(&self, outcome: &str) -> Result<usize> {
        self.support
            .iter()
            .position(|s| s == outcome)
            .ok_or_else(|| Error::UnknownCategory(outcome.to_string()))
    }

    pub fn prob(&self, outcome: &str) -> Result<f64> {
        let i = self.index_of(outcome)?;
        Ok(self.probabilities()[i])
    }

    /// Mean `-ln Φ` over `outcomes`.
    pub fn expected_loss(&self, outcomes: &[String]) -> Result<f64> {
        let z = log_sum_exp(&self.logits);
        let idx = outcomes
            .iter()
            .map(|o| self.index_of(o))
            .collect::<Result<Vec<_>>>()?;
        if idx.is_empty() {
            return Err(Error::EmptyData);
        }
        Ok(compensated_sum(idx.iter().map(|&i| z - self.logits[i])) / idx.len() as f64)
    }
}

/// Support inferred from data: distinct outcomes in sorted order.
pub fn infer_support(outcomes: &[String]) -> Vec<String> {
    let mut s = outcomes.to_vec();
    s.sort();
    s.dedup();
    s
}

fn frequencies(outcomes: &[String], support: &[String]) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; support.len()];
    for o in outcomes {
        let i = support
            .iter()
            .position(|s| s == o)
            .ok_or_else(|| Error::UnknownCategory(o.clone()))?;
        counts[i] += 1;
    }
    let n = outcomes.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Gradient descent on the mean log loss over softmax logits, starting from
/// uniform logits. Stops once `max |Φ - P̂| < config.tolerance` or after
/// `config.epochs` steps.
pub fn fit_outcomes(
    outcomes: &[String],
    support: Option<Vec<String>>,
    config: &TrainConfig,
) -> Result<DiscreteEstimator> {
    if outcomes.is_empty() {
        return Err(Error::EmptyData);
    }
    let support = support.unwrap_or_else(|| infer_support(outcomes));
    let freq = frequencies(outcomes, &support)?;
    let mut est = DiscreteEstimator::new(support, vec![0.0; freq.len()])?;
    let lr = config.learning_rate;
    for _ in 0..config.epochs {
        let p = est.probabilities();
        // d/dlogit_k of -Σ P̂_j ln softmax_j = p_k - P̂_k
        let grad: Vec<f64> = p.iter().zip(&freq).map(|(a, b)| a - b).collect();
        if grad.iter().all(|g| g.abs() < config.tolerance) {
            break;
        }
        for (l, g) in est.logits.iter_mut().zip(&grad) {
            *l -= lr * g;
        }
    }
    Ok(est)
}

/// Fits a [`DiscreteEstimator`] to the single categorical column of `data`
/// (or the column named by `config.columns.label`).
pub fn fit_discrete(
    data: &Dataset,
    support: Option<Vec<String>>,
    config: &TrainConfig,
) -> Result<DiscreteEstimator> {
    let name = match &config.columns.label {
        Some(n) => n.clone(),
        None => data.names().first().cloned().ok_or(Error::EmptyData)?,
    };
    fit_outcomes(data.categorical(&name)?, support, config)
}

/// One discrete estimator per observed condition value, over a shared outcome support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalEstimator {
    pub table: BTreeMap<String, DiscreteEstimator>,
}

impl ConditionalEstimator {
    pub fn get(&self, condition: &str) -> Result<&DiscreteEstimator> {
        self.table
            .get(condition)
            .ok_or_else(|| Error::UnseenCondition(condition.to_string()))
    }

    pub fn prob(&self, condition: &str, outcome: &str) -> Result<f64> {
        self.get(condition)?.prob(outcome)
    }
}

pub fn fit_discrete_conditional(
    data: &Dataset,
    condition: &str,
    outcome: &str,
    config: &TrainConfig,
) -> Result<ConditionalEstimator> {
    let conds = data.categorical(condition)?;
    let outs = data.categorical(outcome)?;
    if conds.is_empty() {
        return Err(Error::EmptyData);
    }
    let support = infer_support(outs);
    let mut grouped: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (c, o) in conds.iter().zip(outs) {
        grouped.entry(c.clone()).or_default().push(o.clone());
    }
    let table = grouped
        .into_iter()
        .map(|(c, os)| Ok((c, fit_outcomes(&os, Some(support.clone()), config)?)))
        .collect::<Result<_>>()?;
    Ok(ConditionalEstimator { table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    pub(crate) fn discrete_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 2.0,
            epochs: 1_000_000,
            tolerance: 1e-7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn log_loss_examples() {
        assert_eq!(log_loss_of(1.0).unwrap().0, 0.0);
        assert!((log_loss_of((-2f64).exp()).unwrap().0 - 2.0).abs() < 1e-15);
        assert!(matches!(log_loss_of(0.0), Err(Error::Domain { value, .. }) if value == 0.0));
        assert!(log_loss_of(-1.0).is_err());
    }

    #[test]
    fn expected_loss_examples() {
        assert_eq!(expected_loss(7, |_| 1.0).unwrap(), 0.0);
        let phis = [(-1f64).exp(), (-3f64).exp()];
        assert!((expected_loss(2, |i| phis[i]).unwrap() - 2.0).abs() < 1e-15);
        // counts [3,1] under the empirical-frequency model
        let phis = [0.75, 0.75, 0.75, 0.25];
        let oracle = -0.75 * 0.75f64.ln() - 0.25 * 0.25f64.ln();
        let got = expected_loss(4, |i| phis[i]).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn expected_loss_reports_sample_index() {
        let err = expected_loss(3, |i| if i == 2 { 0.0 } else { 1.0 }).unwrap_err();
        assert!(matches!(err, Error::Sample { index: 2, .. }));
    }

    #[test]
    fn fit_symmetric_and_skewed() {
        let cfg = discrete_config();
        let e = fit_outcomes(&strings(&["a", "b"]), None, &cfg).unwrap();
        assert_eq!(e.probabilities(), vec![0.5, 0.5]);

        let e = fit_outcomes(&strings(&["a", "a", "a", "b"]), None, &cfg).unwrap();
        let p = e.probabilities();
        assert!((p[0] - 0.75).abs() < 1e-6 && (p[1] - 0.25).abs() < 1e-6);

        let e = fit_outcomes(&strings(&["z"; 5]), None, &cfg).unwrap();
        assert_eq!(e.probabilities(), vec![1.0]);
    }

    #[test]
    fn fit_errors() {
        let cfg = discrete_config();
        assert_eq!(fit_outcomes(&[], None, &cfg), Err(Error::EmptyData));
        assert_eq!(
            fit_outcomes(&strings(&["c"]), Some(strings(&["a", "b"])), &cfg),
            Err(Error::UnknownCategory("c".into()))
        );
    }

    #[test]
    fn fit_discrete_reads_categorical_column() {
        let ds = Dataset::new()
            .with_column("k", Column::Categorical(strings(&["x", "y", "y", "y"])))
            .unwrap();
        let e = fit_discrete(&ds, None, &discrete_config()).unwrap();
        assert!((e.prob("y").unwrap() - 0.75).abs() < 1e-6);
        let numeric = Dataset::from_values(vec![1.0]);
        assert!(fit_discrete(&numeric, None, &discrete_config()).is_err());
    }

    #[test]
    fn conditional_fit() {
        let ds = Dataset::new()
            .with_column("a", Column::Categorical(strings(&["0", "0", "0", "1"])))
            .unwrap()
            .with_column("b", Column::Categorical(strings(&["A", "A", "B", "B"])))
            .unwrap();
        let est = fit_discrete_conditional(&ds, "a", "b", &discrete_config()).unwrap();
        let oracle =
            crate::verify::empirical_conditional(&[("0", "A"), ("0", "A"), ("0", "B"), ("1", "B")])
                .unwrap();
        for c in ["0", "1"] {
            for o in ["A", "B"] {
                let got = est.prob(c, o).unwrap();
                let want = oracle.prob(c, o).unwrap();
                assert!((got - want).abs() < 1e-4, "{c},{o}: {got} vs {want}");
            }
            let row: f64 = est.get(c).unwrap().probabilities().iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
        assert_eq!(est.prob("2", "A"), Err(Error::UnseenCondition("2".into())));
    }

    #[test]
    fn json_shape() {
        let e = DiscreteEstimator::new(strings(&["a", "b"]), vec![0.5, -0.5]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        assert_eq!(v["support"], serde_json::json!(["a", "b"]));
        assert_eq!(v["logits"], serde_json::json!([0.5, -0.5]));
    }
}
