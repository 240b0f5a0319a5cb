use serde::{Deserialize, Serialize};

use super::feature_standardize;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow1d::Standardize;
use crate::loss::{infer_support, softmax};
use crate::mlp::{Mlp, MlpCache};
use crate::numeric::{log_sum_exp, seeded_rng, streams};
use crate::report::RunReport;
use crate::train::{minibatch_descent, BatchLoss};

/// Feature network followed by a softmax over `labels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftmaxClassifier {
    pub labels: Vec<String>,
    pub net: Mlp,
    pub standardize: Vec<Standardize>,
}

impl SoftmaxClassifier {
    pub fn new(
        labels: Vec<String>,
        n_features: usize,
        hidden: &[usize],
        standardize: Vec<Standardize>,
        rng: &mut crate::numeric::Rng,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("classifier needs at least one label kind"));
        }
        let mut sizes = vec![n_features];
        sizes.extend_from_slice(hidden);
        sizes.push(labels.len());
        let net = Mlp::new(&sizes, 1.0, rng)?;
        Ok(SoftmaxClassifier {
            labels,
            net,
            standardize,
        })
    }

    pub fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownCategory(label.to_string()))
    }

    fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.standardize.len() {
            return Err(Error::Shape {
                expected: self.standardize.len(),
                got: x.len(),
            });
        }
        if let Some((i, v)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain {
                what: format!("x[{i}]"),
                value: *v,
            });
        }
        Ok(x.iter()
            .zip(&self.standardize)
            .map(|(v, s)| s.apply(*v))
            .collect())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.forward(&self.features(x)?))
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn prob(&self, x: &[f64], label: &str) -> Result<f64> {
        let k = self.label_index(label)?;
        Ok(self.probabilities(x)?[k])
    }

    /// `-ln Φ(x, t)` for the true label `t`.
    pub fn nll(&self, x: &[f64], label: &str) -> Result<f64> {
        let k = self.label_index(label)?;
        let z = self.logits(x)?;
        Ok(log_sum_exp(&z) - z[k])
    }

    pub fn mean_nll(&self, xs: &[Vec<f64>], labels: &[String]) -> Result<f64> {
        let mut s = 0.0;
        for (x, l) in xs.iter().zip(labels) {
            s += self.nll(x, l)?;
        }
        Ok(s / xs.len() as f64)
    }

    /// Adds the gradient of `-ln Φ` for one sample; returns the loss.
    fn sample_grad(&self, feats: &[f64], k: usize, cache: &mut MlpCache, grad: &mut [f64]) -> f64 {
        self.net.forward_cached(feats, cache);
        let z = cache.output();
        let p = softmax(z);
        let loss = log_sum_exp(z) - z[k];
        let mut dz = p;
        dz[k] -= 1.0;
        self.net.backward(cache, &dz, grad);
        loss
    }

    pub fn mean_nll_and_grad(&self, xs: &[Vec<f64>], labels: &[String]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.net.n_params()];
        let mut cache = MlpCache::default();
        let mut total = 0.0;
        for (x, l) in xs.iter().zip(labels) {
            let f = self.features(x)?;
            total += self.sample_grad(&f, self.label_index(l)?, &mut cache, &mut grad);
        }
        let k = 1.0 / xs.len() as f64;
        grad.iter_mut().for_each(|g| *g *= k);
        Ok((total * k, grad))
    }

    /// CSV `input...,label,prob` with one row per input and label kind.
    pub fn predictions_csv(&self, names: &[String], xs: &[Vec<f64>]) -> Result<String> {
        let mut s = names.join(",");
        s.push_str(",label,prob\n");
        for x in xs {
            let p = self.probabilities(x)?;
            for (l, pl) in self.labels.iter().zip(&p) {
                for v in x {
                    s.push_str(&format!("{v},"));
                }
                s.push_str(&format!("{l},{pl}\n"));
            }
        }
        Ok(s)
    }
}

/// `-Σ_k y_k ln p_k` with a one-hot `y` at `label`, from probabilities.
pub fn cross_entropy_one_hot(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| if k == label { -p.ln() } else { 0.0 })
        .sum()
}

/// Trains a classifier on features `config.columns.x` (all numeric columns
/// when empty) and the categorical column `config.columns.label`.
pub fn train_classifier(
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(SoftmaxClassifier, RunReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let label_col = config
        .columns
        .label
        .as_deref()
        .ok_or_else(|| Error::invalid("classifier needs columns.label"))?;
    let labels = data.categorical(label_col)?.to_vec();
    let names = if config.columns.x.is_empty() {
        data.numeric_names()
    } else {
        config.columns.x.clone()
    };
    let xs = data.numeric_rows(&names)?;
    let kinds = infer_support(&labels);
    let standardize = feature_standardize(&xs, names.len());
    let mut rng = seeded_rng(config.seed, streams::INIT);
    let mut model = SoftmaxClassifier::new(
        kinds,
        names.len(),
        &config.model.hidden,
        standardize,
        &mut rng,
    )?;
    let feats: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| model.features(x))
        .collect::<Result<_>>()?;
    let targets: Vec<usize> = labels
        .iter()
        .map(|l| model.label_index(l))
        .collect::<Result<_>>()?;

    let (mut report, started) = RunReport::start("classifier", config);
    report.initial_loss = model.mean_nll(&xs, &labels)?;
    let mut params = model.net.params.clone();
    let mut cache = MlpCache::default();
    minibatch_descent(
        xs.len(),
        config,
        &mut params,
        &mut report,
        0.0,
        |p, batch, grad| {
            model.net.params.copy_from_slice(p);
            let mut loss_sum = 0.0;
            for &s in batch {
                loss_sum += model.sample_grad(&feats[s], targets[s], &mut cache, grad);
            }
            Ok(BatchLoss {
                loss_sum,
                clamps: 0,
            })
        },
    )?;
    model.net.params = params;
    report.finish(started);
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Column;
    use crate::numeric::{finite_diff_gradient, gradient_rel_error};

    fn dataset(xs: Vec<f64>, labels: &[&str]) -> Dataset {
        Dataset::new()
            .with_column("x", Column::Numeric(xs))
            .unwrap()
            .with_column(
                "label",
                Column::Categorical(labels.iter().map(|s| s.to_string()).collect()),
            )
            .unwrap()
    }

    fn config(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.epochs = epochs;
        cfg.learning_rate = 0.05;
        cfg.model.hidden = vec![4];
        cfg.columns.label = Some("label".into());
        cfg
    }

    #[test]
    fn duplicated_inputs_learn_the_empirical_conditional() {
        let data = dataset(vec![0.0; 4], &["A", "A", "A", "B"]);
        let (m, _) = train_classifier(&data, &config(500)).unwrap();
        assert!((m.prob(&[0.0], "A").unwrap() - 0.75).abs() < 1e-2);
    }

    #[test]
    fn single_kind_is_certain() {
        let data = dataset(vec![0.0, 1.0, 2.0], &["A", "A", "A"]);
        let (m, rep) = train_classifier(&data, &config(5)).unwrap();
        assert_eq!(m.prob(&[0.5], "A").unwrap(), 1.0);
        assert_eq!(m.nll(&[0.5], "A").unwrap(), 0.0);
        assert_eq!(rep.final_loss(), 0.0);
    }

    #[test]
    fn loss_equals_one_hot_cross_entropy() {
        let mut rng = seeded_rng(1, 0);
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let m = SoftmaxClassifier::new(labels, 2, &[5], vec![Standardize::IDENTITY; 2], &mut rng)
            .unwrap();
        for x in [[0.1, 0.2], [-1.0, 3.0], [2.0, -0.5]] {
            for (k, l) in ["a", "b", "c"].iter().enumerate() {
                let ce = cross_entropy_one_hot(&m.probabilities(&x).unwrap(), k);
                assert!((m.nll(&x, l).unwrap() - ce).abs() <= 1e-12);
            }
            let s: f64 = m.probabilities(&x).unwrap().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn unknown_label_is_an_error() {
        let mut rng = seeded_rng(1, 0);
        let m = SoftmaxClassifier::new(
            vec!["a".into()],
            1,
            &[2],
            vec![Standardize::IDENTITY],
            &mut rng,
        )
        .unwrap();
        assert_eq!(
            m.nll(&[0.0], "z").unwrap_err(),
            Error::UnknownCategory("z".into())
        );
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = seeded_rng(2, 0);
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let m =
            SoftmaxClassifier::new(labels, 2, &[4, 3], vec![Standardize::IDENTITY; 2], &mut rng)
                .unwrap();
        let xs = vec![vec![0.3, -0.2], vec![1.0, 0.5], vec![-0.7, 0.9]];
        let ls: Vec<String> = ["a", "c", "b"].iter().map(|s| s.to_string()).collect();
        let (_, g) = m.mean_nll_and_grad(&xs, &ls).unwrap();
        let fd = finite_diff_gradient(
            |p| {
                let mut c = m.clone();
                c.net.params = p.to_vec();
                c.mean_nll(&xs, &ls).unwrap()
            },
            &m.net.params,
            1e-6,
        );
        assert!(gradient_rel_error(&g, &fd, 1e-8) <= 1e-4);
    }
}
