use serde::{Deserialize, Serialize};

use super::feature_standardize;
use crate::config::TrainConfig;
use crate::data::{mean_std, Dataset};
use crate::error::{Error, Result};
use crate::flow1d::Standardize;
use crate::mlp::{Mlp, MlpCache};
use crate::numeric::{seeded_rng, sigmoid, softplus, softplus_inv, streams, DenseMatrix, Rng};
use crate::report::RunReport;
use crate::train::{minibatch_descent, BatchLoss};

/// Diagonal of the covariance factor is `softplus(raw) + FACTOR_FLOOR`.
pub const FACTOR_FLOOR: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Mean and lower-triangular factor `L` of `Σ = L Lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOutput {
    pub mu: Vec<f64>,
    pub l: DenseMatrix,
}

impl GaussianOutput {
    pub fn sigma(&self) -> DenseMatrix {
        self.l.matmul(&self.l.transpose()).expect("square factor")
    }

    /// Marginal standard deviations.
    pub fn std_devs(&self) -> Vec<f64> {
        let s = self.sigma();
        (0..self.mu.len()).map(|i| s[(i, i)].sqrt()).collect()
    }
}

/// `y = L⁻¹ r` by forward substitution.
fn solve_lower(l: &DenseMatrix, r: &[f64]) -> Vec<f64> {
    let n = r.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = r[i];
        for j in 0..i {
            s -= l[(i, j)] * y[j];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// `g = L⁻ᵀ y` by back substitution.
fn solve_upper_t(l: &DenseMatrix, y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut g = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for j in i + 1..n {
            s -= l[(j, i)] * g[j];
        }
        g[i] = s / l[(i, i)];
    }
    g
}

/// `n/2 ln 2π + ½ ln|Σ| + ½ (t-μ)ᵀ Σ⁻¹ (t-μ)` through the factor `L`.
pub fn gaussian_nll(out: &GaussianOutput, t: &[f64]) -> Result<f64> {
    let n = out.mu.len();
    if t.len() != n || out.l.rows() != n || out.l.cols() != n {
        return Err(Error::Shape {
            expected: n,
            got: t.len(),
        });
    }
    for i in 0..n {
        if !(out.l[(i, i)] > 0.0) || out.l.row(i)[i + 1..].iter().any(|v| *v != 0.0) {
            return Err(Error::invalid(
                "covariance factor must be lower triangular with positive diagonal",
            ));
        }
    }
    let r: Vec<f64> = t.iter().zip(&out.mu).map(|(a, b)| a - b).collect();
    let y = solve_lower(&out.l, &r);
    let log_det_half: f64 = (0..n).map(|i| out.l[(i, i)].ln()).sum();
    let quad: f64 = y.iter().map(|v| v * v).sum();
    Ok(n as f64 * HALF_LN_2PI + log_det_half + 0.5 * quad)
}

/// Network from inputs to a Gaussian over `n_targets` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianRegressionHead {
    pub n_targets: usize,
    /// `Σ = I`; the network then only predicts the mean.
    pub fixed_covariance: bool,
    pub net: Mlp,
    pub standardize: Vec<Standardize>,
}

fn n_outputs(n: usize, fixed: bool) -> usize {
    if fixed {
        n
    } else {
        n + n * (n + 1) / 2
    }
}

impl GaussianRegressionHead {
    /// Output biases start at the target means (and scales).
    pub fn new(
        n_inputs: usize,
        hidden: &[usize],
        target_stats: &[(f64, f64)],
        fixed_covariance: bool,
        standardize: Vec<Standardize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let n = target_stats.len();
        if n == 0 {
            return Err(Error::invalid("regression needs at least one target"));
        }
        let mut sizes = vec![n_inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(n_outputs(n, fixed_covariance));
        let mut net = Mlp::new(&sizes, 0.1, rng)?;
        let n_out = *sizes.last().unwrap();
        let bias0 = net.params.len() - n_out;
        for (i, (mean, _)) in target_stats.iter().enumerate() {
            net.params[bias0 + i] = *mean;
        }
        if !fixed_covariance {
            for i in 0..n {
                let std = target_stats[i].1.max(1e-3);
                net.params[bias0 + n + i * (i + 1) / 2 + i] = softplus_inv(std);
            }
        }
        Ok(GaussianRegressionHead {
            n_targets: n,
            fixed_covariance,
            net,
            standardize,
        })
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

    fn output_of(&self, raw: &[f64]) -> GaussianOutput {
        let n = self.n_targets;
        let mu = raw[..n].to_vec();
        let mut l = DenseMatrix::identity(n);
        if !self.fixed_covariance {
            let mut k = n;
            for i in 0..n {
                for j in 0..=i {
                    let v = if i == j {
                        softplus(raw[k]) + FACTOR_FLOOR
                    } else {
                        raw[k]
                    };
                    l[(i, j)] = v;
                    k += 1;
                }
            }
        }
        GaussianOutput { mu, l }
    }

    pub fn predict(&self, x: &[f64]) -> Result<GaussianOutput> {
        Ok(self.output_of(&self.net.forward(&self.features(x)?)))
    }

    pub fn nll(&self, x: &[f64], t: &[f64]) -> Result<f64> {
        gaussian_nll(&self.predict(x)?, t)
    }

    pub fn mean_nll(&self, xs: &[Vec<f64>], ts: &[Vec<f64>]) -> Result<f64> {
        let mut s = 0.0;
        for (x, t) in xs.iter().zip(ts) {
            s += self.nll(x, t)?;
        }
        Ok(s / xs.len() as f64)
    }

    /// Adds the gradient of `gaussian_nll` for one sample; returns the loss.
    fn sample_grad(&self, feats: &[f64], t: &[f64], cache: &mut MlpCache, grad: &mut [f64]) -> f64 {
        self.net.forward_cached(feats, cache);
        let raw = cache.output();
        let out = self.output_of(raw);
        let n = self.n_targets;
        let r: Vec<f64> = t.iter().zip(&out.mu).map(|(a, b)| a - b).collect();
        let y = solve_lower(&out.l, &r);
        let g = solve_upper_t(&out.l, &y);
        let mut d_raw = vec![0.0; raw.len()];
        for i in 0..n {
            d_raw[i] = -g[i];
        }
        let mut loss = n as f64 * HALF_LN_2PI;
        if !self.fixed_covariance {
            let mut k = n;
            for i in 0..n {
                for j in 0..=i {
                    let mut lb = -g[i] * y[j];
                    if i == j {
                        lb += 1.0 / out.l[(i, i)];
                        d_raw[k] = lb * sigmoid(raw[k]);
                        loss += out.l[(i, i)].ln();
                    } else {
                        d_raw[k] = lb;
                    }
                    k += 1;
                }
            }
        }
        loss += 0.5 * y.iter().map(|v| v * v).sum::<f64>();
        self.net.backward(cache, &d_raw, grad);
        loss
    }

    pub fn mean_nll_and_grad(&self, xs: &[Vec<f64>], ts: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.net.n_params()];
        let mut cache = MlpCache::default();
        let mut total = 0.0;
        for (x, t) in xs.iter().zip(ts) {
            total += self.sample_grad(&self.features(x)?, t, &mut cache, &mut grad);
        }
        let k = 1.0 / xs.len() as f64;
        grad.iter_mut().for_each(|g| *g *= k);
        Ok((total * k, grad))
    }

    /// CSV `input...,mu...,sigma...` (sigma = marginal standard deviations).
    pub fn predictions_csv(
        &self,
        x_names: &[String],
        t_names: &[String],
        xs: &[Vec<f64>],
    ) -> Result<String> {
        let mut header: Vec<String> = x_names.to_vec();
        header.extend(t_names.iter().map(|t| format!("mu_{t}")));
        header.extend(t_names.iter().map(|t| format!("sigma_{t}")));
        let mut s = header.join(",");
        s.push('\n');
        for x in xs {
            let out = self.predict(x)?;
            let fields: Vec<String> = x
                .iter()
                .chain(&out.mu)
                .chain(&out.std_devs())
                .map(|v| v.to_string())
                .collect();
            s.push_str(&fields.join(","));
            s.push('\n');
        }
        Ok(s)
    }
}

struct Prepared {
    xs: Vec<Vec<f64>>,
    ts: Vec<Vec<f64>>,
    x_names: Vec<String>,
    t_names: Vec<String>,
}

fn prepare(data: &Dataset, config: &TrainConfig) -> Result<Prepared> {
    config.validate()?;
    if config.columns.x.is_empty() || config.columns.t.is_empty() {
        return Err(Error::invalid(
            "regression needs non-empty columns.x and columns.t",
        ));
    }
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(Prepared {
        xs: data.numeric_rows(&config.columns.x)?,
        ts: data.numeric_rows(&config.columns.t)?,
        x_names: config.columns.x.clone(),
        t_names: config.columns.t.clone(),
    })
}

fn init_head(
    xs: &[Vec<f64>],
    ts: &[Vec<f64>],
    n_inputs: usize,
    fixed: bool,
    config: &TrainConfig,
) -> Result<GaussianRegressionHead> {
    if xs.is_empty() || xs.len() != ts.len() {
        return Err(Error::EmptyData);
    }
    let n = ts[0].len();
    let stats: Vec<(f64, f64)> = (0..n)
        .map(|c| mean_std(&ts.iter().map(|t| t[c]).collect::<Vec<_>>()))
        .collect();
    let mut rng = seeded_rng(config.seed, streams::INIT);
    GaussianRegressionHead::new(
        n_inputs,
        &config.model.hidden,
        &stats,
        fixed,
        feature_standardize(xs, n_inputs),
        &mut rng,
    )
}

/// Trains a Gaussian head on `config.columns.x -> config.columns.t`.
pub fn train_regression(
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(GaussianRegressionHead, RunReport)> {
    let p = prepare(data, config)?;
    train_regression_rows(&p.xs, &p.ts, &p.x_names, &p.t_names, config)
}

pub fn train_regression_rows(
    xs: &[Vec<f64>],
    ts: &[Vec<f64>],
    x_names: &[String],
    _t_names: &[String],
    config: &TrainConfig,
) -> Result<(GaussianRegressionHead, RunReport)> {
    let mut head = init_head(xs, ts, x_names.len(), config.model.fixed_covariance, config)?;
    let feats: Vec<Vec<f64>> = xs.iter().map(|x| head.features(x)).collect::<Result<_>>()?;
    let (mut report, started) = RunReport::start("regression", config);
    report.initial_loss = head.mean_nll(xs, ts)?;
    let mut params = head.net.params.clone();
    let mut cache = MlpCache::default();
    minibatch_descent(
        xs.len(),
        config,
        &mut params,
        &mut report,
        0.0,
        |p, batch, grad| {
            head.net.params.copy_from_slice(p);
            let mut loss_sum = 0.0;
            for &s in batch {
                loss_sum += head.sample_grad(&feats[s], &ts[s], &mut cache, grad);
            }
            Ok(BatchLoss {
                loss_sum,
                clamps: 0,
            })
        },
    )?;
    head.net.params = params;
    report.finish(started);
    Ok((head, report))
}

/// Mean-squared-error training (`½‖t - μ‖²`) of a mean-only head, coded
/// without any covariance machinery. Reported losses exclude the Gaussian
/// constant.
pub fn train_mse(
    xs: &[Vec<f64>],
    ts: &[Vec<f64>],
    config: &TrainConfig,
) -> Result<(GaussianRegressionHead, RunReport)> {
    let n_inputs = xs.first().map(|x| x.len()).ok_or(Error::EmptyData)?;
    let mut head = init_head(xs, ts, n_inputs, true, config)?;
    let feats: Vec<Vec<f64>> = xs.iter().map(|x| head.features(x)).collect::<Result<_>>()?;
    let (mut report, started) = RunReport::start("mse", config);
    let mut params = head.net.params.clone();
    let mut cache = MlpCache::default();
    minibatch_descent(
        xs.len(),
        config,
        &mut params,
        &mut report,
        0.0,
        |p, batch, grad| {
            head.net.params.copy_from_slice(p);
            let mut loss_sum = 0.0;
            for &s in batch {
                head.net.forward_cached(&feats[s], &mut cache);
                let diff: Vec<f64> = cache
                    .output()
                    .iter()
                    .zip(&ts[s])
                    .map(|(m, t)| m - t)
                    .collect();
                loss_sum += 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
                head.net.backward(&cache, &diff, grad);
            }
            Ok(BatchLoss {
                loss_sum,
                clamps: 0,
            })
        },
    )?;
    head.net.params = params;
    report.finish(started);
    Ok((head, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, gradient_rel_error, standard_normal};
    use rand::Rng as _;

    fn out_1d(mu: f64, l: f64) -> GaussianOutput {
        GaussianOutput {
            mu: vec![mu],
            l: DenseMatrix::from_rows(1, 1, vec![l]).unwrap(),
        }
    }

    #[test]
    fn scalar_examples() {
        assert!(
            (gaussian_nll(&out_1d(0.3, 1.0), &[0.3]).unwrap() - 0.918_938_533_204_672_7).abs()
                < 1e-15
        );
        let v = gaussian_nll(&out_1d(0.3, 1.0), &[1.5]).unwrap();
        assert!((v - (HALF_LN_2PI + 0.5 * 1.2 * 1.2)).abs() < 1e-14);
    }

    #[test]
    fn matches_dense_inverse_in_two_dimensions() {
        let mut rng = seeded_rng(3, 0);
        for _ in 0..50 {
            let l = DenseMatrix::from_rows(
                2,
                2,
                vec![
                    rng.random_range(0.2..2.0),
                    0.0,
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.2..2.0),
                ],
            )
            .unwrap();
            let out = GaussianOutput {
                mu: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                l,
            };
            let t = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let s = out.sigma();
            let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
            let inv = [
                [s[(1, 1)] / det, -s[(0, 1)] / det],
                [-s[(1, 0)] / det, s[(0, 0)] / det],
            ];
            let r = [t[0] - out.mu[0], t[1] - out.mu[1]];
            let mut q = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    q += r[i] * inv[i][j] * r[j];
                }
            }
            let oracle = (2.0 * std::f64::consts::PI).ln() + 0.5 * det.ln() + 0.5 * q;
            assert!((gaussian_nll(&out, &t).unwrap() - oracle).abs() <= 1e-10);
        }
    }

    #[test]
    fn rejects_bad_factor() {
        assert!(gaussian_nll(&out_1d(0.0, -1.0), &[0.0]).is_err());
        let upper = GaussianOutput {
            mu: vec![0.0, 0.0],
            l: DenseMatrix::from_rows(2, 2, vec![1.0, 0.5, 0.0, 1.0]).unwrap(),
        };
        assert!(gaussian_nll(&upper, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gradient_through_covariance_factor() {
        let mut rng = seeded_rng(4, 0);
        let head = GaussianRegressionHead::new(
            2,
            &[5],
            &[(0.0, 1.0), (1.0, 2.0), (-1.0, 0.5)],
            false,
            vec![Standardize::IDENTITY; 2],
            &mut rng,
        )
        .unwrap();
        let mut head = head;
        head.net
            .params
            .iter_mut()
            .for_each(|p| *p += 0.3 * standard_normal(&mut rng));
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| vec![standard_normal(&mut rng), standard_normal(&mut rng)])
            .collect();
        let ts: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| standard_normal(&mut rng)).collect())
            .collect();
        let (_, g) = head.mean_nll_and_grad(&xs, &ts).unwrap();
        let fd = finite_diff_gradient(
            |p| {
                let mut h = head.clone();
                h.net.params = p.to_vec();
                h.mean_nll(&xs, &ts).unwrap()
            },
            &head.net.params,
            1e-6,
        );
        let err = gradient_rel_error(&g, &fd, 1e-8);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn fixed_covariance_equals_mse_trajectory() {
        let mut rng = seeded_rng(5, 0);
        let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let ts: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| vec![x[0].sin() + 0.1 * standard_normal(&mut rng)])
            .collect();
        let names = vec!["x".to_string()];
        for epochs in [1, 7, 30] {
            let mut cfg = TrainConfig::default();
            cfg.epochs = epochs;
            cfg.batch_size = 16;
            cfg.model.hidden = vec![6];
            cfg.model.fixed_covariance = true;
            let (a, ra) = train_regression_rows(&xs, &ts, &names, &names, &cfg).unwrap();
            let (b, rb) = train_mse(&xs, &ts, &cfg).unwrap();
            let diff = a
                .net
                .params
                .iter()
                .zip(&b.net.params)
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12, "epochs {epochs}: {diff}");
            for (la, lb) in ra.epoch_loss.iter().zip(&rb.epoch_loss) {
                assert!((la - lb - HALF_LN_2PI).abs() <= 1e-12);
            }
        }
    }
}
