//! Univariate density estimation with a monotone network.
//!
//! The network output `y(x)` is a CDF estimate: every effective weight is
//! positive, hidden activations are increasing, the final node is a sigmoid,
//! and a positive skip path from the input to the final pre-activation makes
//! `y(±∞) = {1, 0}`. The density is `Φ(x) = dy/dx`, so `∫Φ = 1` holds by
//! construction and training minimizes the mean of `-ln dy/dx`.
//!
//! Parameter gradients are computed by reverse accumulation over a forward
//! pass that carries `(value, d value / dx)` for every unit.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{Activation, TrainConfig};
use crate::data::{mean_std, Dataset};
use crate::error::{Error, Result};
use crate::numeric::{
    quadrature, seeded_rng, sgd_step, sigmoid, softplus, softplus_inv, streams, Dual, KahanSum,
    OptimizerState, Real, Rng,
};
use crate::report::RunReport;
use crate::verify::VerificationRecord;

/// Effective weights are `softplus(free) + WEIGHT_FLOOR`.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Densities at or below this are treated as underflow.
pub const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardize {
    pub mean: f64,
    pub std: f64,
}

impl Standardize {
    pub const IDENTITY: Standardize = Standardize {
        mean: 0.0,
        std: 1.0,
    };

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, u: f64) -> f64 {
        u * self.std + self.mean
    }
}

fn act<T: Real>(kind: Activation, a: T) -> T {
    match kind {
        Activation::Sigmoid => a.sigmoid(),
        Activation::Tanh => a.tanh(),
        Activation::Softplus => a.softplus(),
    }
}

/// `(f(a), f'(a), f''(a))`
fn act_derivs(kind: Activation, a: f64) -> (f64, f64, f64) {
    match kind {
        Activation::Sigmoid => {
            let s = sigmoid(a);
            let d = s * (1.0 - s);
            (s, d, d * (1.0 - 2.0 * s))
        }
        Activation::Tanh => {
            let t = a.tanh();
            let d = 1.0 - t * t;
            (t, d, -2.0 * t * d)
        }
        Activation::Softplus => {
            let s = sigmoid(a);
            (softplus(a), s, s * (1.0 - s))
        }
    }
}

fn activation_center(kind: Activation) -> f64 {
    match kind {
        Activation::Sigmoid => 0.5,
        Activation::Tanh => 0.0,
        Activation::Softplus => 0.7,
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PositiveLayer {
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out x n_in` free weights.
    free: Vec<f64>,
    bias: Vec<f64>,
}

impl PositiveLayer {
    fn weights(&self) -> Vec<f64> {
        self.free
            .iter()
            .map(|f| softplus(*f) + WEIGHT_FLOOR)
            .collect()
    }
}

/// Monotone feed-forward network `x -> y(x) ∈ (0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotoneNet {
    widths: Vec<usize>,
    layers: Vec<PositiveLayer>,
    activation: Activation,
    skip_free: f64,
    standardize: Standardize,
}

/// Per-sample loss and the pre-activation pair it was built from.
struct Pass {
    /// `ln dy/du` in standardized units.
    log_density: f64,
    clamped: bool,
}

/// Per-sample forward state kept for the backward pass.
struct Tape {
    /// Inputs of each layer: values and input-derivatives.
    z: Vec<Vec<f64>>,
    dz: Vec<Vec<f64>>,
    /// Hidden pre-activations and their input-derivatives.
    a: Vec<Vec<f64>>,
    da: Vec<Vec<f64>>,
    s: f64,
    ds: f64,
}

impl MonotoneNet {
    /// Random initialization with hidden `hidden` widths.
    pub fn new(
        hidden: &[usize],
        activation: Activation,
        standardize: Standardize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if !(standardize.std > 0.0) {
            return Err(Error::invalid("standardization scale must be positive"));
        }
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let center = activation_center(activation);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, w) in widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let mut free = Vec::with_capacity(n_in * n_out);
            let mut bias = Vec::with_capacity(n_out);
            for _ in 0..n_out {
                let row: Vec<f64> = if l == 0 {
                    vec![rng.random_range(0.7..3.0)]
                } else {
                    (0..n_in)
                        .map(|_| rng.random_range(0.5..1.5) * 2.0 / n_in as f64)
                        .collect()
                };
                let b = if l == 0 {
                    -row[0] * rng.random_range(-2.5..2.5)
                } else {
                    -center * row.iter().sum::<f64>() + rng.random_range(-0.5..0.5)
                };
                free.extend(row.iter().map(|p| softplus_inv(*p)));
                bias.push(b);
            }
            layers.push(PositiveLayer {
                n_in,
                n_out,
                free,
                bias,
            });
        }
        Ok(MonotoneNet {
            widths,
            layers,
            activation,
            skip_free: softplus_inv(0.5),
            standardize,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn standardize(&self) -> Standardize {
        self.standardize
    }

    pub fn skip_gain(&self) -> f64 {
        softplus(self.skip_free) + WEIGHT_FLOOR
    }

    /// Smallest effective weight (including the skip gain).
    pub fn min_effective_weight(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights())
            .fold(self.skip_gain(), f64::min)
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.free.len() + l.bias.len())
            .sum::<usize>()
            + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(&l.free);
            p.extend_from_slice(&l.bias);
        }
        p.push(self.skip_free);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                got: p.len(),
            });
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nf = l.free.len();
            l.free.copy_from_slice(&p[k..k + nf]);
            k += nf;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
        self.skip_free = p[k];
        Ok(())
    }

    /// `y(x)` for any scalar type; standardization is applied inside.
    pub fn cdf_generic<T: Real>(&self, x: T) -> T {
        let u = (x - T::cst(self.standardize.mean)).scale(1.0 / self.standardize.std);
        let mut z = vec![u];
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let w = l.weights();
            let mut out = Vec::with_capacity(l.n_out);
            for i in 0..l.n_out {
                let mut a = T::cst(l.bias[i]);
                for (j, zj) in z.iter().enumerate() {
                    a = a + zj.scale(w[i * l.n_in + j]);
                }
                out.push(if li == last {
                    a + u.scale(self.skip_gain())
                } else {
                    act(self.activation, a)
                });
            }
            z = out;
        }
        z[0].sigmoid()
    }

    /// `(y(x), dy/dx)` from one dual-number forward pass.
    pub fn forward_cdf(&self, x: f64) -> Result<(f64, f64)> {
        if !x.is_finite() {
            return Err(Error::Domain {
                what: "x".into(),
                value: x,
            });
        }
        crate::numeric::dual_forward(|d: Dual| self.cdf_generic(d), x)
    }

    fn forward_tape(&self, u: f64, weights: &[Vec<f64>]) -> Tape {
        let n_layers = self.layers.len();
        let mut tape = Tape {
            z: Vec::with_capacity(n_layers),
            dz: Vec::with_capacity(n_layers),
            a: Vec::with_capacity(n_layers - 1),
            da: Vec::with_capacity(n_layers - 1),
            s: 0.0,
            ds: 0.0,
        };
        let mut z = vec![u];
        let mut dz = vec![1.0];
        for (li, l) in self.layers.iter().enumerate() {
            let w = &weights[li];
            let mut a = l.bias.clone();
            let mut da = vec![0.0; l.n_out];
            for i in 0..l.n_out {
                let row = &w[i * l.n_in..(i + 1) * l.n_in];
                let mut acc = 0.0;
                let mut dacc = 0.0;
                for j in 0..l.n_in {
                    acc += row[j] * z[j];
                    dacc += row[j] * dz[j];
                }
                a[i] += acc;
                da[i] = dacc;
            }
            tape.z.push(std::mem::take(&mut z));
            tape.dz.push(std::mem::take(&mut dz));
            if li + 1 == n_layers {
                let g = self.skip_gain();
                tape.s = a[0] + g * u;
                tape.ds = da[0] + g;
            } else {
                z = Vec::with_capacity(l.n_out);
                dz = Vec::with_capacity(l.n_out);
                for i in 0..l.n_out {
                    let (f, f1, _) = act_derivs(self.activation, a[i]);
                    z.push(f);
                    dz.push(f1 * da[i]);
                }
                tape.a.push(a);
                tape.da.push(da);
            }
        }
        tape
    }

    fn log_density_of(s: f64, ds: f64) -> Pass {
        // ln σ'(s) = -softplus(-s) - softplus(s)
        let log_density = -softplus(-s) - softplus(s) + ds.ln();
        if log_density <= DENSITY_FLOOR.ln() || !log_density.is_finite() {
            Pass {
                log_density: DENSITY_FLOOR.ln(),
                clamped: true,
            }
        } else {
            Pass {
                log_density,
                clamped: false,
            }
        }
    }

    /// `ln Φ(x)` in the data's units.
    pub fn log_density(&self, x: f64) -> Result<f64> {
        let weights: Vec<Vec<f64>> = self.layers.iter().map(|l| l.weights()).collect();
        let tape = self.forward_tape(self.standardize.apply(x), &weights);
        let pass = Self::log_density_of(tape.s, tape.ds);
        if pass.clamped {
            return Err(Error::Underflow {
                value: (-softplus(-tape.s) - softplus(tape.s)).exp() * tape.ds,
            });
        }
        Ok(pass.log_density - self.standardize.std.ln())
    }

    /// Mean loss over standardized samples and its parameter gradient.
    /// Returns `(loss, grad, clamps)`.
    fn loss_and_grad(&self, us: &[f64], want_grad: bool) -> (f64, Vec<f64>, u64) {
        let weights: Vec<Vec<f64>> = self.layers.iter().map(|l| l.weights()).collect();
        let mut grad_w: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![0.0; l.free.len()])
            .collect();
        let mut grad_b: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![0.0; l.bias.len()])
            .collect();
        let mut grad_skip = 0.0;
        let mut loss = KahanSum::new();
        let mut clamps = 0;
        let n_layers = self.layers.len();

        for &u in us {
            let tape = self.forward_tape(u, &weights);
            let pass = Self::log_density_of(tape.s, tape.ds);
            loss.add(-pass.log_density);
            if pass.clamped {
                clamps += 1;
                continue;
            }
            if !want_grad {
                continue;
            }
            // L = softplus(-s) + softplus(s) - ln(ds)
            let mut s_bar = vec![2.0 * sigmoid(tape.s) - 1.0];
            let mut ds_bar = vec![-1.0 / tape.ds];
            grad_skip += s_bar[0] * u + ds_bar[0];

            for li in (0..n_layers).rev() {
                let l = &self.layers[li];
                let w = &weights[li];
                let z = &tape.z[li];
                let dz = &tape.dz[li];
                let mut z_bar = vec![0.0; l.n_in];
                let mut dz_bar = vec![0.0; l.n_in];
                for i in 0..l.n_out {
                    let (ab, dab) = (s_bar[i], ds_bar[i]);
                    grad_b[li][i] += ab;
                    let row = i * l.n_in;
                    for j in 0..l.n_in {
                        grad_w[li][row + j] += ab * z[j] + dab * dz[j];
                        z_bar[j] += w[row + j] * ab;
                        dz_bar[j] += w[row + j] * dab;
                    }
                }
                if li == 0 {
                    break;
                }
                // through z = f(a), dz = f'(a) da of the previous hidden layer
                let a = &tape.a[li - 1];
                let da = &tape.da[li - 1];
                s_bar = Vec::with_capacity(a.len());
                ds_bar = Vec::with_capacity(a.len());
                for k in 0..a.len() {
                    let (_, f1, f2) = act_derivs(self.activation, a[k]);
                    s_bar.push(z_bar[k] * f1 + dz_bar[k] * f2 * da[k]);
                    ds_bar.push(dz_bar[k] * f1);
                }
            }
        }

        let n = us.len() as f64;
        let mut grad = Vec::with_capacity(self.n_params());
        if want_grad {
            for (li, l) in self.layers.iter().enumerate() {
                grad.extend(
                    grad_w[li]
                        .iter()
                        .zip(&l.free)
                        .map(|(gw, f)| gw * sigmoid(*f) / n),
                );
                grad.extend(grad_b[li].iter().map(|gb| gb / n));
            }
            grad.push(grad_skip * sigmoid(self.skip_free) / n);
        }
        (loss.total() / n, grad, clamps)
    }

    /// Mean `-ln Φ(x)` over raw samples (data units) and its gradient.
    pub fn mean_nll_and_grad(&self, xs: &[f64]) -> (f64, Vec<f64>) {
        let us: Vec<f64> = xs.iter().map(|x| self.standardize.apply(*x)).collect();
        let (l, g, _) = self.loss_and_grad(&us, true);
        (l + self.standardize.std.ln(), g)
    }

    pub fn mean_nll(&self, xs: &[f64]) -> f64 {
        let us: Vec<f64> = xs.iter().map(|x| self.standardize.apply(*x)).collect();
        self.loss_and_grad(&us, false).0 + self.standardize.std.ln()
    }

    /// Inverse-CDF sampling by bisection.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let target: f64 = rng.random_range(1e-9..1.0 - 1e-9);
            let (mut lo, mut hi) = (-1.0, 1.0);
            while self.cdf_generic(self.standardize.invert(lo)) > target {
                lo *= 2.0;
                if lo < -1e6 {
                    return Err(Error::NonFinite {
                        op: "sample".into(),
                    });
                }
            }
            while self.cdf_generic(self.standardize.invert(hi)) < target {
                hi *= 2.0;
                if hi > 1e6 {
                    return Err(Error::NonFinite {
                        op: "sample".into(),
                    });
                }
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if self.cdf_generic(self.standardize.invert(mid)) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            out.push(self.standardize.invert(0.5 * (lo + hi)));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> MonotoneCheckpoint {
        MonotoneCheckpoint {
            widths: self.widths.clone(),
            free_weights: self.layers.iter().flat_map(|l| l.free.clone()).collect(),
            biases: self.layers.iter().flat_map(|l| l.bias.clone()).collect(),
            activation: self.activation,
            skip_gain: self.skip_free,
            standardize: self.standardize,
        }
    }

    pub fn from_checkpoint(c: &MonotoneCheckpoint) -> Result<Self> {
        if c.widths.len() < 2 || c.widths[0] != 1 || *c.widths.last().unwrap() != 1 {
            return Err(Error::invalid("widths must start and end with 1"));
        }
        if c.widths.contains(&0) || !(c.standardize.std > 0.0) {
            return Err(Error::invalid("bad widths or standardization"));
        }
        let mut layers = Vec::new();
        let (mut kw, mut kb) = (0, 0);
        for w in c.widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let free = c
                .free_weights
                .get(kw..kw + n_in * n_out)
                .ok_or(Error::Shape {
                    expected: kw + n_in * n_out,
                    got: c.free_weights.len(),
                })?
                .to_vec();
            let bias = c
                .biases
                .get(kb..kb + n_out)
                .ok_or(Error::Shape {
                    expected: kb + n_out,
                    got: c.biases.len(),
                })?
                .to_vec();
            kw += n_in * n_out;
            kb += n_out;
            layers.push(PositiveLayer {
                n_in,
                n_out,
                free,
                bias,
            });
        }
        if kw != c.free_weights.len() || kb != c.biases.len() {
            return Err(Error::invalid("checkpoint has trailing parameters"));
        }
        Ok(MonotoneNet {
            widths: c.widths.clone(),
            layers,
            activation: c.activation,
            skip_free: c.skip_gain,
            standardize: c.standardize,
        })
    }
}

/// On-disk form of a [`MonotoneNet`]. `skip_gain` holds the free parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonotoneCheckpoint {
    pub widths: Vec<usize>,
    pub free_weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
    pub skip_gain: f64,
    pub standardize: Standardize,
}

/// `-ln Φ(x)`; fails when `Φ(x)` underflows the floor.
pub fn nll_1d(net: &MonotoneNet, x: f64) -> Result<f64> {
    Ok(-net.log_density(x)?)
}

/// `-ln(dydx)` for an externally supplied derivative.
pub fn nll_from_derivative(dydx: f64) -> Result<f64> {
    if !(dydx > DENSITY_FLOOR) {
        return Err(Error::Underflow { value: dydx });
    }
    Ok(-dydx.ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate1D {
    pub grid: Vec<f64>,
    pub phi: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl DensityEstimate1D {
    /// CSV with header `x,phi,cdf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,phi,cdf\n");
        for i in 0..self.grid.len() {
            s.push_str(&format!(
                "{},{},{}\n",
                self.grid[i], self.phi[i], self.cdf[i]
            ));
        }
        s
    }
}

pub fn density_grid(
    net: &MonotoneNet,
    x_min: f64,
    x_max: f64,
    n_points: usize,
) -> Result<DensityEstimate1D> {
    if !(x_min < x_max) || n_points < 2 {
        return Err(Error::invalid(format!(
            "density grid needs x_min < x_max and >= 2 points, got [{x_min}, {x_max}] x {n_points}"
        )));
    }
    let grid = crate::verify::linspace(x_min, x_max, n_points);
    let mut phi = Vec::with_capacity(n_points);
    let mut cdf = Vec::with_capacity(n_points);
    for &x in &grid {
        let (y, d) = net.forward_cdf(x)?;
        cdf.push(y);
        phi.push(d);
    }
    Ok(DensityEstimate1D { grid, phi, cdf })
}

/// `y(hi) - y(lo)` and Simpson's `∫ dy/dx` over the same range.
pub fn normalization(net: &MonotoneNet, lo: f64, hi: f64) -> Result<(f64, f64)> {
    let (y_lo, _) = net.forward_cdf(lo)?;
    let (y_hi, _) = net.forward_cdf(hi)?;
    let integral = quadrature(
        |x| net.forward_cdf(x).map(|v| v.1).unwrap_or(f64::NAN),
        lo,
        hi,
        20_000,
    )?;
    Ok((y_hi - y_lo, integral))
}

fn select_column<'a>(data: &'a Dataset, config: &TrainConfig) -> Result<&'a [f64]> {
    let name = match config.columns.x.first() {
        Some(n) => n.clone(),
        None => data
            .numeric_names()
            .into_iter()
            .next()
            .ok_or(Error::EmptyData)?,
    };
    data.numeric(&name)
}

/// Trains a [`MonotoneNet`] on one numeric column by minibatch descent on the mean `-ln Φ`.
pub fn train_1d(data: &Dataset, config: &TrainConfig) -> Result<(MonotoneNet, RunReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let xs = select_column(data, config)?;
    train_1d_values(xs, config)
}

pub fn train_1d_values(xs: &[f64], config: &TrainConfig) -> Result<(MonotoneNet, RunReport)> {
    if xs.is_empty() {
        return Err(Error::EmptyData);
    }
    let (mean, std) = mean_std(xs);
    if !std.is_finite() || !mean.is_finite() {
        return Err(Error::NonFinite {
            op: "column standard deviation".into(),
        });
    }
    if !(std > 0.0) || xs.len() < 2 {
        return Err(Error::ZeroVariance {
            column: config
                .columns
                .x
                .first()
                .cloned()
                .unwrap_or_else(|| "x".into()),
        });
    }
    let standardize = Standardize { mean, std };
    let mut init_rng = seeded_rng(config.seed, streams::INIT);
    let mut shuffle_rng = seeded_rng(config.seed, streams::SHUFFLE);
    let mut net = MonotoneNet::new(
        &config.model.hidden,
        config.model.activation,
        standardize,
        &mut init_rng,
    )?;
    let (mut report, started) = RunReport::start("flow1d", config);

    let mut us: Vec<f64> = xs.iter().map(|x| standardize.apply(*x)).collect();
    let log_std = std.ln();
    report.initial_loss = net.loss_and_grad(&us, false).0 + log_std;

    let mut params = net.params();
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, params.len());
    let batch = if config.batch_size == 0 || config.batch_size >= us.len() {
        us.len()
    } else {
        config.batch_size
    };
    for epoch in 0..config.epochs {
        if batch < us.len() {
            us.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = KahanSum::new();
        for chunk in us.chunks(batch) {
            let (loss, grad, clamps) = net.loss_and_grad(chunk, true);
            report.clamp_count += clamps;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss.add(loss * chunk.len() as f64);
            sgd_step(&mut params, &grad, &mut opt).map_err(|_| Error::Diverged { epoch })?;
            net.set_params(&params)?;
        }
        report.record_epoch(epoch_loss.total() / us.len() as f64 + log_std);
    }

    let (lo, hi) = (mean - 10.0 * std, mean + 10.0 * std);
    let (mass, integral) = normalization(&net, lo, hi)?;
    report.checks.push(VerificationRecord::within(
        "flow1d.normalization",
        "y(mu+10sd) - y(mu-10sd)",
        mass,
        config.tolerance_or("flow1d.normalization.lo", 0.99),
        1.0,
    ));
    report.checks.push(VerificationRecord::at_most(
        "flow1d.fundamental_theorem",
        "|quadrature - cdf difference|",
        (integral - mass).abs(),
        config.tolerance_or("flow1d.fundamental_theorem", 1e-6),
    ));
    report.checks.push(VerificationRecord::at_most(
        "flow1d.clamps",
        "underflow clamps",
        report.clamp_count as f64,
        0.0,
    ));
    report.finish(started);
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, gradient_rel_error};

    fn small_net(seed: u64, activation: Activation) -> MonotoneNet {
        let mut rng = seeded_rng(seed, 0);
        MonotoneNet::new(
            &[8, 8],
            activation,
            Standardize {
                mean: 0.3,
                std: 1.7,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn monotone_at_initialization() {
        let net = small_net(1, Activation::Sigmoid);
        let (y1, d1) = net.forward_cdf(-0.4).unwrap();
        let (y2, _) = net.forward_cdf(0.9).unwrap();
        assert!(y1 < y2);
        assert!(d1 > 0.0);
        assert!(y1 > 0.0 && y2 < 1.0);
    }

    #[test]
    fn dual_derivative_matches_finite_difference() {
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Softplus] {
            let net = small_net(2, act);
            let mut rng = seeded_rng(3, 0);
            for _ in 0..100 {
                let x: f64 = rng.random_range(-5.0..5.0);
                let (_, d) = net.forward_cdf(x).unwrap();
                let h = 1e-5;
                let fd = (net.cdf_generic(x + h) - net.cdf_generic(x - h)) / (2.0 * h);
                assert!(
                    (d - fd).abs() / d.abs() <= 1e-5,
                    "{act:?} x={x}: {d} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn tape_log_density_matches_dual() {
        let net = small_net(4, Activation::Tanh);
        for x in [-3.0, -0.1, 0.0, 2.2] {
            let (_, d) = net.forward_cdf(x).unwrap();
            assert!((net.log_density(x).unwrap() - d.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturates_far_out() {
        for seed in 0..5 {
            let net = small_net(seed, Activation::Sigmoid);
            assert!(net.forward_cdf(-50.0).unwrap().0 < 1e-6);
            assert!(net.forward_cdf(50.0).unwrap().0 > 1.0 - 1e-6);
        }
    }

    #[test]
    fn nll_from_derivative_examples() {
        assert_eq!(nll_from_derivative(1.0).unwrap(), 0.0);
        assert!((nll_from_derivative(0.1).unwrap() - 10f64.ln()).abs() < 1e-15);
        assert!(matches!(
            nll_from_derivative(1e-301),
            Err(Error::Underflow { .. })
        ));
    }

    #[test]
    fn nll_underflows_far_in_the_tail() {
        let net = small_net(7, Activation::Sigmoid);
        assert!(matches!(nll_1d(&net, 1e6), Err(Error::Underflow { .. })));
    }

    #[test]
    fn parameter_gradient_matches_finite_difference() {
        for act in [Activation::Sigmoid, Activation::Tanh, Activation::Softplus] {
            let net = small_net(5, act);
            let mut rng = seeded_rng(6, 0);
            let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (_, grad) = net.mean_nll_and_grad(&xs);
            let p0 = net.params();
            let fd = finite_diff_gradient(
                |p| {
                    let mut m = net.clone();
                    m.set_params(p).unwrap();
                    m.mean_nll(&xs)
                },
                &p0,
                1e-5,
            );
            let err = gradient_rel_error(&grad, &fd, 1e-6);
            assert!(err <= 1e-4, "{act:?}: rel err {err}");
        }
    }

    #[test]
    fn density_grid_checks() {
        let net = small_net(8, Activation::Sigmoid);
        assert!(density_grid(&net, 1.0, -1.0, 10).is_err());
        assert!(density_grid(&net, -1.0, 1.0, 1).is_err());
        let d = density_grid(&net, -4.0, 4.0, 101).unwrap();
        assert!(d.cdf.windows(2).all(|w| w[1] > w[0]));
        assert!(d.to_csv().starts_with("x,phi,cdf\n"));
    }

    #[test]
    fn training_preconditions() {
        let cfg = TrainConfig::default();
        assert_eq!(
            train_1d(&Dataset::from_values(vec![]), &cfg).unwrap_err(),
            Error::EmptyData
        );
        assert!(matches!(
            train_1d(&Dataset::from_values(vec![2.0; 5]), &cfg),
            Err(Error::ZeroVariance { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = small_net(9, Activation::Softplus);
        let text = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back: MonotoneCheckpoint = serde_json::from_str(&text).unwrap();
        let net2 = MonotoneNet::from_checkpoint(&back).unwrap();
        assert_eq!(net, net2);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in [
            "widths",
            "free_weights",
            "biases",
            "activation",
            "skip_gain",
            "standardize",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
