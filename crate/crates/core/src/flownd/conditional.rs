//! Conditional triangular flow: density of targets `t` given inputs `x`.
//!
//! An unconstrained network maps the standardized `x` to additive shifts of
//! every unit pre-activation and every mixture logit of the flow over `t`.
//! The shifts do not depend on `t`, so for each fixed `x` the flow keeps its
//! triangular structure and integrates to one over `t`.

use serde::{Deserialize, Serialize};

use super::{
    check_permutation, select_columns, standardize_columns, FlowCheckpoint, FlowOutput,
    LocalLossTable, Prepared, Route, Tape, TriangularFlowNet,
};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow1d::{Standardize, DENSITY_FLOOR};
use crate::mlp::{Mlp, MlpCache};
use crate::numeric::{quadrature, seeded_rng, streams};
use crate::report::RunReport;
use crate::train::{minibatch_descent, BatchLoss};
use crate::verify::VerificationRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalFlowNet {
    flow: TriangularFlowNet,
    conditioner: Mlp,
    x_standardize: Vec<Standardize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionerCheckpoint {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
    pub x_standardize: Vec<Standardize>,
}

impl ConditionalFlowNet {
    pub fn new(
        flow: TriangularFlowNet,
        conditioner: Mlp,
        x_standardize: Vec<Standardize>,
    ) -> Result<Self> {
        conditioner.validate()?;
        if conditioner.n_inputs() != x_standardize.len() {
            return Err(Error::Shape {
                expected: x_standardize.len(),
                got: conditioner.n_inputs(),
            });
        }
        if conditioner.n_outputs() != flow.n_shifts() {
            return Err(Error::Shape {
                expected: flow.n_shifts(),
                got: conditioner.n_outputs(),
            });
        }
        Ok(ConditionalFlowNet {
            flow,
            conditioner,
            x_standardize,
        })
    }

    pub fn flow(&self) -> &TriangularFlowNet {
        &self.flow
    }

    pub fn n_inputs(&self) -> usize {
        self.x_standardize.len()
    }

    pub fn n_params(&self) -> usize {
        self.flow.n_params() + self.conditioner.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.flow.params();
        p.extend_from_slice(&self.conditioner.params);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                got: p.len(),
            });
        }
        let k = self.flow.n_params();
        self.flow.set_params(&p[..k])?;
        self.conditioner.params.copy_from_slice(&p[k..]);
        Ok(())
    }

    fn x_internal(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_inputs() {
            return Err(Error::Shape {
                expected: self.n_inputs(),
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
            .zip(&self.x_standardize)
            .map(|(v, s)| s.apply(*v))
            .collect())
    }

    /// Conditioning shifts for input `x`.
    pub fn shifts(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.conditioner.forward(&self.x_internal(x)?))
    }

    pub fn forward_flow(&self, x: &[f64], t: &[f64]) -> Result<FlowOutput> {
        let s = self.shifts(x)?;
        self.flow.forward_flow_shifted(t, Some(&s))
    }

    /// Forward map in `t` with `x` fixed, for any scalar type.
    pub fn forward_generic<T: crate::numeric::Real>(&self, x: &[f64], t: &[T]) -> Result<Vec<T>> {
        let s = self.shifts(x)?;
        Ok(self.flow.forward_generic(t, Some(&s)))
    }

    pub fn local_losses(&self, x: &[f64], t: &[f64]) -> Result<LocalLossTable> {
        super::table_from(&self.forward_flow(x, t)?)
    }

    /// `-ln Φ(t | x)`.
    pub fn nll(&self, x: &[f64], t: &[f64]) -> Result<f64> {
        Ok(self.local_losses(x, t)?.sum)
    }

    pub fn density(&self, x: &[f64], t: &[f64]) -> Result<f64> {
        Ok((-self.nll(x, t)?).exp())
    }

    pub fn mean_nll(&self, xs: &[Vec<f64>], ts: &[Vec<f64>]) -> Result<f64> {
        let mut s = 0.0;
        for (x, t) in xs.iter().zip(ts) {
            s += self.nll(x, t)?;
        }
        Ok(s / xs.len() as f64)
    }

    fn sample_pass(
        &self,
        x_std: &[f64],
        t_std: &[f64],
        prep: &Prepared,
        work: &mut Work,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        self.conditioner.forward_cached(x_std, &mut work.cache);
        let shifts = work.cache.output().to_vec();
        self.flow
            .forward_tape(t_std, Some(&shifts), prep, &mut work.tape);
        let loss = self.flow.sample_loss(&work.tape);
        if let Some(grad) = grad {
            let k = self.flow.n_params();
            work.shift_grad.clear();
            work.shift_grad.resize(shifts.len(), 0.0);
            let (g_flow, g_cond) = grad.split_at_mut(k);
            self.flow.backward(
                &work.tape,
                prep,
                Route::Global,
                g_flow,
                Some(&mut work.shift_grad),
            );
            self.conditioner
                .backward(&work.cache, &work.shift_grad, g_cond);
        }
        loss
    }

    /// Mean `-ln Φ(t | x)` and its gradient over all parameters.
    pub fn mean_nll_and_grad(&self, xs: &[Vec<f64>], ts: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let prep = self.flow.prepare();
        let mut work = Work::default();
        let mut grad = vec![0.0; self.n_params()];
        let mut total = 0.0;
        for (x, t) in xs.iter().zip(ts) {
            let xu = self.x_internal(x)?;
            let tu = self.flow.to_internal(t)?;
            total += self.sample_pass(&xu, &tu, &prep, &mut work, Some(&mut grad));
        }
        let k = 1.0 / xs.len() as f64;
        grad.iter_mut().for_each(|g| *g *= k);
        Ok((total * k, grad))
    }

    /// `E[t | x]` by Simpson quadrature of `t Φ(t | x)` over `[lo, hi]`; scalar targets only.
    pub fn conditional_mean(&self, x: &[f64], lo: f64, hi: f64, n_panels: usize) -> Result<f64> {
        self.scalar_target()?;
        quadrature(
            |t| t * self.density(x, &[t]).unwrap_or(0.0),
            lo,
            hi,
            n_panels,
        )
    }

    /// `∫ Φ(t | x) dt` over `[lo, hi]`; scalar targets only.
    pub fn conditional_mass(&self, x: &[f64], lo: f64, hi: f64, n_panels: usize) -> Result<f64> {
        self.scalar_target()?;
        quadrature(|t| self.density(x, &[t]).unwrap_or(0.0), lo, hi, n_panels)
    }

    fn scalar_target(&self) -> Result<()> {
        if self.flow.n() != 1 {
            return Err(Error::invalid("needs a scalar target"));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> FlowCheckpoint {
        let mut c = self.flow.to_checkpoint();
        c.conditioner = Some(ConditionerCheckpoint {
            sizes: self.conditioner.sizes.clone(),
            params: self.conditioner.params.clone(),
            x_standardize: self.x_standardize.clone(),
        });
        c
    }

    pub fn from_checkpoint(c: &FlowCheckpoint) -> Result<Self> {
        let cond = c
            .conditioner
            .as_ref()
            .ok_or_else(|| Error::invalid("checkpoint has no conditioner"))?;
        let flow = TriangularFlowNet::from_checkpoint(c)?;
        let mlp = Mlp {
            sizes: cond.sizes.clone(),
            params: cond.params.clone(),
        };
        Self::new(flow, mlp, cond.x_standardize.clone())
    }
}

#[derive(Default)]
struct Work {
    cache: MlpCache,
    tape: Tape,
    shift_grad: Vec<f64>,
}

/// Trains `Φ(t | x)` with `x = config.columns.x` and `t = config.columns.t`.
pub fn train_conditional(
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ConditionalFlowNet, RunReport)> {
    config.validate()?;
    if config.columns.x.is_empty() || config.columns.t.is_empty() {
        return Err(Error::invalid(
            "conditional flow needs non-empty columns.x and columns.t",
        ));
    }
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let x_names = select_columns(data, &config.columns.x)?;
    let t_names = select_columns(data, &config.columns.t)?;
    let xs = data.numeric_rows(&x_names)?;
    let ts = data.numeric_rows(&t_names)?;
    train_conditional_rows(&xs, &ts, &x_names, &t_names, config)
}

pub fn train_conditional_rows(
    xs: &[Vec<f64>],
    ts: &[Vec<f64>],
    x_names: &[String],
    t_names: &[String],
    config: &TrainConfig,
) -> Result<(ConditionalFlowNet, RunReport)> {
    if xs.is_empty() || xs.len() != ts.len() {
        return Err(Error::EmptyData);
    }
    let n = t_names.len();
    let perm = check_permutation(n, config.model.permutation.clone())?;
    let t_cols = standardize_columns(ts, t_names)?;
    let t_std = perm.iter().map(|&c| t_cols[c]).collect();
    let x_std = standardize_columns(xs, x_names)?;

    let mut rng = seeded_rng(config.seed, streams::INIT);
    let flow = TriangularFlowNet::new(
        n,
        config.model.depth,
        config.model.units,
        t_std,
        Some(perm),
        &mut rng,
    )?;
    let conditioner = Mlp::new(
        &[x_names.len(), config.model.cond_hidden, flow.n_shifts()],
        0.1,
        &mut rng,
    )?;
    let mut net = ConditionalFlowNet::new(flow, conditioner, x_std)?;

    let xu: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| net.x_internal(x))
        .collect::<Result<_>>()?;
    let tu: Vec<Vec<f64>> = ts
        .iter()
        .map(|t| net.flow.to_internal(t))
        .collect::<Result<_>>()?;
    let (mut report, started) = RunReport::start("flownd_conditional", config);
    let offset = net.flow.log_scale();
    report.initial_loss = net.mean_nll(xs, ts)?;

    let mut params = net.params();
    let mut work = Work::default();
    let ln_floor = DENSITY_FLOOR.ln();
    minibatch_descent(
        xs.len(),
        config,
        &mut params,
        &mut report,
        offset,
        |p, batch, grad| {
            net.set_params(p)?;
            let prep = net.flow.prepare();
            let mut loss_sum = 0.0;
            let mut clamps = 0;
            for &s in batch {
                loss_sum +=
                    net.sample_pass(&xu[s], &tu[s], &prep, &mut work, Some(&mut *grad)) - offset;
                clamps += net
                    .flow
                    .log_diag_of(&work.tape)
                    .iter()
                    .flatten()
                    .filter(|v| **v <= ln_floor)
                    .count() as u64;
            }
            Ok(BatchLoss { loss_sum, clamps })
        },
    )?;
    net.set_params(&params)?;

    if n == 1 {
        let s = net.flow.standardize()[0];
        let (lo, hi) = (s.mean - 10.0 * s.std, s.mean + 10.0 * s.std);
        let mut worst: f64 = 0.0;
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|a, b| xs[*a][0].total_cmp(&xs[*b][0]));
        for q in [0.05, 0.25, 0.5, 0.75, 0.95] {
            let x = &xs[order[((xs.len() - 1) as f64 * q) as usize]];
            let mass = net.conditional_mass(x, lo, hi, 4000)?;
            worst = worst.max((mass - 1.0).abs());
        }
        report.checks.push(VerificationRecord::at_most(
            "flownd.conditional_normalization",
            "max |mass - 1| over x quantiles",
            worst,
            config.tolerance_or("flownd.conditional_normalization", 1e-2),
        ));
    }
    report.checks.push(VerificationRecord::at_most(
        "flownd.clamps",
        "underflow clamps",
        report.clamp_count as f64,
        0.0,
    ));
    report.finish(started);
    Ok((net, report))
}
