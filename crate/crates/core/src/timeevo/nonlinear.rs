use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::linear::off_diagonal_matrix;
use super::{step_sizes, Rollout, Trajectory};
use crate::config::{TrainConfig, TrainMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{
    seeded_rng, sgd_step, sigmoid, simpson_nodes, softplus, standard_normal, streams, DenseMatrix,
    KahanSum, OptimizerState, Rng,
};
use crate::report::RunReport;
use crate::train::{minibatch_descent, BatchLoss};
use crate::verify::VerificationRecord;

/// Margin `δ`: data columns are mapped into `(δ, 1 - δ)`.
pub const INTERIOR_MARGIN: f64 = 1e-3;
/// Halvings the state guard may apply to one step.
pub const MAX_HALVINGS: u32 = 20;
/// Accepted substeps allowed within one step of size `dt`.
pub const MAX_SUBSTEPS: usize = 4096;
/// Added to `softplus` so θ₁, θ₂ stay strictly positive.
const THETA_FLOOR: f64 = 1e-12;

/// `b(a) = t0 - θ₁ ln a + θ₂ ln(1 - a) + Σ_k poly[k-1] P_k(2a - 1)` with
/// `θ₁ = softplus(t1_free)`, `θ₂ = softplus(t2_free)` and `P_k` the Legendre
/// polynomials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub t0: f64,
    pub t1_free: f64,
    pub t2_free: f64,
    pub poly: Vec<f64>,
}

/// Runs the Legendre recurrence at `u`, calling `f(k, P_k, P_k', P_k'')` for `k = 1..=degree`.
fn legendre(u: f64, degree: usize, mut f: impl FnMut(usize, f64, f64, f64)) {
    let (mut p0, mut p1) = (1.0, u);
    let (mut d0, mut d1) = (0.0, 1.0);
    let (mut e0, mut e1) = (0.0, 0.0);
    for k in 1..=degree {
        f(k, p1, d1, e1);
        let kf = k as f64;
        let p2 = ((2.0 * kf + 1.0) * u * p1 - kf * p0) / (kf + 1.0);
        let d2 = d0 + (2.0 * kf + 1.0) * p1;
        let e2 = e0 + (2.0 * kf + 1.0) * d1;
        (p0, p1, d0, d1, e0, e1) = (p1, p2, d1, d2, e1, e2);
    }
}

impl Boundary {
    pub fn new(t0: f64, t1_free: f64, t2_free: f64, poly: Vec<f64>) -> Self {
        Boundary {
            t0,
            t1_free,
            t2_free,
            poly,
        }
    }

    pub fn theta1(&self) -> f64 {
        softplus(self.t1_free) + THETA_FLOOR
    }

    pub fn theta2(&self) -> f64 {
        softplus(self.t2_free) + THETA_FLOOR
    }

    fn n_params(&self) -> usize {
        3 + self.poly.len()
    }

    /// Polynomial part and its first two derivatives in `a`.
    fn poly_terms(&self, a: f64) -> (f64, f64, f64) {
        let (mut v, mut d, mut e) = (0.0, 0.0, 0.0);
        legendre(2.0 * a - 1.0, self.poly.len(), |k, p, dp, ddp| {
            let c = self.poly[k - 1];
            v += c * p;
            d += c * dp;
            e += c * ddp;
        });
        (v, 2.0 * d, 4.0 * e)
    }

    pub fn value(&self, a: f64) -> f64 {
        self.t0 - self.theta1() * a.ln() + self.theta2() * (-a).ln_1p() + self.poly_terms(a).0
    }

    /// `b'(a)`.
    pub fn slope(&self, a: f64) -> f64 {
        -self.theta1() / a - self.theta2() / (1.0 - a) + self.poly_terms(a).1
    }

    /// `b''(a)`.
    pub fn curvature(&self, a: f64) -> f64 {
        self.theta1() / (a * a) - self.theta2() / ((1.0 - a) * (1.0 - a)) + self.poly_terms(a).2
    }

    /// Writes `∂b/∂p` and `∂b'/∂p` for the parameters `(t0, t1_free, t2_free, poly..)`.
    fn param_partials(&self, a: f64, db: &mut [f64], dslope: &mut [f64]) {
        let s1 = sigmoid(self.t1_free);
        let s2 = sigmoid(self.t2_free);
        db[0] = 1.0;
        dslope[0] = 0.0;
        db[1] = -a.ln() * s1;
        dslope[1] = -s1 / a;
        db[2] = (-a).ln_1p() * s2;
        dslope[2] = -s2 / (1.0 - a);
        legendre(2.0 * a - 1.0, self.poly.len(), |k, p, dp, _| {
            db[2 + k] = p;
            dslope[2 + k] = 2.0 * dp;
        });
    }
}

/// Affine map of a raw data column onto `(δ, 1 - δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub lo: f64,
    pub hi: f64,
}

impl ColumnScale {
    fn slope(&self) -> f64 {
        (1.0 - 2.0 * INTERIOR_MARGIN) / (self.hi - self.lo)
    }

    pub fn apply(&self, x: f64) -> f64 {
        INTERIOR_MARGIN + (x - self.lo) * self.slope()
    }
}

/// `da_i/dt = Σ_{j≠i} W_ij a_j + b_i(a_i)` on `(0, 1)^n`. The first `m`
/// nodes carry data, the rest are auxiliary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearTimeModel {
    pub n: usize,
    pub m: usize,
    /// Off-diagonal entries of `W`, row by row.
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub boundary: Vec<Boundary>,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    /// Raw-to-model maps of the data columns; empty when data is already in model units.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_scale: Vec<ColumnScale>,
}

/// Initial state `a(0) = (x, r)`; auxiliaries follow Uniform(0, 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputAssignment {
    pub m: usize,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
}

impl InputAssignment {
    pub fn new(x: Vec<f64>, r: Vec<f64>) -> Self {
        InputAssignment { m: x.len(), x, r }
    }

    /// Draws the `n - m` auxiliaries.
    pub fn sample(x: &[f64], n: usize, rng: &mut Rng) -> Result<Self> {
        if x.len() > n {
            return Err(Error::invalid(format!(
                "{} data nodes do not fit in {n} nodes",
                x.len()
            )));
        }
        let r = (x.len()..n).map(|_| uniform_open(rng)).collect();
        Ok(Self::new(x.to_vec(), r))
    }

    pub fn a0(&self) -> Vec<f64> {
        let mut a = self.x.clone();
        a.extend_from_slice(&self.r);
        a
    }
}

fn uniform_open(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Node with the most negative `b'`, reported when the substep budget runs out.
fn stiffest_node(model: &NonlinearTimeModel, a: &[f64]) -> usize {
    (0..model.n)
        .min_by(|&i, &j| {
            let (si, sj) = (model.boundary[i].slope(a[i]), model.boundary[j].slope(a[j]));
            si.total_cmp(&sj)
        })
        .unwrap_or(0)
}

enum StepFailure {
    LeftInterior(usize),
    Factor(usize),
}

impl NonlinearTimeModel {
    /// Zero weights, `t0 = 0`, zero polynomial and both boundary free
    /// parameters at `boundary_init`.
    pub fn new(
        n: usize,
        m: usize,
        horizon: f64,
        dt: f64,
        poly_degree: usize,
        boundary_init: f64,
    ) -> Result<Self> {
        let model = NonlinearTimeModel {
            n,
            m,
            w: vec![0.0; n * n.saturating_sub(1)],
            boundary: (0..n)
                .map(|_| Boundary::new(0.0, boundary_init, boundary_init, vec![0.0; poly_degree]))
                .collect(),
            horizon,
            dt,
            input_scale: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    /// [`NonlinearTimeModel::new`] with `W ~ N(0, w_scale²)` off the diagonal.
    pub fn random(
        n: usize,
        m: usize,
        horizon: f64,
        dt: f64,
        poly_degree: usize,
        boundary_init: f64,
        w_scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut model = Self::new(n, m, horizon, dt, poly_degree, boundary_init)?;
        for w in &mut model.w {
            *w = w_scale * standard_normal(rng);
        }
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m > self.n {
            return Err(Error::invalid(format!(
                "need 0 < m <= n, got m = {}, n = {}",
                self.m, self.n
            )));
        }
        if self.w.len() != self.n * (self.n - 1) {
            return Err(Error::Shape {
                expected: self.n * (self.n - 1),
                got: self.w.len(),
            });
        }
        if self.boundary.len() != self.n {
            return Err(Error::Shape {
                expected: self.n,
                got: self.boundary.len(),
            });
        }
        if !self.input_scale.is_empty() && self.input_scale.len() != self.m {
            return Err(Error::Shape {
                expected: self.m,
                got: self.input_scale.len(),
            });
        }
        for (what, v) in [("T", self.horizon), ("dt", self.dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain {
                    what: what.into(),
                    value: v,
                });
            }
        }
        if self.dt > self.horizon * (1.0 + 1e-12) {
            return Err(Error::invalid("dt must not exceed T"));
        }
        if self.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "time model parameters".into(),
            });
        }
        Ok(())
    }

    pub fn w_matrix(&self) -> DenseMatrix {
        off_diagonal_matrix(self.n, &self.w)
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.boundary.iter().map(Boundary::n_params).sum::<usize>()
    }

    /// `W` entries, then `(t0, t1_free, t2_free, poly..)` per node.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.w.clone();
        for b in &self.boundary {
            p.extend_from_slice(&[b.t0, b.t1_free, b.t2_free]);
            p.extend_from_slice(&b.poly);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                got: p.len(),
            });
        }
        let nw = self.w.len();
        self.w.copy_from_slice(&p[..nw]);
        let mut k = nw;
        for b in &mut self.boundary {
            b.t0 = p[k];
            b.t1_free = p[k + 1];
            b.t2_free = p[k + 2];
            let d = b.poly.len();
            b.poly.copy_from_slice(&p[k + 3..k + 3 + d]);
            k += 3 + d;
        }
        Ok(())
    }

    fn boundary_offsets(&self) -> Vec<usize> {
        let mut k = self.w.len();
        self.boundary
            .iter()
            .map(|b| {
                let o = k;
                k += b.n_params();
                o
            })
            .collect()
    }

    fn coupling(&self, i: usize, a: &[f64]) -> f64 {
        let n = self.n;
        let row = &self.w[i * (n - 1)..(i + 1) * (n - 1)];
        let mut s = 0.0;
        for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
            s += row[k] * a[j];
        }
        s
    }

    fn try_step(
        &self,
        a: &[f64],
        h: f64,
    ) -> std::result::Result<(Vec<f64>, Vec<f64>), StepFailure> {
        let mut next = Vec::with_capacity(self.n);
        let mut slopes = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let b = &self.boundary[i];
            let s = b.slope(a[i]);
            if !(1.0 + s * h > 0.0) {
                return Err(StepFailure::Factor(i));
            }
            let v = a[i] + h * (self.coupling(i, a) + b.value(a[i]));
            if !(v > 0.0 && v < 1.0) {
                return Err(StepFailure::LeftInterior(i));
            }
            next.push(v);
            slopes.push(s);
        }
        Ok((next, slopes))
    }

    /// Advances `a` over `[t, t + span]`. A rejected substep is halved; after
    /// an accepted substep the size doubles again when the position allows.
    /// Substeps are exact dyadic fractions of `span`.
    fn advance(&self, a: &mut Vec<f64>, t: f64, span: f64, traj: &mut Trajectory) -> Result<()> {
        let mut level = 0u32;
        let mut pos = 0u64;
        let mut substeps = 0usize;
        while pos < 1u64 << level {
            let h = span / (1u64 << level) as f64;
            match self.try_step(a, h) {
                Ok((next, slopes)) => {
                    pos += 1;
                    substeps += 1;
                    traj.times
                        .push(t + span * pos as f64 / (1u64 << level) as f64);
                    traj.steps.push(h);
                    traj.slopes.push(slopes);
                    traj.states.push(next.clone());
                    *a = next;
                    if level > 0 && pos.is_multiple_of(2) {
                        level -= 1;
                        pos /= 2;
                    }
                    if substeps > MAX_SUBSTEPS && pos < 1u64 << level {
                        return Err(Error::Stiffness {
                            node: stiffest_node(self, a),
                            time: *traj.times.last().unwrap(),
                            halvings: level,
                        });
                    }
                }
                Err(StepFailure::LeftInterior(node) | StepFailure::Factor(node)) => {
                    if level >= MAX_HALVINGS {
                        return Err(Error::Stiffness {
                            node,
                            time: t + span * pos as f64 / (1u64 << level) as f64,
                            halvings: level,
                        });
                    }
                    traj.halvings += 1;
                    level += 1;
                    pos *= 2;
                }
            }
        }
        Ok(())
    }

    fn check_initial(&self, a0: &[f64]) -> Result<()> {
        if a0.len() != self.n {
            return Err(Error::Shape {
                expected: self.n,
                got: a0.len(),
            });
        }
        if let Some((i, v)) = a0
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && **v < 1.0))
        {
            return Err(Error::Domain {
                what: format!("a0[{i}]"),
                value: *v,
            });
        }
        Ok(())
    }

    pub fn rollout(&self, a0: &[f64]) -> Result<Trajectory> {
        self.check_initial(a0)?;
        let mut traj = Trajectory::start(a0);
        let mut a = a0.to_vec();
        let mut t = 0.0;
        for h in step_sizes(self.horizon, self.dt) {
            self.advance(&mut a, t, h, &mut traj)?;
            t += h;
        }
        Ok(traj)
    }

    /// Discrete `-ln Φ(a0)` of one rollout, adding its gradient to `grad` when given.
    pub fn sample_loss(&self, a0: &[f64], grad: Option<&mut [f64]>) -> Result<(f64, Trajectory)> {
        let traj = self.rollout(a0)?;
        let loss = nonlinear_nll(&traj, self)?.discrete;
        if let Some(grad) = grad {
            self.backward(&traj, grad);
        }
        Ok((loss, traj))
    }

    /// Adjoint pass through the accepted Euler steps. Step sizes chosen by
    /// the guard are treated as constants.
    fn backward(&self, traj: &Trajectory, grad: &mut [f64]) {
        let n = self.n;
        let offsets = self.boundary_offsets();
        let max_p = self
            .boundary
            .iter()
            .map(Boundary::n_params)
            .max()
            .unwrap_or(3);
        let (mut db, mut dslope) = (vec![0.0; max_p], vec![0.0; max_p]);
        let mut lambda = vec![0.0; n];
        let mut next = vec![0.0; n];
        for k in (0..traj.steps.len()).rev() {
            let a = &traj.states[k];
            let h = traj.steps[k];
            for i in 0..n {
                let b = &self.boundary[i];
                let s = traj.slopes[k][i];
                let f = 1.0 + s * h;
                let row = i * (n - 1);
                for (q, j) in (0..n).filter(|&j| j != i).enumerate() {
                    grad[row + q] += lambda[i] * h * a[j];
                }
                let np = b.n_params();
                b.param_partials(a[i], &mut db[..np], &mut dslope[..np]);
                for p in 0..np {
                    grad[offsets[i] + p] += lambda[i] * h * db[p] - h / f * dslope[p];
                }
                next[i] = -h * b.curvature(a[i]) / f + lambda[i] * f;
            }
            for j in 0..n {
                let row = j * (n - 1);
                for (q, i) in (0..n).filter(|&i| i != j).enumerate() {
                    next[i] += h * lambda[j] * self.w[row + q];
                }
            }
            std::mem::swap(&mut lambda, &mut next);
        }
    }

    /// Maps raw data values into model units.
    pub fn to_model_units(&self, x: &[f64]) -> Vec<f64> {
        if self.input_scale.is_empty() {
            return x.to_vec();
        }
        x.iter()
            .zip(&self.input_scale)
            .map(|(v, s)| s.apply(*v))
            .collect()
    }

    /// `|d(model units)/d(raw units)|`.
    pub fn unit_jacobian(&self) -> f64 {
        self.input_scale.iter().map(ColumnScale::slope).product()
    }

    /// Mean discrete loss with one auxiliary draw per sample from `rng`.
    pub fn mean_nll(&self, xs: &[Vec<f64>], rng: &mut Rng) -> Result<f64> {
        let mut s = KahanSum::new();
        for (i, x) in xs.iter().enumerate() {
            let a0 = InputAssignment::sample(x, self.n, rng)?.a0();
            s.add(self.sample_loss(&a0, None).map_err(|e| e.at_sample(i))?.0);
        }
        Ok(s.total() / xs.len() as f64)
    }
}

/// Guarded explicit Euler rollout from the assignment's initial state.
pub fn evolve_nonlinear(
    model: &NonlinearTimeModel,
    assignment: &InputAssignment,
) -> Result<Trajectory> {
    model.validate()?;
    if assignment.m != model.m || assignment.x.len() != model.m {
        return Err(Error::Shape {
            expected: model.m,
            got: assignment.x.len(),
        });
    }
    model.rollout(&assignment.a0())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearNll {
    /// `-Σ_t Σ_i ln(1 + b_i'(a_i(t)) dt_t)`.
    pub discrete: f64,
    /// `Σ_t Σ_i L_i(t) dt_t`, the step-sum of `-∫ b_i' dt`.
    pub continuum: f64,
    /// `L_i(t) = -b_i'(a_i(t))` per accepted step and node.
    pub local: Vec<Vec<f64>>,
}

/// Loss forms of a rollout from its stored diagonal terms.
pub fn nonlinear_nll(traj: &Trajectory, model: &NonlinearTimeModel) -> Result<NonlinearNll> {
    if traj.slopes.len() != traj.steps.len() {
        return Err(Error::Shape {
            expected: traj.steps.len(),
            got: traj.slopes.len(),
        });
    }
    let mut discrete = KahanSum::new();
    let mut continuum = KahanSum::new();
    let mut local = Vec::with_capacity(traj.steps.len());
    for (k, (slopes, h)) in traj.slopes.iter().zip(&traj.steps).enumerate() {
        if slopes.len() != model.n {
            return Err(Error::Shape {
                expected: model.n,
                got: slopes.len(),
            });
        }
        let row: Vec<f64> = slopes.iter().map(|s| -s).collect();
        for (i, s) in slopes.iter().enumerate() {
            let factor = 1.0 + s * h;
            if !(factor > 0.0) {
                return Err(Error::StepSize {
                    node: i,
                    time: traj.times[k],
                    factor,
                });
            }
            discrete.add(-factor.ln());
        }
        for l in &row {
            continuum.add(l * h);
        }
        local.push(row);
    }
    Ok(NonlinearNll {
        discrete: discrete.total(),
        continuum: continuum.total(),
        local,
    })
}

/// `P(x)` at raw points `xs` (length-`m` vectors): the mean over `n_mc`
/// Uniform(0, 1) auxiliary draws of `Φ(x, r)`, times the unit Jacobian.
/// With `m = n` a single deterministic evaluation is used.
pub fn recover_input_density(
    model: &NonlinearTimeModel,
    xs: &[Vec<f64>],
    n_mc: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    model.validate()?;
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be positive"));
    }
    let draws = if model.m == model.n { 1 } else { n_mc };
    let jac = model.unit_jacobian();
    xs.iter()
        .map(|x| {
            if x.len() != model.m {
                return Err(Error::Shape {
                    expected: model.m,
                    got: x.len(),
                });
            }
            let u = model.to_model_units(x);
            if u.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                return Ok(0.0);
            }
            let mut s = KahanSum::new();
            for _ in 0..draws {
                let a0 = InputAssignment::sample(&u, model.n, rng)?.a0();
                s.add((-model.sample_loss(&a0, None)?.0).exp());
            }
            Ok(s.total() / draws as f64 * jac)
        })
        .collect()
}

fn column_scale(name: &str, values: &[f64]) -> Result<ColumnScale> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo >= 0.0 && hi <= 1.0 {
        return Ok(ColumnScale { lo: 0.0, hi: 1.0 });
    }
    if !(hi - lo).is_finite() {
        return Err(Error::NonFinite {
            op: format!("range of column {name}"),
        });
    }
    if hi <= lo {
        return Err(Error::ZeroVariance {
            column: name.to_string(),
        });
    }
    Ok(ColumnScale { lo, hi })
}

/// Fits a nonlinear time model to columns `config.columns.x` (all numeric
/// columns when empty). Columns already inside `[0, 1]` use the fixed map
/// `x -> δ + (1 - 2δ) x`; others are min-max scaled.
pub fn train_time_model(
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(NonlinearTimeModel, RunReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let names = if config.columns.x.is_empty() {
        data.numeric_names()
    } else {
        config.columns.x.clone()
    };
    let m = names.len();
    let n = config.model.nodes.unwrap_or(2 * m);
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "need 0 < m <= n, got m = {m}, n = {n}"
        )));
    }
    let mut scales = Vec::with_capacity(m);
    for name in &names {
        let col = data.numeric(name)?;
        if let Some((i, v)) = col.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain {
                what: name.clone(),
                value: *v,
            }
            .at_sample(i));
        }
        scales.push(column_scale(name, col)?);
    }
    let raw = data.numeric_rows(&names)?;

    let mc = &config.model;
    let mut init_rng = seeded_rng(config.seed, streams::INIT);
    let mut model = NonlinearTimeModel::random(
        n,
        m,
        mc.horizon,
        mc.dt,
        mc.poly_degree,
        mc.boundary_init,
        0.1,
        &mut init_rng,
    )?;
    model.input_scale = scales;
    let xs: Vec<Vec<f64>> = raw.iter().map(|x| model.to_model_units(x)).collect();

    let (mut report, started) = RunReport::start("time_evolution", config);
    report.initial_loss = model.mean_nll(&xs, &mut seeded_rng(config.seed, streams::SAMPLING))?;
    let mut params = model.params();
    match mc.mode {
        TrainMode::Global => {
            let mut aux = seeded_rng(config.seed, streams::AUXILIARY);
            let mut halvings = 0u64;
            minibatch_descent(
                xs.len(),
                config,
                &mut params,
                &mut report,
                0.0,
                |p, batch, grad| {
                    model.set_params(p)?;
                    let mut loss_sum = 0.0;
                    for &s in batch {
                        let a0 = InputAssignment::sample(&xs[s], n, &mut aux)?.a0();
                        let (l, traj) = model
                            .sample_loss(&a0, Some(&mut *grad))
                            .map_err(|e| e.at_sample(s))?;
                        halvings += traj.halvings;
                        loss_sum += l;
                    }
                    Ok(BatchLoss {
                        loss_sum,
                        clamps: 0,
                    })
                },
            )?;
            report.guard_count = halvings;
        }
        TrainMode::SequentialLocal => {
            sequential_local(&mut model, &xs, config, &mut params, &mut report)?;
        }
        TrainMode::Local => {
            return Err(Error::invalid(
                "time models train in `global` or `sequential_local` mode",
            ))
        }
    }
    model.set_params(&params)?;
    report.final_nll_check(&model, &xs, config)?;
    report.finish(started);
    Ok((model, report))
}

/// Moves a batch of states through each time slice and steps the optimizer
/// after every slice on that slice's localized terms `-ln(1 + b_i' dt)`.
///
/// Each node differentiates its own term through eligibility traces
/// `∂a_i/∂(incoming W_i·, θ_i)` carried forward in time; sensitivities
/// through other nodes are dropped, so no quantity flows backwards in time
/// or between nodes.
fn sequential_local(
    model: &mut NonlinearTimeModel,
    xs: &[Vec<f64>],
    config: &TrainConfig,
    params: &mut [f64],
    report: &mut RunReport,
) -> Result<()> {
    use rand::seq::SliceRandom;

    let n = model.n;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut shuffle = seeded_rng(config.seed, streams::SHUFFLE);
    let mut aux = seeded_rng(config.seed, streams::AUXILIARY);
    let size = if config.batch_size == 0 || config.batch_size >= xs.len() {
        xs.len()
    } else {
        config.batch_size
    };
    let slices = step_sizes(model.horizon, model.dt);
    // One optimizer step per slice; the rate is split across slices so a
    // batch moves the parameters about as far as one global step.
    let rate = config.learning_rate / slices.len() as f64;
    let mut opt = OptimizerState::new(config.optimizer, rate, params.len());
    let mut grad = vec![0.0; params.len()];
    let offsets = model.boundary_offsets();
    let own: Vec<usize> = model
        .boundary
        .iter()
        .map(|b| n - 1 + b.n_params())
        .collect();
    let max_p = model
        .boundary
        .iter()
        .map(Boundary::n_params)
        .max()
        .unwrap_or(3);
    let (mut db, mut dslope) = (vec![0.0; max_p], vec![0.0; max_p]);
    for epoch in 0..config.epochs {
        if size < xs.len() {
            order.shuffle(&mut shuffle);
        }
        let mut total = KahanSum::new();
        for chunk in order.chunks(size) {
            let mut states: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&s| InputAssignment::sample(&xs[s], n, &mut aux).map(|a| a.a0()))
                .collect::<Result<_>>()?;
            let mut traces: Vec<Vec<Vec<f64>>> = chunk
                .iter()
                .map(|_| own.iter().map(|&k| vec![0.0; k]).collect())
                .collect();
            let mut t = 0.0;
            for &h in &slices {
                model.set_params(params)?;
                grad.iter_mut().for_each(|g| *g = 0.0);
                for ((a, trace), &s) in states.iter_mut().zip(&mut traces).zip(chunk) {
                    let mut traj = Trajectory::start(a);
                    model
                        .advance(a, t, h, &mut traj)
                        .map_err(|e| e.at_sample(s))?;
                    report.guard_count += traj.halvings;
                    for k in 0..traj.steps.len() {
                        let hk = traj.steps[k];
                        let ak = &traj.states[k];
                        for i in 0..n {
                            let b = &model.boundary[i];
                            let slope = traj.slopes[k][i];
                            let f = 1.0 + slope * hk;
                            total.add(-f.ln());
                            let np = b.n_params();
                            b.param_partials(ak[i], &mut db[..np], &mut dslope[..np]);
                            let dl_da = -hk * b.curvature(ak[i]) / f;
                            let e = &mut trace[i];
                            let row = i * (n - 1);
                            for (q, j) in (0..n).filter(|&j| j != i).enumerate() {
                                grad[row + q] += dl_da * e[q];
                                e[q] = e[q] * f + hk * ak[j];
                            }
                            for p in 0..np {
                                let ep = &mut e[n - 1 + p];
                                grad[offsets[i] + p] += dl_da * *ep - hk / f * dslope[p];
                                *ep = *ep * f + hk * db[p];
                            }
                        }
                    }
                }
                let scale = 1.0 / chunk.len() as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                sgd_step(params, &grad, &mut opt).map_err(|_| Error::Diverged { epoch })?;
                t += h;
            }
        }
        let loss = total.total() / xs.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        report.record_epoch(loss);
    }
    Ok(())
}

impl RunReport {
    /// Records the evaluated final loss and, for one data column, the mass
    /// of the recovered density over the data range.
    fn final_nll_check(
        &mut self,
        model: &NonlinearTimeModel,
        xs: &[Vec<f64>],
        config: &TrainConfig,
    ) -> Result<()> {
        let mut eval = seeded_rng(config.seed, streams::SAMPLING);
        let final_nll = model.mean_nll(xs, &mut eval)?;
        self.checks.push(VerificationRecord::at_most(
            "timeevo.nll_decrease",
            "evaluated mean nll minus initial mean nll",
            final_nll - self.initial_loss,
            config.tolerance_or("timeevo.nll_decrease", 0.0),
        ));
        if model.m == 1 {
            let mass = recovered_mass(model, 64, &mut eval)?;
            let band = config.tolerance_or("timeevo.recovered_mass", 0.1);
            self.checks.push(VerificationRecord::within(
                "timeevo.recovered_mass",
                "integral of recovered P(x) over the scaled range",
                mass,
                1.0 - band,
                1.0 + band,
            ));
        }
        Ok(())
    }
}

/// Simpson integral of the recovered density of a one-column model over the
/// raw range mapped onto `[EDGE, 1 - EDGE]` in model units.
pub(crate) fn recovered_mass(
    model: &NonlinearTimeModel,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<f64> {
    const EDGE: f64 = 1e-4;
    let to_raw = |u: f64| match model.input_scale.first() {
        Some(s) => s.lo + (u - INTERIOR_MARGIN) / s.slope(),
        None => u,
    };
    let (nodes, weights) = simpson_nodes(to_raw(EDGE), to_raw(1.0 - EDGE), 200);
    let points: Vec<Vec<f64>> = nodes.iter().map(|x| vec![*x]).collect();
    let dens = recover_input_density(model, &points, n_mc, rng)?;
    Ok(dens.iter().zip(&weights).map(|(d, w)| d * w).sum())
}

impl Rollout for NonlinearTimeModel {
    fn n_nodes(&self) -> usize {
        self.n
    }

    fn final_state(&self, a0: &[f64]) -> Result<Vec<f64>> {
        Ok(self.rollout(a0)?.final_state().to_vec())
    }

    fn probe_center(&self) -> f64 {
        0.5
    }

    fn probe_scale(&self) -> f64 {
        0.1
    }
}
