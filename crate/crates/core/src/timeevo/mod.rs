//! Densities defined by the time evolution of a graph of nodes.
//!
//! Node states `a(t)` evolve from `a(0) = (x, r)`, where `r` are auxiliary
//! values drawn from a known law. Two models are provided:
//!
//! - [`LinearTimeModel`]: `da/dt = W a + bias` with `W_ii = 0`, so the flow
//!   has unit determinant and `Φ(a(0)) = exp(-E(a(T))) / Z` is normalized.
//! - [`NonlinearTimeModel`]: `da_i/dt = Σ_j W_ij a_j + b_i(a_i)` with
//!   boundary functions that keep states in `(0, 1)`. `Φ` is the Jacobian
//!   determinant of the Euler rollout, approximated by the product of its
//!   diagonal factors `1 + b_i'(a_i) dt`, so `-ln Φ` splits into terms local
//!   to each node and each time slice.

mod linear;
mod nonlinear;

pub use linear::{
    evolve_linear_euler, evolve_linear_exact, linear_phi, LinearPhi, LinearTimeModel,
};
pub use nonlinear::{
    evolve_nonlinear, nonlinear_nll, recover_input_density, train_time_model, Boundary,
    ColumnScale, InputAssignment, NonlinearNll, NonlinearTimeModel, INTERIOR_MARGIN, MAX_HALVINGS,
    MAX_SUBSTEPS,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numeric::Rng;

/// Simulated states. `steps[k]` is the step from `times[k]` to `times[k+1]`;
/// `slopes[k][i]` is `b_i'(a_i(times[k]))` (empty for the linear model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub steps: Vec<f64>,
    pub slopes: Vec<Vec<f64>>,
    /// Step halvings performed by the state guard.
    pub halvings: u64,
}

impl Trajectory {
    fn start(a0: &[f64]) -> Self {
        Trajectory {
            times: vec![0.0],
            states: vec![a0.to_vec()],
            steps: Vec::new(),
            slopes: Vec::new(),
            halvings: 0,
        }
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has an initial state")
    }

    /// Diagonal factors `1 + b_i' dt` of every accepted step.
    pub fn factors(&self) -> Vec<Vec<f64>> {
        self.slopes
            .iter()
            .zip(&self.steps)
            .map(|(s, h)| s.iter().map(|v| 1.0 + v * h).collect())
            .collect()
    }

    /// CSV `t,node,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,node,value\n");
        for (t, a) in self.times.iter().zip(&self.states) {
            for (i, v) in a.iter().enumerate() {
                s.push_str(&format!("{t},{i},{v}\n"));
            }
        }
        s
    }
}

/// Euler step count for horizon `t_end` and step `dt`, including a final
/// partial step when `dt` does not divide `t_end`.
pub(crate) fn step_sizes(t_end: f64, dt: f64) -> Vec<f64> {
    let full = (t_end / dt * (1.0 + 1e-12)).floor() as usize;
    let mut steps = vec![dt; full];
    let rest = t_end - full as f64 * dt;
    if rest > dt * 1e-9 {
        steps.push(rest);
    }
    steps
}

/// A map `a(0) -> a(T)` whose affinity can be probed.
pub trait Rollout {
    fn n_nodes(&self) -> usize;
    fn final_state(&self, a0: &[f64]) -> Result<Vec<f64>>;
    /// Point around which perturbations are taken.
    fn probe_center(&self) -> f64;
    /// Largest perturbation per coordinate.
    fn probe_scale(&self) -> f64;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    /// Largest `‖g(αu+βv) - αg(u) - βg(v)‖_∞` with `g(z) = f(c+z) - f(c)`.
    pub residual: f64,
    pub trials: usize,
}

/// Superposition test of the rollout around its probe center.
pub fn check_linearity<M: Rollout>(
    model: &M,
    trials: usize,
    rng: &mut Rng,
) -> Result<LinearityReport> {
    let n = model.n_nodes();
    let c = vec![model.probe_center(); n];
    let scale = model.probe_scale();
    let f_c = model.final_state(&c)?;
    let g = |z: &[f64]| -> Result<Vec<f64>> {
        let a: Vec<f64> = c.iter().zip(z).map(|(c, z)| c + z).collect();
        Ok(model
            .final_state(&a)?
            .iter()
            .zip(&f_c)
            .map(|(y, y0)| y - y0)
            .collect())
    };
    let mut residual: f64 = 0.0;
    for _ in 0..trials {
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let alpha: f64 = rng.random_range(-1.0..1.0);
        let beta: f64 = rng.random_range(-1.0..1.0);
        let mixed: Vec<f64> = u
            .iter()
            .zip(&v)
            .map(|(u, v)| 0.5 * (alpha * u + beta * v))
            .collect();
        let (gm, gu, gv) = (g(&mixed)?, g(&u)?, g(&v)?);
        for i in 0..n {
            let r = gm[i] - 0.5 * (alpha * gu[i] + beta * gv[i]);
            residual = residual.max(r.abs());
        }
    }
    Ok(LinearityReport { residual, trials })
}

#[cfg(test)]
mod tests;
