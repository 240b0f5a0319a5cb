use serde::{Deserialize, Serialize};

use super::{step_sizes, Rollout, Trajectory};
use crate::error::{Error, Result};
use crate::numeric::{matrix_exp, standard_normal, DenseMatrix, Rng};

const LN_PI: f64 = 1.144_729_885_849_400_2;

/// `da/dt = W a + bias` on `n` nodes. `w` holds the off-diagonal entries of
/// `W` row by row; the diagonal is structurally zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearTimeModel {
    pub n: usize,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl LinearTimeModel {
    pub fn new(n: usize, w: Vec<f64>, bias: Vec<f64>, horizon: f64) -> Result<Self> {
        let m = LinearTimeModel {
            n,
            w,
            bias,
            horizon,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn zero(n: usize, horizon: f64) -> Result<Self> {
        Self::new(n, vec![0.0; n * n.saturating_sub(1)], vec![0.0; n], horizon)
    }

    /// Off-diagonal weights and biases drawn from `N(0, scale²)`.
    pub fn random(n: usize, scale: f64, horizon: f64, rng: &mut Rng) -> Result<Self> {
        let w = (0..n * n.saturating_sub(1))
            .map(|_| scale * standard_normal(rng))
            .collect();
        let bias = (0..n).map(|_| scale * standard_normal(rng)).collect();
        Self::new(n, w, bias, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("time model needs at least one node"));
        }
        if self.w.len() != self.n * (self.n - 1) {
            return Err(Error::Shape {
                expected: self.n * (self.n - 1),
                got: self.w.len(),
            });
        }
        if self.bias.len() != self.n {
            return Err(Error::Shape {
                expected: self.n,
                got: self.bias.len(),
            });
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Domain {
                what: "T".into(),
                value: self.horizon,
            });
        }
        if self.w.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "linear model parameters".into(),
            });
        }
        Ok(())
    }

    /// Full `W` with its zero diagonal.
    pub fn w_matrix(&self) -> DenseMatrix {
        off_diagonal_matrix(self.n, &self.w)
    }

    fn drift(&self, a: &[f64]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                let row = &self.w[i * (n - 1)..(i + 1) * (n - 1)];
                let mut s = self.bias[i];
                for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
                    s += row[k] * a[j];
                }
                s
            })
            .collect()
    }
}

pub(crate) fn off_diagonal_matrix(n: usize, w: &[f64]) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for (k, j) in (0..n).filter(|&j| j != i).enumerate() {
            m[(i, j)] = w[i * (n - 1) + k];
        }
    }
    m
}

fn check_state(n: usize, a0: &[f64]) -> Result<()> {
    if a0.len() != n {
        return Err(Error::Shape {
            expected: n,
            got: a0.len(),
        });
    }
    if let Some((i, v)) = a0.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Domain {
            what: format!("a0[{i}]"),
            value: *v,
        });
    }
    Ok(())
}

/// Closed-form `a(T)` through the exponential of the augmented generator
/// `[[W, bias], [0, 0]]`, which stays valid when `W` is singular.
pub fn evolve_linear_exact(model: &LinearTimeModel, a0: &[f64]) -> Result<Vec<f64>> {
    model.validate()?;
    check_state(model.n, a0)?;
    let n = model.n;
    let mut aug = DenseMatrix::zeros(n + 1, n + 1);
    let w = model.w_matrix();
    for i in 0..n {
        for j in 0..n {
            aug[(i, j)] = w[(i, j)];
        }
        aug[(i, n)] = model.bias[i];
    }
    let e = matrix_exp(&aug, model.horizon)?;
    let mut x = a0.to_vec();
    x.push(1.0);
    let mut out = e.matvec(&x)?;
    out.truncate(n);
    Ok(out)
}

/// Explicit Euler from `0` to `T`, ending with a partial step if `dt` does
/// not divide `T`.
pub fn evolve_linear_euler(model: &LinearTimeModel, a0: &[f64], dt: f64) -> Result<Trajectory> {
    model.validate()?;
    check_state(model.n, a0)?;
    if !(dt > 0.0 && dt <= model.horizon * (1.0 + 1e-12)) {
        return Err(Error::Domain {
            what: "dt".into(),
            value: dt,
        });
    }
    let mut traj = Trajectory::start(a0);
    let mut a = a0.to_vec();
    let mut t = 0.0;
    for h in step_sizes(model.horizon, dt.min(model.horizon)) {
        let d = model.drift(&a);
        for (ai, di) in a.iter_mut().zip(&d) {
            *ai += h * di;
        }
        t += h;
        traj.times.push(t);
        traj.steps.push(h);
        traj.states.push(a.clone());
    }
    Ok(traj)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPhi {
    /// `exp(-‖a(T)‖²) / π^{n/2}`.
    pub phi: f64,
    /// `-ln Φ = ‖a(T)‖² + (n/2) ln π`.
    pub loss: f64,
    /// Per-node energies `a_i(T)²`.
    pub local: Vec<f64>,
    pub final_state: Vec<f64>,
}

/// Model function with energy `E(a) = ‖a‖²` on the final state. Because the
/// flow has unit determinant, `Φ` integrates to one over `a(0)`.
pub fn linear_phi(model: &LinearTimeModel, a0: &[f64]) -> Result<LinearPhi> {
    let a_t = evolve_linear_exact(model, a0)?;
    let local: Vec<f64> = a_t.iter().map(|v| v * v).collect();
    let energy: f64 = local.iter().sum();
    let loss = energy + 0.5 * model.n as f64 * LN_PI;
    Ok(LinearPhi {
        phi: (-loss).exp(),
        loss,
        local,
        final_state: a_t,
    })
}

impl Rollout for LinearTimeModel {
    fn n_nodes(&self) -> usize {
        self.n
    }

    fn final_state(&self, a0: &[f64]) -> Result<Vec<f64>> {
        evolve_linear_exact(self, a0)
    }

    fn probe_center(&self) -> f64 {
        0.0
    }

    fn probe_scale(&self) -> f64 {
        1.0
    }
}
