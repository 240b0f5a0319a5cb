//! Finite differences, Simpson quadrature and the second-order mixed partial.

use super::dual::Dual;
use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

fn finite_or(v: f64, op: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

/// Central-difference Jacobian: entry `(i, j)` is `(f_i(x + h e_j) - f_i(x - h e_j)) / 2h`.
pub fn finite_diff_jacobian<F>(f: F, x: &[f64], h: f64) -> Result<DenseMatrix>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let m = f(x)?.len();
    let n = x.len();
    let mut jac = DenseMatrix::zeros(m, n);
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + h;
        let plus = f(&probe)?;
        probe[j] = x[j] - h;
        let minus = f(&probe)?;
        probe[j] = x[j];
        if plus.len() != m || minus.len() != m {
            return Err(Error::Shape {
                expected: m,
                got: plus.len().min(minus.len()),
            });
        }
        for i in 0..m {
            jac[(i, j)] = finite_or((plus[i] - minus[i]) / (2.0 * h), "finite_diff_jacobian")?;
        }
    }
    Ok(jac)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let plus = f(&probe);
            probe[j] = x[j] - h;
            let minus = f(&probe);
            probe[j] = x[j];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Worst relative error between two gradients, with an absolute floor `floor`
/// on the denominator so near-zero components do not dominate.
pub fn gradient_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Composite Simpson rule on `[a, b]` with `n_panels` (even, >= 2) panels.
pub fn quadrature<G>(g: G, a: f64, b: f64, n_panels: usize) -> Result<f64>
where
    G: Fn(f64) -> f64,
{
    if !(a < b) {
        return Err(Error::invalid(format!(
            "quadrature needs a < b, got [{a}, {b}]"
        )));
    }
    if n_panels < 2 || !n_panels.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "Simpson needs an even panel count >= 2, got {n_panels}"
        )));
    }
    let h = (b - a) / n_panels as f64;
    let mut acc = super::sum::KahanSum::new();
    for k in 0..=n_panels {
        let x = if k == n_panels { b } else { a + k as f64 * h };
        let w = if k == 0 || k == n_panels {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc.add(w * finite_or(g(x), "quadrature integrand")?);
    }
    Ok(acc.total() * h / 3.0)
}

/// Simpson weights and nodes for `[a, b]`.
pub fn simpson_nodes(a: f64, b: f64, n_panels: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (b - a) / n_panels as f64;
    let xs = (0..=n_panels).map(|k| a + k as f64 * h).collect();
    let ws = (0..=n_panels)
        .map(|k| {
            let w = if k == 0 || k == n_panels {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect();
    (xs, ws)
}

/// Tensor-product Simpson rule over a rectangle.
pub fn quadrature_2d<G>(g: G, x: (f64, f64), y: (f64, f64), n_panels: usize) -> Result<f64>
where
    G: Fn(f64, f64) -> f64,
{
    if !(x.0 < x.1 && y.0 < y.1) || n_panels < 2 || !n_panels.is_multiple_of(2) {
        return Err(Error::invalid("bad 2d quadrature domain or panel count"));
    }
    let (xs, wx) = simpson_nodes(x.0, x.1, n_panels);
    let (ys, wy) = simpson_nodes(y.0, y.1, n_panels);
    let mut acc = super::sum::KahanSum::new();
    for (xi, wi) in xs.iter().zip(&wx) {
        for (yj, wj) in ys.iter().zip(&wy) {
            acc.add(wi * wj * finite_or(g(*xi, *yj), "quadrature integrand")?);
        }
    }
    Ok(acc.total())
}

/// `d²f / da₁ da₂` by nested dual numbers, with a central-difference cross-check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixedPartial {
    pub exact: f64,
    pub finite_difference: f64,
}

pub fn mixed_partial_2d<F>(f: F, x: [f64; 2]) -> Result<MixedPartial>
where
    F: Fn(Dual<Dual>, Dual<Dual>) -> Dual<Dual>,
{
    // outer channel seeds a₁, inner channel seeds a₂
    let a1 = Dual::new(Dual::constant(x[0]), Dual::constant(1.0));
    let a2 = Dual::new(Dual::var(x[1]), Dual::constant(0.0));
    let out = f(a1, a2);
    let exact = finite_or(out.d.d, "mixed_partial_2d")?;

    let h = 1e-4;
    let eval = |p: f64, q: f64| {
        let y = f(
            Dual::constant(Dual::constant(p)),
            Dual::constant(Dual::constant(q)),
        );
        y.v.v
    };
    let fd = (eval(x[0] + h, x[1] + h) - eval(x[0] + h, x[1] - h) - eval(x[0] - h, x[1] + h)
        + eval(x[0] - h, x[1] - h))
        / (4.0 * h * h);
    Ok(MixedPartial {
        exact,
        finite_difference: finite_or(fd, "mixed_partial_2d finite difference")?,
    })
}
