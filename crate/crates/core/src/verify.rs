//! Reference computations the other modules are checked against.
//!
//! Nothing here reuses model code: only [`crate::numeric`] primitives and
//! closed-form probability.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{mixed_partial_2d, quadrature_2d, Dual, Real};

/// Floor applied to both densities inside the KL integrand.
pub const KL_FLOOR: f64 = 1e-12;

/// One line of a verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationRecord {
    pub check: String,
    pub metric: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl VerificationRecord {
    /// Passes when `value <= tolerance`.
    pub fn at_most(check: &str, metric: &str, value: f64, tolerance: f64) -> Self {
        VerificationRecord {
            check: check.into(),
            metric: metric.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }

    /// Passes when `value` lies in `[lo, hi]`; `tolerance` records the half-width.
    pub fn within(check: &str, metric: &str, value: f64, lo: f64, hi: f64) -> Self {
        VerificationRecord {
            check: check.into(),
            metric: metric.into(),
            value,
            tolerance: (hi - lo) / 2.0,
            pass: value >= lo && value <= hi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDensityComparison {
    pub grid_min: f64,
    pub grid_max: f64,
    pub n_points: usize,
    pub reference: Vec<f64>,
    pub estimate: Vec<f64>,
    /// Trapezoid integral of |reference - estimate|.
    pub l1: f64,
    /// Trapezoid integral of p ln(p/q) with both densities floored at [`KL_FLOOR`].
    pub kl: f64,
    pub max_abs: f64,
}

fn trapezoid(grid: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = crate::numeric::KahanSum::new();
    for i in 1..grid.len() {
        acc.add(0.5 * (grid[i] - grid[i - 1]) * (f(i) + f(i - 1)));
    }
    acc.total()
}

pub fn compare_densities(
    reference: &[f64],
    estimate: &[f64],
    grid: &[f64],
) -> Result<GridDensityComparison> {
    if reference.len() != grid.len() || estimate.len() != grid.len() {
        return Err(Error::Shape {
            expected: grid.len(),
            got: reference.len().min(estimate.len()),
        });
    }
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid(
            "grid must be strictly increasing with >= 2 points",
        ));
    }
    for (what, values) in [("reference", reference), ("estimate", estimate)] {
        if let Some(&v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain {
                what: format!("{what} density"),
                value: v,
            });
        }
    }
    let l1 = trapezoid(grid, |i| (reference[i] - estimate[i]).abs());
    let kl = trapezoid(grid, |i| {
        let p = reference[i].max(KL_FLOOR);
        let q = estimate[i].max(KL_FLOOR);
        p * (p / q).ln()
    });
    let max_abs = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(GridDensityComparison {
        grid_min: grid[0],
        grid_max: grid[grid.len() - 1],
        n_points: grid.len(),
        reference: reference.to_vec(),
        estimate: estimate.to_vec(),
        l1,
        kl,
        max_abs,
    })
}

/// Evenly spaced grid including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Sample mean and the biased (divide-by-N) maximum-likelihood variance.
pub fn closed_form_mle_gaussian(data: &[f64]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Counting estimate of `P(outcome | condition)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalTable {
    pub conditions: Vec<String>,
    pub outcomes: Vec<String>,
    /// `rows[c][o]`, each row sums to one.
    pub rows: Vec<Vec<f64>>,
}

impl ConditionalTable {
    pub fn prob(&self, condition: &str, outcome: &str) -> Option<f64> {
        let c = self.conditions.iter().position(|x| x == condition)?;
        let o = self.outcomes.iter().position(|x| x == outcome)?;
        Some(self.rows[c][o])
    }
}

pub fn empirical_conditional<C, O>(pairs: &[(C, O)]) -> Result<ConditionalTable>
where
    C: AsRef<str>,
    O: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    let mut outcomes: Vec<String> = pairs.iter().map(|(_, o)| o.as_ref().to_string()).collect();
    outcomes.sort();
    outcomes.dedup();
    for (c, o) in pairs {
        *counts
            .entry(c.as_ref())
            .or_default()
            .entry(o.as_ref())
            .or_default() += 1;
    }
    let mut conditions = Vec::new();
    let mut rows = Vec::new();
    for (c, row) in counts {
        let total: usize = row.values().sum();
        conditions.push(c.to_string());
        rows.push(
            outcomes
                .iter()
                .map(|o| *row.get(o.as_str()).unwrap_or(&0) as f64 / total as f64)
                .collect(),
        );
    }
    Ok(ConditionalTable {
        conditions,
        outcomes,
        rows,
    })
}

pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}

pub fn normal_cdf(x: f64, mean: f64, std: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf((x - mean) / (std * 2f64.sqrt())))
}

pub fn lognormal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    normal_pdf(x.ln(), mu, sigma) / x
}

/// Bivariate normal density with unit variances and correlation `rho`.
pub fn bivariate_normal_pdf(x: f64, y: f64, rho: f64) -> f64 {
    let det = 1.0 - rho * rho;
    let q = (x * x - 2.0 * rho * x * y + y * y) / det;
    (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
}

/// `½ ln(2πe σ²)`, the differential entropy of a normal law.
pub fn normal_entropy(std: f64) -> f64 {
    0.5 * (2.0 * PI * std::f64::consts::E * std * std).ln()
}

/// Scalar model `y(a₁, a₂)` that is increasing in both arguments with a
/// nonnegative mixed partial: a convex combination of products of sigmoids.
/// Its density `∂²y/∂a₁∂a₂` integrates to one over the plane.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedDerivativeModel {
    pub mix_logits: Vec<f64>,
    /// Per component: (slope₁, shift₁, slope₂, shift₂); slopes pass through softplus.
    pub components: Vec<[f64; 4]>,
}

impl MixedDerivativeModel {
    pub fn random(rng: &mut crate::numeric::Rng, k: usize) -> Self {
        use rand::Rng as _;
        MixedDerivativeModel {
            mix_logits: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            components: (0..k)
                .map(|_| {
                    [
                        rng.random_range(0.0..1.5),
                        rng.random_range(-2.0..2.0),
                        rng.random_range(0.0..1.5),
                        rng.random_range(-2.0..2.0),
                    ]
                })
                .collect(),
        }
    }

    pub fn cdf<T: Real>(&self, a1: T, a2: T) -> T {
        let z = crate::numeric::log_sum_exp(&self.mix_logits);
        let mut y = T::cst(0.0);
        for (logit, c) in self.mix_logits.iter().zip(&self.components) {
            let w = (logit - z).exp();
            let s1 = crate::numeric::softplus(c[0]);
            let s2 = crate::numeric::softplus(c[2]);
            let f1 = (a1.scale(s1) + T::cst(c[1])).sigmoid();
            let f2 = (a2.scale(s2) + T::cst(c[3])).sigmoid();
            y = y + (f1 * f2).scale(w);
        }
        y
    }

    /// Density as the mixed second derivative of [`Self::cdf`].
    pub fn density(&self, a1: f64, a2: f64) -> Result<f64> {
        Ok(mixed_partial_2d(|p: Dual<Dual>, q: Dual<Dual>| self.cdf(p, q), [a1, a2])?.exact)
    }

    /// Simpson mass of the density over `[-half_width, half_width]²`.
    pub fn mass(&self, half_width: f64, n_panels: usize) -> Result<f64> {
        quadrature_2d(
            |p, q| self.density(p, q).unwrap_or(f64::NAN),
            (-half_width, half_width),
            (-half_width, half_width),
            n_panels,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_densities() {
        let g = linspace(-3.0, 3.0, 61);
        let p: Vec<f64> = g.iter().map(|&x| normal_pdf(x, 0.0, 1.0)).collect();
        let c = compare_densities(&p, &p, &g).unwrap();
        assert_eq!((c.l1, c.kl, c.max_abs), (0.0, 0.0, 0.0));
    }

    #[test]
    fn shifted_normals_overlap() {
        let g = linspace(-8.0, 8.0, 1601);
        let p: Vec<f64> = g.iter().map(|&x| normal_pdf(x, 0.0, 1.0)).collect();
        let q: Vec<f64> = g.iter().map(|&x| normal_pdf(x, 0.1, 1.0)).collect();
        let c = compare_densities(&p, &q, &g).unwrap();
        // oracle: 2(2Φ(0.05) - 1)
        let oracle = 2.0 * (2.0 * normal_cdf(0.05, 0.0, 1.0) - 1.0);
        assert!((oracle - 0.0797).abs() < 1e-4);
        assert!((c.l1 - oracle).abs() < 1e-5, "{} vs {oracle}", c.l1);
        // KL of N(0,1)||N(0.1,1) = 0.1²/2
        assert!((c.kl - 0.005).abs() < 1e-6);
    }

    #[test]
    fn disjoint_boxes() {
        let g = linspace(0.0, 4.0, 4001);
        let p: Vec<f64> = g
            .iter()
            .map(|&x| if x > 0.5 && x < 1.5 { 1.0 } else { 0.0 })
            .collect();
        let q: Vec<f64> = g
            .iter()
            .map(|&x| if x > 2.5 && x < 3.5 { 1.0 } else { 0.0 })
            .collect();
        let c = compare_densities(&p, &q, &g).unwrap();
        assert!((c.l1 - 2.0).abs() < 2e-3);
    }

    #[test]
    fn negative_density_rejected() {
        let g = linspace(0.0, 1.0, 3);
        assert!(compare_densities(&[0.0, -1.0, 0.0], &[0.0; 3], &g).is_err());
    }

    #[test]
    fn gaussian_mle() {
        assert_eq!(closed_form_mle_gaussian(&[1.0, 3.0]).unwrap(), (2.0, 1.0));
        assert_eq!(closed_form_mle_gaussian(&[4.5]).unwrap(), (4.5, 0.0));
        assert_eq!(closed_form_mle_gaussian(&[]), Err(Error::EmptyData));
    }

    #[test]
    fn gaussian_mle_large_sample() {
        let mut rng = crate::numeric::seeded_rng(11, 0);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| 5.0 + 2.0 * crate::numeric::standard_normal(&mut rng))
            .collect();
        let (m, v) = closed_form_mle_gaussian(&xs).unwrap();
        assert!((m - 5.0).abs() < 0.03);
        assert!((v - 4.0).abs() < 0.1);
    }

    #[test]
    fn conditional_counts() {
        let t = empirical_conditional(&[("0", "A"), ("0", "B")]).unwrap();
        assert_eq!(t.rows, vec![vec![0.5, 0.5]]);

        let t = empirical_conditional(&[("0", "A"), ("0", "A"), ("0", "B"), ("1", "B")]).unwrap();
        assert_eq!(t.rows[0], vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(t.rows[1], vec![0.0, 1.0]);
        for row in &t.rows {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }

        let t = empirical_conditional(&[("x", "only")]).unwrap();
        assert_eq!(t.rows, vec![vec![1.0]]);
    }

    #[test]
    fn mixed_derivative_model_is_normalized() {
        let mut rng = crate::numeric::seeded_rng(5, 0);
        for _ in 0..3 {
            let m = MixedDerivativeModel::random(&mut rng, 3);
            let mass = m.mass(40.0, 400).unwrap();
            assert!((mass - 1.0).abs() < 1e-2, "mass {mass}");
            assert!(m.density(0.3, -0.2).unwrap() > 0.0);
        }
    }
}
