//! Matrix exponential by scaling and squaring around a truncated Taylor series.

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

const MAX_TERMS: usize = 40;

/// `exp(A t)`.
pub fn matrix_exp(a: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::Shape {
            expected: a.rows(),
            got: a.cols(),
        });
    }
    if !t.is_finite() {
        return Err(Error::Domain {
            what: "t".into(),
            value: t,
        });
    }
    let n = a.rows();
    let at = a.scaled(t);
    let norm = at.norm_1();
    // scale so the Taylor core sees a norm below 1/2
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let b = at.scaled(0.5f64.powi(squarings as i32));

    let mut sum = DenseMatrix::identity(n);
    let mut term = DenseMatrix::identity(n);
    for k in 1..=MAX_TERMS {
        term = term.matmul(&b)?.scaled(1.0 / k as f64);
        sum = sum.add(&term)?;
        if term.norm_1() <= f64::EPSILON * 1e-3 * sum.norm_1() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum)?;
    }
    if sum.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "matrix_exp".into(),
        });
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gives_identity() {
        let e = matrix_exp(&DenseMatrix::zeros(3, 3), 1.0).unwrap();
        assert_eq!(e, DenseMatrix::identity(3));
    }

    #[test]
    fn nilpotent_series_terminates() {
        let a = DenseMatrix::from_rows(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let e = matrix_exp(&a, 1.0).unwrap();
        let want = DenseMatrix::from_rows(2, 2, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        assert!(e.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn rotation_generator() {
        let th = 2.5;
        let a = DenseMatrix::from_rows(2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        let e = matrix_exp(&a, th).unwrap();
        let want =
            DenseMatrix::from_rows(2, 2, vec![th.cos(), -th.sin(), th.sin(), th.cos()]).unwrap();
        assert!(e.max_abs_diff(&want) < 1e-13);
    }

    #[test]
    fn diagonal_matches_scalar_exp() {
        let a = DenseMatrix::from_rows(2, 2, vec![3.0, 0.0, 0.0, -4.0]).unwrap();
        let e = matrix_exp(&a, 1.5).unwrap();
        assert!((e[(0, 0)] / 4.5f64.exp() - 1.0).abs() < 1e-13);
        assert!((e[(1, 1)] / (-6.0f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_rectangular() {
        assert!(matrix_exp(&DenseMatrix::zeros(2, 3), 1.0).is_err());
    }
}
