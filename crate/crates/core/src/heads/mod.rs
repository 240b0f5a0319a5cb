//! Supervised learning read as conditional-probability estimation.
//!
//! - [`SoftmaxClassifier`]: `Φ(x, t)` is a softmax over label kinds.
//! - [`GaussianRegressionHead`]: `Φ(x, t)` is a Gaussian with predicted mean and
//!   triangular covariance factor.
//! - [`ParametricFamily`]: `Φ(x) = P(x | θ)` fitted one sample at a time.

mod classifier;
mod params;
mod regression;

pub use classifier::{cross_entropy_one_hot, train_classifier, SoftmaxClassifier};
pub use params::{
    estimate_params, estimate_params_values, FamilyKind, ParamEstimate, ParametricFamily,
    VARIANCE_FLOOR,
};
pub use regression::{
    gaussian_nll, train_mse, train_regression, train_regression_rows, GaussianOutput,
    GaussianRegressionHead,
};

use crate::data::mean_std;
use crate::flow1d::Standardize;

/// Per-column standardization; constant columns keep unit scale.
pub(crate) fn feature_standardize(rows: &[Vec<f64>], width: usize) -> Vec<Standardize> {
    (0..width)
        .map(|c| {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let (mean, std) = mean_std(&col);
            Standardize {
                mean,
                std: if std > 0.0 { std } else { 1.0 },
            }
        })
        .collect()
}
