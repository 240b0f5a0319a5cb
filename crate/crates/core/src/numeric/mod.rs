//! Shared numerical substrate.

mod calculus;
mod dual;
mod expm;
mod matrix;
mod optim;
mod sum;

pub use calculus::{
    finite_diff_gradient, finite_diff_jacobian, gradient_rel_error, mixed_partial_2d, quadrature,
    quadrature_2d, simpson_nodes, MixedPartial, FD_STEP,
};
pub use dual::{dual_forward, log_sum_exp, sigmoid, softplus, softplus_inv, Dual, Real};
pub use expm::matrix_exp;
pub use matrix::DenseMatrix;
pub use optim::{sgd_step, OptimizerKind, OptimizerState};
pub use sum::{compensated_mean, compensated_sum, GradAccumulator, KahanSum};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Counter-based generator used for every random draw in the crate.
pub type Rng = ChaCha8Rng;

/// Generator for `seed`, on an independent `stream` so initialization,
/// shuffling and auxiliary draws never share a sequence.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUXILIARY: u64 = 3;
    pub const SAMPLING: u64 = 4;
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}
