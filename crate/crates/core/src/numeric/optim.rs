//! First-order optimizers operating on flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `p -= lr * g`
    Plain,
    /// RMS-scaled gradients.
    Rms,
    /// RMS scaling with first-moment momentum and bias correction.
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, n_params: usize) -> Self {
        OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// One optimizer update of `params` in place.
pub fn sgd_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if state.len() != params.len() {
        return Err(Error::Shape {
            expected: state.len(),
            got: params.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    state.step_count += 1;
    let lr = state.learning_rate;
    match state.kind {
        OptimizerKind::Plain => {
            for (p, g) in params.iter_mut().zip(grads) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Rms => {
            let b2 = state.beta2;
            for ((p, g), v) in params.iter_mut().zip(grads).zip(state.second.iter_mut()) {
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * g / (v.sqrt() + state.eps);
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2) = (state.beta1, state.beta2);
            let t = state.step_count as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let m = &mut state.first[i];
                let v = &mut state.second[i];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for kind in [
            OptimizerKind::Plain,
            OptimizerKind::Rms,
            OptimizerKind::Adam,
        ] {
            let mut p = vec![1.0, -2.0];
            let mut s = OptimizerState::new(kind, 0.1, 2);
            sgd_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
            assert_eq!(p, vec![1.0, -2.0]);
        }
    }

    #[test]
    fn plain_step_definition() {
        let mut p = vec![0.5];
        let mut s = OptimizerState::new(OptimizerKind::Plain, 0.1, 1);
        sgd_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_contracts() {
        // x <- x - 0.1 * 2x = 0.8 x, so |x_100| = 0.8^100 ~ 2e-10
        let mut p = vec![1.0];
        let mut s = OptimizerState::new(OptimizerKind::Plain, 0.1, 1);
        for _ in 0..100 {
            let g = [2.0 * p[0]];
            sgd_step(&mut p, &g, &mut s).unwrap();
        }
        assert!(p[0].abs() < 1e-4);
        assert!((p[0] - 0.8f64.powi(100)).abs() < 1e-20);
    }

    #[test]
    fn errors() {
        let mut s = OptimizerState::new(OptimizerKind::Adam, 0.1, 2);
        let mut p = vec![0.0, 0.0];
        assert!(matches!(
            sgd_step(&mut p, &[1.0], &mut s),
            Err(Error::Shape { .. })
        ));
        assert_eq!(
            sgd_step(&mut p, &[1.0, f64::NAN], &mut s),
            Err(Error::NonFiniteGradient { index: 1 })
        );
    }
}
