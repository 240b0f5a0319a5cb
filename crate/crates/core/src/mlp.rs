//! Plain feed-forward network with tanh hidden layers and a linear output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{standard_normal, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer sizes including input and output.
    pub sizes: Vec<usize>,
    /// Per layer: row-major weights then biases.
    pub params: Vec<f64>,
}

/// Activations of one forward pass, reused across samples.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    /// `acts[0]` is the input; `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl Mlp {
    /// Gaussian initialization with variance `1/fan_in`; the output layer is
    /// further scaled by `out_scale`.
    pub fn new(sizes: &[usize], out_scale: f64, rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let mut params = Vec::new();
        let last = sizes.len() - 2;
        for (l, w) in sizes.windows(2).enumerate() {
            let scale = (1.0 / w[0] as f64).sqrt() * if l == last { out_scale } else { 1.0 };
            params.extend((0..w[0] * w[1]).map(|_| scale * standard_normal(rng)));
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {:?}", self.sizes)));
        }
        if self.params.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                got: self.params.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = MlpCache::default();
        self.forward_cached(x, &mut cache);
        cache.acts.pop().unwrap_or_default()
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut MlpCache) {
        debug_assert_eq!(x.len(), self.sizes[0]);
        let n_layers = self.sizes.len() - 1;
        cache.acts.resize(n_layers + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        let mut k = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (prev, rest) = cache.acts.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            out.clear();
            let w = &self.params[k..k + n_in * n_out];
            let b = &self.params[k + n_in * n_out..k + n_in * n_out + n_out];
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                let a = b[i] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
                out.push(if l + 1 < n_layers { a.tanh() } else { a });
            }
            k += n_in * n_out + n_out;
        }
    }

    /// Adds `∂L/∂params` to `grad` given `∂L/∂output` for the cached pass.
    pub fn backward(&self, cache: &MlpCache, out_grad: &[f64], grad: &mut [f64]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut k = 0;
        for w in self.sizes.windows(2) {
            offsets.push(k);
            k += w[0] * w[1] + w[1];
        }
        let mut delta = out_grad.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let k = offsets[l];
            let input = &cache.acts[l];
            for i in 0..n_out {
                let d = delta[i];
                if d == 0.0 {
                    continue;
                }
                for j in 0..n_in {
                    grad[k + i * n_in + j] += d * input[j];
                }
                grad[k + n_in * n_out + i] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[k..k + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for i in 0..n_out {
                let d = delta[i];
                for j in 0..n_in {
                    prev[j] += w[i * n_in + j] * d;
                }
            }
            // input of layer l is tanh output of layer l-1
            for j in 0..n_in {
                prev[j] *= 1.0 - input[j] * input[j];
            }
            delta = prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, gradient_rel_error, seeded_rng};

    #[test]
    fn backward_matches_finite_difference() {
        let mut rng = seeded_rng(1, 0);
        let net = Mlp::new(&[3, 5, 4, 2], 1.0, &mut rng).unwrap();
        let x = [0.3, -1.2, 0.8];
        let weights = [0.7, -1.3];
        let loss = |m: &Mlp| {
            let y = m.forward(&x);
            weights[0] * y[0] + weights[1] * y[1] * y[1]
        };
        let mut cache = MlpCache::default();
        net.forward_cached(&x, &mut cache);
        let y = cache.output().to_vec();
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&cache, &[weights[0], 2.0 * weights[1] * y[1]], &mut grad);
        let fd = finite_diff_gradient(
            |p| {
                let mut m = net.clone();
                m.params = p.to_vec();
                loss(&m)
            },
            &net.params,
            1e-6,
        );
        assert!(gradient_rel_error(&grad, &fd, 1e-8) < 1e-6);
    }

    #[test]
    fn rejects_empty_layers() {
        let mut rng = seeded_rng(1, 0);
        assert!(Mlp::new(&[3], 1.0, &mut rng).is_err());
        assert!(Mlp::new(&[3, 0, 1], 1.0, &mut rng).is_err());
    }

    #[test]
    fn linear_when_no_hidden_layer() {
        let net = Mlp {
            sizes: vec![2, 1],
            params: vec![2.0, -1.0, 0.5],
        };
        assert_eq!(net.forward(&[1.0, 3.0]), vec![2.0 - 3.0 + 0.5]);
    }
}
