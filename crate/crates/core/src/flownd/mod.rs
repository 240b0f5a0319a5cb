//! Multivariate density estimation with stacked triangular layers.
//!
//! Each layer maps its `n` inputs to `(0, 1)^n`. Node `j` of a layer is a
//! mixture of `K` logistic units whose pre-activations read the layer input
//! `j` through a positive weight and inputs `k < j` through unconstrained
//! weights, so every layer Jacobian is lower triangular with a positive
//! diagonal. Layers after the first read the logit of the previous output.
//! The density of the data is the product of all per-layer diagonal
//! derivatives, and `-ln` of each diagonal entry is a localized loss.
//!
//! All log quantities are evaluated in log space:
//! `A = ln out`, `B = ln(1 - out)` and `E = ln d out / d input`.

mod conditional;

pub use conditional::{
    train_conditional, train_conditional_rows, ConditionalFlowNet, ConditionerCheckpoint,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, TrainMode};
use crate::data::{mean_std, Dataset};
use crate::error::{Error, Result};
use crate::flow1d::{Standardize, DENSITY_FLOOR};
use crate::numeric::{
    quadrature_2d, seeded_rng, sigmoid, softplus, softplus_inv, streams, Real, Rng,
};
use crate::report::RunReport;
use crate::train::{minibatch_descent, BatchLoss};
use crate::verify::VerificationRecord;

/// Positive weights are `softplus(free) + DIAG_FLOOR`.
pub const DIAG_FLOOR: f64 = 1e-6;

/// Parameters of one triangular layer over `n` nodes with `K` units each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriLayer {
    /// For node `j`, predecessor `k < j` and unit `u`:
    /// index `K * j * (j - 1) / 2 + k * K + u`.
    pub tri_weights: Vec<f64>,
    /// `n * K` free parameters of the positive self weights.
    pub diag_free: Vec<f64>,
    /// `n * K` unit biases.
    pub bias: Vec<f64>,
    /// `n * K` unnormalized mixture log-weights.
    pub mix_logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangularFlowNet {
    n: usize,
    units: usize,
    layers: Vec<TriLayer>,
    standardize: Vec<Standardize>,
    /// Internal coordinate `j` reads data column `permutation[j]`.
    permutation: Vec<usize>,
}

/// Outputs and per-layer diagonal derivatives of one forward pass,
/// indexed `[layer][node]` in the net's coordinate order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowOutput {
    pub b: Vec<f64>,
    pub log_diag: Vec<Vec<f64>>,
}

impl FlowOutput {
    pub fn diag(&self) -> Vec<Vec<f64>> {
        self.log_diag
            .iter()
            .map(|r| r.iter().map(|v| v.exp()).collect())
            .collect()
    }
}

/// `-ln` of every diagonal derivative, `[(depth + 1) x n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLossTable {
    pub entries: Vec<Vec<f64>>,
    pub sum: f64,
}

fn sum_terms(entries: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for row in entries {
        for v in row {
            s += v;
        }
    }
    s
}

/// Derived per-layer quantities that only depend on parameters.
pub(crate) struct Prepared {
    d: Vec<Vec<f64>>,
    ln_d: Vec<Vec<f64>>,
    /// Mixture log-weights without conditioning shifts.
    lp: Vec<Vec<f64>>,
}

/// Per-sample forward quantities needed by the backward pass.
#[derive(Default)]
pub(crate) struct Tape {
    l_in: Vec<Vec<f64>>,
    lp: Vec<Vec<f64>>,
    sz: Vec<Vec<f64>>,
    wa: Vec<Vec<f64>>,
    wb: Vec<Vec<f64>>,
    we: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
}

/// How the backward pass routes gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    /// Full gradient of the summed loss.
    Global,
    /// Each layer sees only its own `-E` terms; inputs are constants.
    Local,
}

/// Log-sum-exp of `terms`, writing the softmax weights into `w`.
fn lse_weights(terms: &[f64], w: &mut [f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (wi, t) in w.iter_mut().zip(terms) {
        *wi = (t - m).exp();
        s += *wi;
    }
    for wi in w.iter_mut() {
        *wi /= s;
    }
    m + s.ln()
}

fn lse(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

impl TriangularFlowNet {
    /// Random initialization: the first layer spreads unit locations over
    /// the standardized data range, later layers start near the identity
    /// on `(0, 1)`.
    pub fn new(
        n: usize,
        depth: usize,
        units: usize,
        standardize: Vec<Standardize>,
        permutation: Option<Vec<usize>>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n == 0 || units == 0 {
            return Err(Error::invalid("flow needs n >= 1 and units >= 1"));
        }
        if standardize.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: standardize.len(),
            });
        }
        let permutation = check_permutation(n, permutation)?;
        let mut layers = Vec::with_capacity(depth + 1);
        for i in 0..=depth {
            let tri = (0..tri_len(n, units))
                .map(|_| rng.random_range(-0.1..0.1))
                .collect();
            let mut diag_free = Vec::with_capacity(n * units);
            let mut bias = Vec::with_capacity(n * units);
            for _ in 0..n {
                for u in 0..units {
                    let (d, loc) = if i == 0 {
                        let spread = if units == 1 {
                            0.0
                        } else {
                            -1.5 + 3.0 * u as f64 / (units - 1) as f64
                        };
                        (
                            rng.random_range(1.2..2.0),
                            spread + rng.random_range(-0.2..0.2),
                        )
                    } else {
                        (rng.random_range(0.8..1.2), rng.random_range(-0.3..0.3))
                    };
                    diag_free.push(softplus_inv(d));
                    bias.push(-d * loc);
                }
            }
            layers.push(TriLayer {
                tri_weights: tri,
                diag_free,
                bias,
                mix_logits: vec![0.0; n * units],
            });
        }
        Ok(TriangularFlowNet {
            n,
            units,
            layers,
            standardize,
            permutation,
        })
    }

    pub fn from_layers(
        n: usize,
        units: usize,
        layers: Vec<TriLayer>,
        standardize: Vec<Standardize>,
        permutation: Option<Vec<usize>>,
    ) -> Result<Self> {
        if n == 0 || units == 0 || layers.is_empty() {
            return Err(Error::invalid("flow needs n, units and layers >= 1"));
        }
        if standardize.len() != n || standardize.iter().any(|s| !(s.std > 0.0)) {
            return Err(Error::invalid(
                "one positive standardization per coordinate",
            ));
        }
        for l in &layers {
            let ok = l.tri_weights.len() == tri_len(n, units)
                && l.diag_free.len() == n * units
                && l.bias.len() == n * units
                && l.mix_logits.len() == n * units;
            if !ok {
                return Err(Error::invalid(
                    "layer parameter lengths do not match n and units",
                ));
            }
        }
        let permutation = check_permutation(n, permutation)?;
        Ok(TriangularFlowNet {
            n,
            units,
            layers,
            standardize,
            permutation,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn layers(&self) -> &[TriLayer] {
        &self.layers
    }

    pub fn standardize(&self) -> &[Standardize] {
        &self.standardize
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    fn layer_len(&self) -> usize {
        tri_len(self.n, self.units) + 3 * self.n * self.units
    }

    pub fn n_params(&self) -> usize {
        self.layers.len() * self.layer_len()
    }

    /// Number of conditioning shifts consumed by a forward pass.
    pub fn n_shifts(&self) -> usize {
        self.layers.len() * 2 * self.n * self.units
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(&l.tri_weights);
            p.extend_from_slice(&l.diag_free);
            p.extend_from_slice(&l.bias);
            p.extend_from_slice(&l.mix_logits);
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
        let mut k = 0;
        for l in &mut self.layers {
            for v in [
                &mut l.tri_weights,
                &mut l.diag_free,
                &mut l.bias,
                &mut l.mix_logits,
            ] {
                let len = v.len();
                v.copy_from_slice(&p[k..k + len]);
                k += len;
            }
        }
        Ok(())
    }

    /// Standardized inputs in the net's coordinate order.
    pub fn to_internal(&self, a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.n {
            return Err(Error::Shape {
                expected: self.n,
                got: a.len(),
            });
        }
        if let Some((i, v)) = a.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Domain {
                what: format!("a[{i}]"),
                value: *v,
            });
        }
        Ok(self
            .permutation
            .iter()
            .enumerate()
            .map(|(j, &c)| self.standardize[j].apply(a[c]))
            .collect())
    }

    /// `Σ_j ln std_j`, the log-Jacobian of the standardization.
    pub fn log_scale(&self) -> f64 {
        self.standardize.iter().map(|s| s.std.ln()).sum()
    }

    pub(crate) fn prepare(&self) -> Prepared {
        let nk = self.n * self.units;
        let mut d = Vec::with_capacity(self.layers.len());
        let mut ln_d = Vec::with_capacity(self.layers.len());
        let mut lp = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let dv: Vec<f64> = l
                .diag_free
                .iter()
                .map(|f| softplus(*f) + DIAG_FLOOR)
                .collect();
            ln_d.push(dv.iter().map(|v| v.ln()).collect());
            d.push(dv);
            let mut p = vec![0.0; nk];
            for j in 0..self.n {
                let r = j * self.units..(j + 1) * self.units;
                let z = lse(&l.mix_logits[r.clone()]);
                for idx in r {
                    p[idx] = l.mix_logits[idx] - z;
                }
            }
            lp.push(p);
        }
        Prepared { d, ln_d, lp }
    }

    /// Forward pass on internal standardized coordinates. `shifts` holds, per
    /// layer, `n*K` pre-activation shifts followed by `n*K` mixture-logit
    /// shifts. Returns the log diagonal terms in standardized units.
    pub(crate) fn forward_tape(
        &self,
        u: &[f64],
        shifts: Option<&[f64]>,
        prep: &Prepared,
        tape: &mut Tape,
    ) {
        let (n, k_units) = (self.n, self.units);
        let nk = n * k_units;
        let n_layers = self.layers.len();
        for v in [
            &mut tape.l_in,
            &mut tape.lp,
            &mut tape.sz,
            &mut tape.wa,
            &mut tape.wb,
            &mut tape.we,
            &mut tape.a,
            &mut tape.b,
            &mut tape.e,
        ] {
            v.resize(n_layers, Vec::new());
        }
        let mut ta = vec![0.0; k_units];
        let mut tb = vec![0.0; k_units];
        let mut te = vec![0.0; k_units];
        let mut l_in = u.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (zsh, msh) = match shifts {
                Some(s) => {
                    let base = i * 2 * nk;
                    (
                        Some(&s[base..base + nk]),
                        Some(&s[base + nk..base + 2 * nk]),
                    )
                }
                None => (None, None),
            };
            let lp = &mut tape.lp[i];
            lp.clear();
            match msh {
                None => lp.extend_from_slice(&prep.lp[i]),
                Some(ms) => {
                    lp.extend(layer.mix_logits.iter().zip(ms).map(|(m, s)| m + s));
                    for j in 0..n {
                        let r = j * k_units..(j + 1) * k_units;
                        let z = lse(&lp[r.clone()]);
                        lp[r].iter_mut().for_each(|v| *v -= z);
                    }
                }
            }
            for v in [
                &mut tape.sz[i],
                &mut tape.wa[i],
                &mut tape.wb[i],
                &mut tape.we[i],
            ] {
                v.resize(nk, 0.0);
            }
            for v in [&mut tape.a[i], &mut tape.b[i], &mut tape.e[i]] {
                v.resize(n, 0.0);
            }
            for j in 0..n {
                let toff = tri_offset(j, k_units);
                for uu in 0..k_units {
                    let idx = j * k_units + uu;
                    let mut z = prep.d[i][idx] * l_in[j] + layer.bias[idx];
                    for kk in 0..j {
                        z += layer.tri_weights[toff + kk * k_units + uu] * l_in[kk];
                    }
                    if let Some(zs) = zsh {
                        z += zs[idx];
                    }
                    let e = (-z.abs()).exp();
                    let lg = e.ln_1p();
                    let (sp_pos, sp_neg, s) = if z >= 0.0 {
                        (z + lg, lg, 1.0 / (1.0 + e))
                    } else {
                        (lg, lg - z, e / (1.0 + e))
                    };
                    tape.sz[i][idx] = s;
                    let p = tape.lp[i][idx];
                    ta[uu] = p - sp_neg;
                    tb[uu] = p - sp_pos;
                    te[uu] = p + prep.ln_d[i][idx] - sp_neg - sp_pos;
                }
                let r = j * k_units..(j + 1) * k_units;
                tape.a[i][j] = lse_weights(&ta, &mut tape.wa[i][r.clone()]);
                tape.b[i][j] = lse_weights(&tb, &mut tape.wb[i][r.clone()]);
                tape.e[i][j] = lse_weights(&te, &mut tape.we[i][r]);
            }
            let next: Vec<f64> = (0..n).map(|j| tape.a[i][j] - tape.b[i][j]).collect();
            tape.l_in[i] = std::mem::replace(&mut l_in, next);
        }
    }

    /// Log diagonal table from a tape, in standardized units.
    pub(crate) fn log_diag_of(&self, tape: &Tape) -> Vec<Vec<f64>> {
        (0..self.layers.len())
            .map(|i| {
                (0..self.n)
                    .map(|j| {
                        if i == 0 {
                            tape.e[0][j]
                        } else {
                            tape.e[i][j] - tape.a[i - 1][j] - tape.b[i - 1][j]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Sum of the localized losses of one sample, same order as the table.
    pub(crate) fn sample_loss(&self, tape: &Tape) -> f64 {
        let mut s = 0.0;
        for (i, row) in self.log_diag_of(tape).iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let v = if i == 0 {
                    v - self.standardize[j].std.ln()
                } else {
                    *v
                };
                s += -v;
            }
        }
        s
    }

    /// Adds parameter gradients of the sample loss to `grad` (layout of
    /// [`params`](Self::params)) and, if given, shift gradients to `shift_grad`.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        prep: &Prepared,
        route: Route,
        grad: &mut [f64],
        mut shift_grad: Option<&mut [f64]>,
    ) {
        let (n, k_units) = (self.n, self.units);
        let nk = n * k_units;
        let n_layers = self.layers.len();
        let layer_len = self.layer_len();
        let tl = tri_len(n, k_units);
        let mut l_bar_out = vec![0.0; n];
        let mut z_bar = vec![0.0; k_units];
        let mut lp_bar = vec![0.0; k_units];
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let off = i * layer_len;
            let (g_tri, rest) = grad[off..off + layer_len].split_at_mut(tl);
            let (g_diag, rest) = rest.split_at_mut(nk);
            let (g_bias, g_mix) = rest.split_at_mut(nk);
            let l_in = &tape.l_in[i];
            let mut l_bar_in = vec![0.0; n];
            let has_next = i + 1 < n_layers;
            for j in 0..n {
                let (a_bar, b_bar) = match route {
                    Route::Global => {
                        let own = if has_next { 1.0 } else { 0.0 };
                        (own + l_bar_out[j], own - l_bar_out[j])
                    }
                    Route::Local => (0.0, 0.0),
                };
                let e_bar = -1.0;
                let toff = tri_offset(j, k_units);
                let mut lp_sum = 0.0;
                for uu in 0..k_units {
                    let idx = j * k_units + uu;
                    let s = tape.sz[i][idx];
                    let (wa, wb, we) = (tape.wa[i][idx], tape.wb[i][idx], tape.we[i][idx]);
                    let zb = a_bar * wa * (1.0 - s) - b_bar * wb * s + e_bar * we * (1.0 - 2.0 * s);
                    z_bar[uu] = zb;
                    lp_bar[uu] = a_bar * wa + b_bar * wb + e_bar * we;
                    lp_sum += lp_bar[uu];
                    let d = prep.d[i][idx];
                    let d_bar = e_bar * we / d + zb * l_in[j];
                    g_diag[idx] += d_bar * sigmoid(layer.diag_free[idx]);
                    g_bias[idx] += zb;
                    for kk in 0..j {
                        g_tri[toff + kk * k_units + uu] += zb * l_in[kk];
                    }
                    if route == Route::Global {
                        l_bar_in[j] += zb * d;
                        for kk in 0..j {
                            l_bar_in[kk] += zb * layer.tri_weights[toff + kk * k_units + uu];
                        }
                    }
                }
                for uu in 0..k_units {
                    let idx = j * k_units + uu;
                    let m_bar = lp_bar[uu] - tape.lp[i][idx].exp() * lp_sum;
                    g_mix[idx] += m_bar;
                    if let Some(sg) = shift_grad.as_deref_mut() {
                        let base = i * 2 * nk;
                        sg[base + idx] += z_bar[uu];
                        sg[base + nk + idx] += m_bar;
                    }
                }
            }
            l_bar_out = l_bar_in;
        }
    }

    /// Forward map to `(0,1)^n` for any scalar type; `a` is in data units
    /// and data column order. Used as an independent oracle path.
    pub fn forward_generic<T: Real>(&self, a: &[T], shifts: Option<&[f64]>) -> Vec<T> {
        let (n, k_units) = (self.n, self.units);
        let nk = n * k_units;
        let mut l: Vec<T> = self
            .permutation
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                (a[c] - T::cst(self.standardize[j].mean)).scale(1.0 / self.standardize[j].std)
            })
            .collect();
        let mut out = vec![T::cst(0.0); n];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = l.clone();
            for j in 0..n {
                let mut logits: Vec<f64> =
                    layer.mix_logits[j * k_units..(j + 1) * k_units].to_vec();
                if let Some(s) = shifts {
                    for (uu, m) in logits.iter_mut().enumerate() {
                        *m += s[i * 2 * nk + nk + j * k_units + uu];
                    }
                }
                let mmax = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|m| (m - mmax).exp()).collect();
                let wsum: f64 = w.iter().sum();
                let mut o = T::cst(0.0);
                let mut o_c = T::cst(0.0);
                for uu in 0..k_units {
                    let idx = j * k_units + uu;
                    let mut z = l[j].scale(softplus(layer.diag_free[idx]) + DIAG_FLOOR)
                        + T::cst(layer.bias[idx]);
                    for kk in 0..j {
                        z = z + l[kk]
                            .scale(layer.tri_weights[tri_offset(j, k_units) + kk * k_units + uu]);
                    }
                    if let Some(s) = shifts {
                        z = z + T::cst(s[i * 2 * nk + idx]);
                    }
                    o = o + z.sigmoid().scale(w[uu] / wsum);
                    o_c = o_c + (T::cst(0.0) - z).sigmoid().scale(w[uu] / wsum);
                }
                out[j] = o;
                // logit from both tails keeps precision near 1
                next[j] = o.ln() - o_c.ln();
            }
            l = next;
        }
        out
    }

    /// Outputs and all per-layer diagonal derivatives in data units.
    pub fn forward_flow(&self, a: &[f64]) -> Result<FlowOutput> {
        self.forward_flow_shifted(a, None)
    }

    pub(crate) fn forward_flow_shifted(
        &self,
        a: &[f64],
        shifts: Option<&[f64]>,
    ) -> Result<FlowOutput> {
        let u = self.to_internal(a)?;
        let prep = self.prepare();
        let mut tape = Tape::default();
        self.forward_tape(&u, shifts, &prep, &mut tape);
        let mut log_diag = self.log_diag_of(&tape);
        for (j, v) in log_diag[0].iter_mut().enumerate() {
            *v -= self.standardize[j].std.ln();
        }
        if log_diag.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "triangular layer".into(),
            });
        }
        let last = self.layers.len() - 1;
        let b = (0..self.n).map(|j| tape.a[last][j].exp()).collect();
        Ok(FlowOutput { b, log_diag })
    }

    pub fn local_losses(&self, a: &[f64]) -> Result<LocalLossTable> {
        let out = self.forward_flow(a)?;
        table_from(&out)
    }

    /// `-Σ ln diag`; fails when any diagonal underflows.
    pub fn nll(&self, a: &[f64]) -> Result<f64> {
        Ok(self.local_losses(a)?.sum)
    }

    pub fn density(&self, a: &[f64]) -> Result<f64> {
        Ok((-self.nll(a)?).exp())
    }

    /// Per-coordinate product of diagonals: the density of `a_j` given its
    /// predecessors in the net's order.
    pub fn autoregressive_conditionals(&self, a: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward_flow(a)?;
        Ok((0..self.n)
            .map(|j| out.log_diag.iter().map(|r| r[j]).sum::<f64>().exp())
            .collect())
    }

    /// Mean `-ln` density over samples and its parameter gradient.
    pub fn mean_nll_and_grad(&self, rows: &[Vec<f64>], route: Route) -> Result<(f64, Vec<f64>)> {
        let prep = self.prepare();
        let mut tape = Tape::default();
        let mut grad = vec![0.0; self.n_params()];
        let mut total = 0.0;
        for row in rows {
            let u = self.to_internal(row)?;
            self.forward_tape(&u, None, &prep, &mut tape);
            total += self.sample_loss(&tape);
            self.backward(&tape, &prep, route, &mut grad, None);
        }
        let k = 1.0 / rows.len() as f64;
        grad.iter_mut().for_each(|g| *g *= k);
        Ok((total * k, grad))
    }

    pub fn mean_nll(&self, rows: &[Vec<f64>]) -> Result<f64> {
        let mut s = 0.0;
        for r in rows {
            s += self.nll(r)?;
        }
        Ok(s / rows.len() as f64)
    }

    pub fn to_checkpoint(&self) -> FlowCheckpoint {
        FlowCheckpoint {
            n: self.n,
            depth: self.depth(),
            units: self.units,
            layers: self.layers.clone(),
            conditioner: None,
            standardize: self.standardize.clone(),
            permutation: self.permutation.clone(),
        }
    }

    pub fn from_checkpoint(c: &FlowCheckpoint) -> Result<Self> {
        if c.layers.len() != c.depth + 1 {
            return Err(Error::invalid("depth does not match layer count"));
        }
        Self::from_layers(
            c.n,
            c.units,
            c.layers.clone(),
            c.standardize.clone(),
            Some(c.permutation.clone()),
        )
    }

    /// Density on a 2D grid over coordinates `(i, j)` (data column indices),
    /// other coordinates held at `base`. Rows are `(x_i, x_j, phi)`.
    pub fn density_slice(
        &self,
        dims: (usize, usize),
        range_i: (f64, f64),
        range_j: (f64, f64),
        n_points: usize,
        base: &[f64],
    ) -> Result<Vec<[f64; 3]>> {
        if dims.0 >= self.n || dims.1 >= self.n || dims.0 == dims.1 || n_points < 2 {
            return Err(Error::invalid("bad slice dimensions or grid size"));
        }
        let gi = crate::verify::linspace(range_i.0, range_i.1, n_points);
        let gj = crate::verify::linspace(range_j.0, range_j.1, n_points);
        let mut a = base.to_vec();
        let mut out = Vec::with_capacity(n_points * n_points);
        for &xi in &gi {
            for &xj in &gj {
                a[dims.0] = xi;
                a[dims.1] = xj;
                out.push([xi, xj, self.density(&a).unwrap_or(0.0)]);
            }
        }
        Ok(out)
    }
}

fn table_from(out: &FlowOutput) -> Result<LocalLossTable> {
    let ln_floor = DENSITY_FLOOR.ln();
    if let Some(v) = out.log_diag.iter().flatten().find(|v| **v <= ln_floor) {
        return Err(Error::Underflow { value: v.exp() });
    }
    let entries: Vec<Vec<f64>> = out
        .log_diag
        .iter()
        .map(|r| r.iter().map(|v| -v).collect())
        .collect();
    let sum = sum_terms(&entries);
    Ok(LocalLossTable { entries, sum })
}

fn tri_len(n: usize, units: usize) -> usize {
    units * n * n.saturating_sub(1) / 2
}

fn tri_offset(j: usize, units: usize) -> usize {
    units * j * j.saturating_sub(1) / 2
}

pub(crate) fn check_permutation(n: usize, p: Option<Vec<usize>>) -> Result<Vec<usize>> {
    let p = p.unwrap_or_else(|| (0..n).collect());
    let mut seen = vec![false; n];
    if p.len() != n
        || p.iter()
            .any(|&i| i >= n || std::mem::replace(&mut seen[i], true))
    {
        return Err(Error::invalid(format!(
            "{p:?} is not a permutation of 0..{n}"
        )));
    }
    Ok(p)
}

/// On-disk form of a triangular flow, optionally with a conditioner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowCheckpoint {
    pub n: usize,
    pub depth: usize,
    pub units: usize,
    pub layers: Vec<TriLayer>,
    pub conditioner: Option<ConditionerCheckpoint>,
    pub standardize: Vec<Standardize>,
    pub permutation: Vec<usize>,
}

pub(crate) fn select_columns(data: &Dataset, names: &[String]) -> Result<Vec<String>> {
    let names = if names.is_empty() {
        data.numeric_names()
    } else {
        names.to_vec()
    };
    if names.is_empty() {
        return Err(Error::invalid("no numeric columns selected"));
    }
    Ok(names)
}

pub(crate) fn standardize_columns(rows: &[Vec<f64>], names: &[String]) -> Result<Vec<Standardize>> {
    (0..names.len())
        .map(|c| {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let (mean, std) = mean_std(&col);
            if !std.is_finite() || !mean.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("standard deviation of column {}", names[c]),
                });
            }
            if !(std > 0.0) {
                return Err(Error::ZeroVariance {
                    column: names[c].clone(),
                });
            }
            Ok(Standardize { mean, std })
        })
        .collect()
}

/// Trains a triangular flow on the numeric columns `config.columns.x`
/// (all numeric columns when empty) in `config.model.mode`.
pub fn train_nd(data: &Dataset, config: &TrainConfig) -> Result<(TriangularFlowNet, RunReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let names = select_columns(data, &config.columns.x)?;
    let rows = data.numeric_rows(&names)?;
    train_nd_rows(&rows, &names, config)
}

pub fn train_nd_rows(
    rows: &[Vec<f64>],
    names: &[String],
    config: &TrainConfig,
) -> Result<(TriangularFlowNet, RunReport)> {
    let route = match config.model.mode {
        TrainMode::Global => Route::Global,
        TrainMode::Local => Route::Local,
        TrainMode::SequentialLocal => {
            return Err(Error::invalid(
                "flownd supports modes global and local, not sequential_local",
            ))
        }
    };
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = names.len();
    let perm = check_permutation(n, config.model.permutation.clone())?;
    let by_column = standardize_columns(rows, names)?;
    let standardize = perm.iter().map(|&c| by_column[c]).collect();
    let mut rng = seeded_rng(config.seed, streams::INIT);
    let mut net = TriangularFlowNet::new(
        n,
        config.model.depth,
        config.model.units,
        standardize,
        Some(perm),
        &mut rng,
    )?;
    let us: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| net.to_internal(r))
        .collect::<Result<_>>()?;
    let (mut report, started) = RunReport::start("flownd", config);
    let offset = net.log_scale();
    report.initial_loss = net.mean_nll(rows)?;

    let mut params = net.params();
    let mut tape = Tape::default();
    let ln_floor = DENSITY_FLOOR.ln();
    minibatch_descent(
        rows.len(),
        config,
        &mut params,
        &mut report,
        offset,
        |p, batch, grad| {
            net.set_params(p)?;
            let prep = net.prepare();
            let mut loss_sum = 0.0;
            let mut clamps = 0;
            for &s in batch {
                net.forward_tape(&us[s], None, &prep, &mut tape);
                let ld = net.log_diag_of(&tape);
                clamps += ld.iter().flatten().filter(|v| **v <= ln_floor).count() as u64;
                loss_sum += net.sample_loss(&tape) - offset;
                net.backward(&tape, &prep, route, grad, None);
            }
            Ok(BatchLoss { loss_sum, clamps })
        },
    )?;
    net.set_params(&params)?;

    if n == 2 {
        let mass = normalization_2d(&net, 8.0, 200)?;
        report.checks.push(VerificationRecord::within(
            "flownd.normalization",
            "2d simpson mass over standardized +-8",
            mass,
            config.tolerance_or("flownd.normalization.lo", 0.98),
            1.0 + 1e-9,
        ));
    }
    report.checks.push(VerificationRecord::at_most(
        "flownd.clamps",
        "underflow clamps",
        report.clamp_count as f64,
        0.0,
    ));
    report.finish(started);
    Ok((net, report))
}

/// 2D Simpson mass of the density over `mean ± half_width·std` per column.
pub fn normalization_2d(net: &TriangularFlowNet, half_width: f64, n_panels: usize) -> Result<f64> {
    if net.n() != 2 {
        return Err(Error::invalid("2d normalization needs n = 2"));
    }
    // standardization is per internal coordinate; map back to data columns
    let mut ranges = [(0.0, 0.0); 2];
    for (j, &c) in net.permutation().iter().enumerate() {
        let s = net.standardize()[j];
        ranges[c] = (s.mean - half_width * s.std, s.mean + half_width * s.std);
    }
    quadrature_2d(
        |x, y| net.density(&[x, y]).unwrap_or(0.0),
        ranges[0],
        ranges[1],
        n_panels,
    )
}

#[cfg(test)]
mod tests;
