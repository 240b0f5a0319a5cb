/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.total()
}

pub fn compensated_mean(xs: &[f64]) -> f64 {
    compensated_sum(xs.iter().copied()) / xs.len() as f64
}

/// Elementwise accumulation of per-sample gradient vectors.
pub struct GradAccumulator {
    acc: Vec<KahanSum>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        GradAccumulator {
            acc: vec![KahanSum::new(); n],
        }
    }

    pub fn add(&mut self, g: &[f64]) {
        for (a, v) in self.acc.iter_mut().zip(g) {
            a.add(*v);
        }
    }

    pub fn mean(&self, count: usize) -> Vec<f64> {
        self.acc.iter().map(|a| a.total() / count as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cancelled_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn order_independent_to_rounding() {
        let xs: Vec<f64> = (1..2000).map(|i| 1.0 / i as f64).collect();
        let mut rev = xs.clone();
        rev.reverse();
        assert!((compensated_sum(xs.iter().copied()) - compensated_sum(rev)).abs() < 1e-14);
    }
}
