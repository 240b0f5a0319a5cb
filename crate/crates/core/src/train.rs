//! Minibatch descent loop shared by the trainers.

use rand::seq::SliceRandom;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numeric::{seeded_rng, sgd_step, streams, KahanSum, OptimizerState};
use crate::report::RunReport;

/// Batch result: summed loss, summed gradient (written into the buffer), clamp count.
pub(crate) struct BatchLoss {
    pub loss_sum: f64,
    pub clamps: u64,
}

/// Runs `config.epochs` epochs of minibatch descent over `n` samples.
///
/// `batch` receives the current parameters, the sample indices of one
/// minibatch and a zeroed gradient buffer to which it adds per-sample
/// gradients. Epoch losses recorded in `report` are sample means plus
/// `offset`.
pub(crate) fn minibatch_descent<F>(
    n: usize,
    config: &TrainConfig,
    params: &mut [f64],
    report: &mut RunReport,
    offset: f64,
    mut batch: F,
) -> Result<()>
where
    F: FnMut(&[f64], &[usize], &mut [f64]) -> Result<BatchLoss>,
{
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(config.seed, streams::SHUFFLE);
    let size = if config.batch_size == 0 || config.batch_size >= n {
        n
    } else {
        config.batch_size
    };
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, params.len());
    let mut grad = vec![0.0; params.len()];
    for epoch in 0..config.epochs {
        if size < n {
            order.shuffle(&mut rng);
        }
        let mut total = KahanSum::new();
        for chunk in order.chunks(size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let out = batch(params, chunk, &mut grad)?;
            report.clamp_count += out.clamps;
            if !out.loss_sum.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total.add(out.loss_sum);
            let scale = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            sgd_step(params, &grad, &mut opt).map_err(|_| Error::Diverged { epoch })?;
        }
        report.record_epoch(total.total() / n as f64 + offset);
    }
    Ok(())
}
