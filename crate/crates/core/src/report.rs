use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::verify::VerificationRecord;

/// Outcome of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub mode: String,
    /// Mean training loss after each epoch (nats).
    pub epoch_loss: Vec<f64>,
    /// Mean loss of the initial model, before any update.
    pub initial_loss: f64,
    pub checks: Vec<VerificationRecord>,
    pub wall_seconds: f64,
    /// Densities that hit the underflow floor.
    pub clamp_count: u64,
    /// Step halvings performed by integrator guards.
    pub guard_count: u64,
    /// First epoch at which the loss change fell below `config.tolerance`.
    pub steps_to_tolerance: Option<usize>,
    pub config: TrainConfig,
}

#[derive(Serialize)]
struct MetricLine<'a> {
    epoch: usize,
    loss: f64,
    model: &'a str,
    mode: &'a str,
}

impl RunReport {
    pub(crate) fn start(model: &str, config: &TrainConfig) -> (Self, Instant) {
        (
            RunReport {
                model: model.to_string(),
                mode: config.model.mode.as_str().to_string(),
                epoch_loss: Vec::new(),
                initial_loss: f64::NAN,
                checks: Vec::new(),
                wall_seconds: 0.0,
                clamp_count: 0,
                guard_count: 0,
                steps_to_tolerance: None,
                config: config.clone(),
            },
            Instant::now(),
        )
    }

    pub(crate) fn record_epoch(&mut self, loss: f64) {
        if self.steps_to_tolerance.is_none() {
            if let Some(prev) = self.epoch_loss.last() {
                if (prev - loss).abs() < self.config.tolerance {
                    self.steps_to_tolerance = Some(self.epoch_loss.len());
                }
            }
        }
        self.epoch_loss.push(loss);
    }

    pub(crate) fn finish(&mut self, started: Instant) {
        self.wall_seconds = started.elapsed().as_secs_f64();
    }

    pub fn final_loss(&self) -> f64 {
        self.epoch_loss.last().copied().unwrap_or(self.initial_loss)
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// One JSON object per epoch. Contains no timing, so it is reproducible.
    pub fn write_metrics_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (epoch, &loss) in self.epoch_loss.iter().enumerate() {
            let line = MetricLine {
                epoch,
                loss,
                model: &self.model,
                mode: &self.mode,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn metrics_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_metrics_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits utf-8")
    }
}
