//! Minibatch training of the tabular model.

use cedd_core::losses::{cedd_loss, sedd_log_score_gradient, sedd_loss_position};
use cedd_core::model::{Optimizer, TabularModel};
use cedd_core::scores::{ScoreModel, SeddScores};
use cedd_core::util::stream_rng;
use cedd_core::{corrupt_sequence, MatrixSpec, NoiseSchedule, TokenSequence};
use rand::distr::Open01;
use rand::Rng;

use crate::config::{LossMode, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Mean loss per token over the batch, weights included.
    pub loss: f64,
    /// Mean loss weight over the batch.
    pub weight: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,loss,weight";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.step, self.loss, self.weight)
    }
}

/// Runs `cfg.train.steps` optimizer steps. Every draw of step `k`, slot `b`
/// uses RNG stream `k * batch + b`, so runs are reproducible. Noise times are
/// uniform on (0, 1); the open interval keeps sigma away from zero.
pub fn train(
    model: &mut TabularModel,
    data: &[TokenSequence],
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    cfg: &RunConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(CliError::EmptyCorpus);
    }
    let tc = &cfg.train;
    let weights = cfg.weights();
    let optimizer = Optimizer::adam(tc.lr);
    let mut grad = vec![0.0; model.param_count()];
    let mut logs = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (mut loss, mut weight_sum, mut tokens) = (0.0, 0.0, 0usize);
        for b in 0..tc.batch {
            let mut rng = stream_rng(tc.seed, (step * tc.batch + b) as u64);
            let x0 = &data[rng.random_range(0..data.len())];
            let t: f64 = rng.sample(Open01);
            let xt = corrupt_sequence(x0, t, spec, schedule, &mut rng)?;
            let scale = 1.0 / tc.batch as f64;
            match tc.loss {
                LossMode::Cedd => {
                    let f = cedd_core::scores::DenoisingModel::predict(model, &xt, t)?;
                    let report = cedd_loss(&f, x0, t, weights, true)?;
                    loss += report.total;
                    weight_sum += report.weight;
                    model.accumulate_gradient(x0, &xt, t, report.weight * scale, &mut grad)?;
                }
                LossMode::Sedd => {
                    let (sigma, sigma_prime) = schedule.eval(t)?;
                    let s = SeddScores { model: &*model, spec: *spec }.scores(&xt, t, sigma)?;
                    let v = spec.data_tokens();
                    let mut rows = vec![0.0; xt.len() * v];
                    for i in 0..xt.len() {
                        let row = s.row(i);
                        loss += sedd_loss_position(spec, sigma, sigma_prime, t, row, x0[i], xt[i], false)?;
                        let g = sedd_log_score_gradient(spec, sigma, sigma_prime, t, row, x0[i], xt[i])?;
                        for (dst, src) in rows[i * v..(i + 1) * v].iter_mut().zip(&g[..v]) {
                            *dst = src * scale;
                        }
                    }
                    weight_sum += 1.0;
                    model.accumulate_raw_gradient(&xt, t, &rows, &mut grad)?;
                }
            }
            tokens += x0.len();
        }
        let entry = StepLog { step, loss: loss / tokens as f64, weight: weight_sum / tc.batch as f64 };
        if !entry.loss.is_finite() {
            return Err(CliError::Diverged { step, loss: entry.loss });
        }
        model.apply_gradient(&grad, optimizer);
        on_step(&entry);
        logs.push(entry);
    }
    Ok(logs)
}
