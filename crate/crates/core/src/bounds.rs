//! Monte Carlo upper bounds on the per-token cross-entropy.
//!
//! `J1` averages the full score-entropy loss over `t`, `x0` and `x_t`. `J2`
//! drops the `K` terms and adds back a constant that depends only on the
//! forward process; see [`j2_constant`].

use rand::distr::Open01;
use rand::Rng;
use rayon::prelude::*;

use crate::ctmc::{corrupt_sequence, Family, MatrixSpec, NoiseSchedule, ScheduleKind, TokenSequence};
use crate::error::{Error, Result};
use crate::losses::sedd_loss_position;
use crate::scores::ScoreModel;
use crate::util::{mean_stderr, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundKind {
    J1,
    J2,
}

impl BoundKind {
    pub fn name(&self) -> &'static str {
        match self {
            BoundKind::J1 => "J1",
            BoundKind::J2 => "J2",
        }
    }
}

/// `H(p_ref) - integral over [0,1] of E sum_{y != x_t} Q_t(y, x_t) dt` for
/// sequences of length `len`.
///
/// Masked families need the schedule whose mask level reaches `-log eps` at
/// `t = 1`: absorb with log-linear, roulette with the matching
/// roulette-log-linear schedule. The uniform family accepts any schedule.
pub fn j2_constant(spec: &MatrixSpec, schedule: &NoiseSchedule, len: usize) -> Result<f64> {
    let l = len as f64;
    let n = spec.n() as f64;
    let eps = schedule.eps();
    match (spec.family(), schedule.kind()) {
        (Family::Absorb, ScheduleKind::LogLinear) => Ok(l * (eps - 1.0)),
        (Family::Roulette { p_m }, ScheduleKind::RouletteLogLinear { p_m: sp })
            if (p_m - sp).abs() <= 1e-12 =>
        {
            Ok((1.0 - (1.0 - p_m) / (n - 1.0)) * (l / p_m) * (eps - 1.0))
        }
        (Family::Uniform, _) => {
            let v = spec.data_tokens() as f64;
            Ok(l * v.ln() - (1.0 - 1.0 / v) * l * (schedule.sigma_end() - schedule.sigma_start()))
        }
        (family, kind) => Err(Error::Config(format!(
            "no closed-form J2 constant for {} diffusion with {kind:?}",
            family.name()
        ))),
    }
}

/// Checks that a family/schedule pairing supports the J2 constant.
pub fn validate_pairing(spec: &MatrixSpec, schedule: &NoiseSchedule) -> Result<()> {
    j2_constant(spec, schedule, 1).map(|_| ())
}

/// Open time interval the bound integrands are averaged over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWindow {
    pub lo: f64,
    pub hi: f64,
}

impl Default for TimeWindow {
    fn default() -> Self {
        let e4 = (-4.0f64).exp();
        Self { lo: e4, hi: 1.0 - e4 }
    }
}

impl TimeWindow {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("time window ({lo}, {hi}) is not inside [0,1]")));
        }
        Ok(Self { lo, hi })
    }

    /// The whole unit interval.
    pub fn full() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }

    /// Maps `u in (0,1)` into the window, never returning an endpoint of `[0,1]`.
    pub fn at(&self, u: f64) -> f64 {
        let t = self.lo + u * (self.hi - self.lo);
        t.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
    }
}

/// Per-draw values of the `J1` and `J2` integrands (the latter without its constant), both divided by `L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrandDraw {
    pub t: f64,
    pub j1: f64,
    pub j2: f64,
}

/// Corrupts `x0` at `t` and evaluates both integrands on the same `x_t`.
///
/// The score model must not apply the generation-time sigma rescale.
pub fn bound_integrands<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    x0: &TokenSequence,
    t: f64,
    rng: &mut R,
) -> Result<IntegrandDraw> {
    let xt = corrupt_sequence(x0, t, spec, schedule, rng)?;
    integrands_at(model, spec, schedule, x0, &xt, t)
}

/// Both integrands for a given corrupted sequence.
pub fn integrands_at<M: ScoreModel + ?Sized>(
    model: &M,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    x0: &TokenSequence,
    xt: &TokenSequence,
    t: f64,
) -> Result<IntegrandDraw> {
    let (sigma, sigma_prime) = schedule.eval(t)?;
    let s = model.scores(xt, t, sigma)?;
    let l = x0.len() as f64;
    let (mut j1, mut j2) = (0.0, 0.0);
    for i in 0..x0.len() {
        let row = s.row(i);
        j1 += sedd_loss_position(spec, sigma, sigma_prime, t, row, x0[i], xt[i], true)?;
        j2 += sedd_loss_position(spec, sigma, sigma_prime, t, row, x0[i], xt[i], false)?;
    }
    Ok(IntegrandDraw { t, j1: j1 / l, j2: j2 / l })
}

pub fn j1_integrand<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    x0: &TokenSequence,
    t: f64,
    rng: &mut R,
) -> Result<f64> {
    Ok(bound_integrands(model, spec, schedule, x0, t, rng)?.j1)
}

pub fn j2_integrand<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    x0: &TokenSequence,
    t: f64,
    rng: &mut R,
) -> Result<f64> {
    Ok(bound_integrands(model, spec, schedule, x0, t, rng)?.j2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batching {
    /// Independent `(x0, t)` pairs.
    Pooled,
    /// Each drawn sequence is corrupted at `t_per_sequence` times and averaged.
    PerSequence { t_per_sequence: usize },
}

impl Batching {
    /// 64 batches of 16 time points per sequence.
    pub const PER_SEQUENCE_DEFAULT: Batching = Batching::PerSequence { t_per_sequence: 1024 };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConfig {
    pub n_samples: usize,
    pub batching: Batching,
    pub window: TimeWindow,
    /// Stratify the time draws over the window.
    pub stratified: bool,
    pub seed: u64,
}

impl BoundConfig {
    pub fn pooled(n_samples: usize, seed: u64) -> Self {
        Self { n_samples, batching: Batching::Pooled, window: TimeWindow::default(), stratified: false, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundEstimate {
    pub which: BoundKind,
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
    /// Constant added to the J2 average, per token; 0 for J1.
    pub analytic_constant: f64,
    pub perplexity: f64,
}

impl BoundEstimate {
    fn new(which: BoundKind, mean: f64, stderr: f64, n_samples: usize, analytic_constant: f64) -> Self {
        Self { which, mean, stderr, n_samples, analytic_constant, perplexity: mean.exp() }
    }
}

/// Raw per-unit values (one per pooled draw, or one per sequence) for both bounds.
pub fn bound_samples<M: ScoreModel + ?Sized>(
    model: &M,
    dataset: &[TokenSequence],
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    cfg: &BoundConfig,
) -> Result<Vec<IntegrandDraw>> {
    if cfg.n_samples == 0 || dataset.is_empty() {
        return Err(Error::EmptyEstimate);
    }
    let n = cfg.n_samples;
    let draw_time = |rng: &mut rand_chacha::ChaCha8Rng, k: usize, total: usize| {
        let u: f64 = rng.sample(Open01);
        let u = if cfg.stratified { (k as f64 + u) / total as f64 } else { u };
        cfg.window.at(u)
    };
    (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(cfg.seed, k as u64);
            let x0 = &dataset[rng.random_range(0..dataset.len())];
            match cfg.batching {
                Batching::Pooled => {
                    let t = draw_time(&mut rng, k, n);
                    bound_integrands(model, spec, schedule, x0, t, &mut rng)
                }
                Batching::PerSequence { t_per_sequence } => {
                    let m = t_per_sequence.max(1);
                    let (mut j1, mut j2) = (0.0, 0.0);
                    for j in 0..m {
                        let t = draw_time(&mut rng, j, m);
                        let d = bound_integrands(model, spec, schedule, x0, t, &mut rng)?;
                        j1 += d.j1;
                        j2 += d.j2;
                    }
                    Ok(IntegrandDraw { t: f64::NAN, j1: j1 / m as f64, j2: j2 / m as f64 })
                }
            }
        })
        .collect()
}

/// Estimates both bounds from one set of draws.
pub fn estimate_bounds<M: ScoreModel + ?Sized>(
    model: &M,
    dataset: &[TokenSequence],
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    cfg: &BoundConfig,
) -> Result<(BoundEstimate, BoundEstimate)> {
    let draws = bound_samples(model, dataset, spec, schedule, cfg)?;
    let len = dataset[0].len();
    Ok((summarize(BoundKind::J1, &draws, spec, schedule, len)?, summarize(BoundKind::J2, &draws, spec, schedule, len)?))
}

pub fn estimate_bound<M: ScoreModel + ?Sized>(
    which: BoundKind,
    model: &M,
    dataset: &[TokenSequence],
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    cfg: &BoundConfig,
) -> Result<BoundEstimate> {
    if which == BoundKind::J2 {
        validate_pairing(spec, schedule)?;
    }
    let draws = bound_samples(model, dataset, spec, schedule, cfg)?;
    summarize(which, &draws, spec, schedule, dataset[0].len())
}

pub fn summarize(
    which: BoundKind,
    draws: &[IntegrandDraw],
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    len: usize,
) -> Result<BoundEstimate> {
    if draws.is_empty() {
        return Err(Error::EmptyEstimate);
    }
    let values: Vec<f64> = draws.iter().map(|d| if which == BoundKind::J1 { d.j1 } else { d.j2 }).collect();
    let (mean, stderr) = mean_stderr(&values);
    let constant = match which {
        BoundKind::J1 => 0.0,
        BoundKind::J2 => j2_constant(spec, schedule, len)? / len as f64,
    };
    Ok(BoundEstimate::new(which, mean + constant, stderr, draws.len(), constant))
}

/// One row of the results file.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundRecord {
    pub dataset: String,
    pub family: String,
    pub schedule: String,
    pub seed: u64,
    pub estimate: BoundEstimate,
}

impl BoundRecord {
    pub const CSV_HEADER: &'static str = "dataset,estimator,family,schedule,seed,n_samples,mean,stderr,perplexity";

    pub fn csv_row(&self) -> String {
        let e = &self.estimate;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.dataset,
            e.which.name(),
            self.family,
            self.schedule,
            self.seed,
            e.n_samples,
            e.mean,
            e.stderr,
            e.perplexity
        )
    }
}
