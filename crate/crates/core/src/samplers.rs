//! Reverse-process samplers.
//!
//! Both steppers update every position at once from one score table. The
//! Euler (tau-leaping) step moves with probability `Q_t(x, y) s[y] dt`; the
//! analytic step uses the exact forward kernel over the step interval.

use rand::Rng;
use rayon::prelude::*;

use crate::ctmc::{Family, MatrixSpec, NoiseLevel, NoiseSchedule, Token, TokenSequence};
use crate::error::{Error, Result};
use crate::scores::{CeddScores, DenoisingModel, ScoreModel, ScoreTable};
use crate::util::{sample_categorical, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Euler,
    Analytic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub length: usize,
    pub seed: u64,
    pub prefix: Option<Vec<Token>>,
    /// Generation-time sigma rescale for reconstructed scores.
    pub use_sigma_rescale: bool,
    pub t_start: f64,
    pub t_end: f64,
    /// Finish with an analytic step from `t_end` to zero noise.
    pub denoise: bool,
    /// Keep every intermediate state in the trajectory.
    pub record_states: bool,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, steps: usize, length: usize, seed: u64) -> Self {
        let e4 = (-4.0f64).exp();
        Self {
            kind,
            steps,
            length,
            seed,
            prefix: None,
            use_sigma_rescale: true,
            t_start: 1.0 - e4,
            t_end: e4,
            denoise: true,
            record_states: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.length == 0 {
            return Err(Error::Config("sampler needs steps >= 1 and length >= 1".into()));
        }
        if let Some(p) = &self.prefix {
            if p.len() >= self.length {
                return Err(Error::Config(format!("prefix of {} tokens leaves nothing to sample", p.len())));
            }
        }
        if !(0.0 <= self.t_end && self.t_end < self.t_start && self.t_start < 1.0) {
            return Err(Error::Config(format!("bad time grid [{}, {}]", self.t_end, self.t_start)));
        }
        Ok(())
    }

    /// Time at grid index `k`, `k = 0` being `t_start`.
    pub fn time(&self, k: usize) -> f64 {
        self.t_start - (self.t_start - self.t_end) * k as f64 / self.steps as f64
    }
}

/// Counters for the negative-mass clamping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    /// Categoricals with a negative entry that was clamped to 0.
    pub clamped: usize,
    /// Categoricals with no mass left after clamping; the token stayed put.
    pub fallbacks: usize,
}

impl StepStats {
    pub fn merge(&mut self, other: StepStats) {
        self.clamped += other.clamped;
        self.fallbacks += other.fallbacks;
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    /// States visited, first row drawn from the reference distribution; empty unless recording.
    pub states: Vec<TokenSequence>,
    /// Grid index of the first state off the mask, per position.
    pub unmask_step: Vec<Option<usize>>,
    /// Token taken when leaving the mask.
    pub unmask_token: Vec<Option<Token>>,
    /// Number of token changes after leaving the mask.
    pub changes_after_unmask: Vec<usize>,
    pub final_state: TokenSequence,
    pub stats: StepStats,
}

/// Clamps negatives, normalizes and samples; stays at `stay` when no mass is left.
fn draw<R: Rng + ?Sized>(weights: &mut [f64], stay: Token, stats: &mut StepStats, rng: &mut R) -> Token {
    let mut clamped = false;
    for w in weights.iter_mut() {
        if *w < 0.0 || w.is_nan() {
            *w = 0.0;
            clamped = true;
        }
    }
    if clamped {
        stats.clamped += 1;
    }
    match sample_categorical(weights, rng) {
        Some(i) => i,
        None => {
            stats.fallbacks += 1;
            stay
        }
    }
}

/// Per-position reverse categorical of the Euler step, after clamping and normalization.
pub fn euler_probabilities(
    s_row: &[f64],
    spec: &MatrixSpec,
    sigma: f64,
    sigma_prime: f64,
    t: f64,
    dt: f64,
    x: Token,
) -> Vec<f64> {
    let rates = spec.dynamics_at(sigma, sigma_prime, t).rates;
    let mut w: Vec<f64> = (0..spec.n())
        .map(|y| if y == x { 0.0 } else { spec.rate(rates, x, y) * s_row[y] * dt })
        .collect();
    w[x] = 1.0 - w.iter().sum::<f64>();
    normalize_clamped(&mut w, x);
    w
}

/// Per-position reverse categorical of the analytic step from `level_t` down to `level_prev`.
pub fn analytic_probabilities(
    s_row: &[f64],
    spec: &MatrixSpec,
    level_t: NoiseLevel,
    level_prev: NoiseLevel,
    x: Token,
) -> Vec<f64> {
    let mut w = analytic_weights(s_row, spec, level_t, level_prev, x);
    normalize_clamped(&mut w, x);
    w
}

fn normalize_clamped(w: &mut [f64], stay: Token) {
    for v in w.iter_mut() {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
    let total: f64 = w.iter().sum();
    if total > 0.0 && total.is_finite() {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        w.iter_mut().for_each(|v| *v = 0.0);
        w[stay] = 1.0;
    }
}

/// Unnormalized `exp(dQ)(x, z) * sum_y exp(-dQ)(z, y) s[y]` for every candidate `z`.
pub fn analytic_weights(
    s_row: &[f64],
    spec: &MatrixSpec,
    level_t: NoiseLevel,
    level_prev: NoiseLevel,
    x: Token,
) -> Vec<f64> {
    let delta = level_t.minus(level_prev);
    let fwd = spec.transition_at(delta);
    let inv = spec.transition_at(delta.negated());
    let v = spec.data_tokens();
    let data_sum: f64 = s_row[..v].iter().sum();
    let mut w = vec![0.0; spec.n()];
    for z in 0..v {
        let k = fwd.prob(x, z);
        if k != 0.0 {
            w[z] = k * ((inv.stay - inv.other) * s_row[z] + inv.other * data_sum);
        }
    }
    if let Some(m) = spec.mask() {
        if x == m {
            // the own entry of a masked position is 1 by construction
            w[m] = inv.to_mask * data_sum + 1.0;
        }
    }
    w
}

pub fn euler_step<R: Rng + ?Sized>(
    s: &ScoreTable,
    spec: &MatrixSpec,
    sigma: f64,
    sigma_prime: f64,
    t: f64,
    dt: f64,
    xt: &TokenSequence,
    rng: &mut R,
    stats: &mut StepStats,
) -> TokenSequence {
    let rates = spec.dynamics_at(sigma, sigma_prime, t).rates;
    let n = spec.n();
    let mut out = Vec::with_capacity(xt.len());
    let mut w = vec![0.0; n];
    for (i, &x) in xt.ids().iter().enumerate() {
        let row = s.row(i);
        let mut moved = 0.0;
        for y in 0..n {
            w[y] = if y == x { 0.0 } else { spec.rate(rates, x, y) * row[y] * dt };
            moved += w[y];
        }
        w[x] = 1.0 - moved;
        out.push(draw(&mut w, x, stats, rng));
    }
    out.into()
}

#[allow(clippy::too_many_arguments)]
pub fn analytic_step<R: Rng + ?Sized>(
    s: &ScoreTable,
    spec: &MatrixSpec,
    sigma_t: f64,
    t: f64,
    sigma_prev: f64,
    t_prev: f64,
    xt: &TokenSequence,
    rng: &mut R,
    stats: &mut StepStats,
) -> TokenSequence {
    let level_t = spec.level(sigma_t, t);
    let level_prev = spec.level(sigma_prev, t_prev);
    analytic_step_levels(s, spec, level_t, level_prev, xt, rng, stats)
}

pub fn analytic_step_levels<R: Rng + ?Sized>(
    s: &ScoreTable,
    spec: &MatrixSpec,
    level_t: NoiseLevel,
    level_prev: NoiseLevel,
    xt: &TokenSequence,
    rng: &mut R,
    stats: &mut StepStats,
) -> TokenSequence {
    xt.ids()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut w = analytic_weights(s.row(i), spec, level_t, level_prev, x);
            draw(&mut w, x, stats, rng)
        })
        .collect::<Vec<_>>()
        .into()
}

struct Tracker {
    mask: Option<Token>,
    traj: Trajectory,
    record: bool,
}

impl Tracker {
    fn new(x: &TokenSequence, mask: Option<Token>, record: bool) -> Self {
        let l = x.len();
        let mut traj = Trajectory {
            unmask_step: vec![None; l],
            unmask_token: vec![None; l],
            changes_after_unmask: vec![0; l],
            ..Default::default()
        };
        if mask.is_none() {
            traj.unmask_step = vec![Some(0); l];
            traj.unmask_token = x.ids().iter().map(|&t| Some(t)).collect();
        }
        let mut tr = Self { mask, traj, record };
        tr.observe(None, x, 0);
        tr
    }

    fn observe(&mut self, prev: Option<&TokenSequence>, x: &TokenSequence, k: usize) {
        for (i, &tok) in x.ids().iter().enumerate() {
            let is_mask = Some(tok) == self.mask;
            match self.traj.unmask_token[i] {
                None if !is_mask => {
                    self.traj.unmask_step[i] = Some(k);
                    self.traj.unmask_token[i] = Some(tok);
                }
                Some(_) => {
                    if let Some(p) = prev {
                        if p[i] != tok {
                            self.traj.changes_after_unmask[i] += 1;
                        }
                    }
                }
                None => {}
            }
        }
        if self.record {
            self.traj.states.push(x.clone());
        }
    }
}

fn clamp_prefix(x: &mut TokenSequence, prefix: Option<&[Token]>) {
    if let Some(p) = prefix {
        x.ids_mut()[..p.len()].copy_from_slice(p);
    }
}

fn initial_state<R: Rng + ?Sized>(spec: &MatrixSpec, len: usize, rng: &mut R) -> TokenSequence {
    let reference = spec.reference_distribution();
    (0..len)
        .map(|_| sample_categorical(&reference, rng).expect("reference distribution has mass"))
        .collect::<Vec<_>>()
        .into()
}

/// Runs one reverse trajectory with the RNG stream `index` of `cfg.seed`.
pub fn generate_indexed<M: ScoreModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    index: u64,
) -> Result<(TokenSequence, Trajectory)> {
    cfg.validate()?;
    let prefix = cfg.prefix.as_deref();
    if let Some(p) = prefix {
        TokenSequence::new(p.to_vec()).validate(&spec.vocab(), true)?;
    }
    let mut rng = stream_rng(cfg.seed, index);
    let mut x = initial_state(spec, cfg.length, &mut rng);
    clamp_prefix(&mut x, prefix);
    let mut tracker = Tracker::new(&x, spec.mask(), cfg.record_states);
    let mut stats = StepStats::default();
    let dt = (cfg.t_start - cfg.t_end) / cfg.steps as f64;
    for k in 0..cfg.steps {
        let t = cfg.time(k);
        let t_next = cfg.time(k + 1);
        let (sigma, sigma_prime) = schedule.eval(t)?;
        let s = model.scores(&x, t, sigma)?;
        let mut next = match cfg.kind {
            SamplerKind::Euler => euler_step(&s, spec, sigma, sigma_prime, t, dt, &x, &mut rng, &mut stats),
            SamplerKind::Analytic => {
                let sigma_next = schedule.sigma(t_next)?;
                analytic_step(&s, spec, sigma, t, sigma_next, t_next, &x, &mut rng, &mut stats)
            }
        };
        clamp_prefix(&mut next, prefix);
        tracker.observe(Some(&x), &next, k + 1);
        x = next;
    }
    if cfg.denoise {
        let sigma = schedule.sigma(cfg.t_end)?;
        let s = model.scores(&x, cfg.t_end, sigma)?;
        let mut next =
            analytic_step_levels(&s, spec, spec.level(sigma, cfg.t_end), NoiseLevel::ZERO, &x, &mut rng, &mut stats);
        clamp_prefix(&mut next, prefix);
        tracker.observe(Some(&x), &next, cfg.steps + 1);
        x = next;
    }
    let mut traj = tracker.traj;
    traj.stats = stats;
    traj.final_state = x.clone();
    Ok((x, traj))
}

pub fn generate<M: ScoreModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
) -> Result<(TokenSequence, Trajectory)> {
    generate_indexed(model, cfg, spec, schedule, 0)
}

/// `count` independent trajectories, trajectory `k` on RNG stream `k`.
pub fn generate_many<M: ScoreModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    count: usize,
) -> Result<Vec<(TokenSequence, Trajectory)>> {
    (0..count as u64).into_par_iter().map(|k| generate_indexed(model, cfg, spec, schedule, k)).collect()
}

/// Generation from a denoiser through reconstructed scores.
pub fn generate_from_denoiser<M: DenoisingModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    count: usize,
) -> Result<Vec<(TokenSequence, Trajectory)>> {
    let scores = CeddScores::new(model, *spec, cfg.use_sigma_rescale);
    generate_many(&scores, cfg, spec, schedule, count)
}

fn require_roulette(spec: &MatrixSpec) -> Result<()> {
    match spec.family() {
        Family::Roulette { .. } => Ok(()),
        f => Err(Error::Unsupported(format!("correction counting needs roulette diffusion, not {}", f.name()))),
    }
}

/// Fraction of positions whose final token differs from the token they took
/// when leaving the mask. Under the forward process this is the chance that
/// a token sits on a different data token at the moment it is masked.
pub fn count_corrections(traj: &Trajectory, spec: &MatrixSpec) -> Result<f64> {
    require_roulette(spec)?;
    let l = traj.final_state.len();
    if l == 0 {
        return Err(Error::EmptyEstimate);
    }
    let changed = (0..l).filter(|&i| traj.unmask_token[i].is_some_and(|u| u != traj.final_state[i])).count();
    Ok(changed as f64 / l as f64)
}

/// Fraction of positions that change at least once after leaving the mask,
/// including changes that later return to the unmasked token.
pub fn count_any_change(traj: &Trajectory, spec: &MatrixSpec) -> Result<f64> {
    require_roulette(spec)?;
    let l = traj.final_state.len();
    if l == 0 {
        return Err(Error::EmptyEstimate);
    }
    Ok(traj.changes_after_unmask.iter().filter(|&&c| c > 0).count() as f64 / l as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dt_keeps_state() {
        let spec = MatrixSpec::uniform(4).unwrap();
        let s = ScoreTable::ones(3, 4);
        let x = TokenSequence::new(vec![0, 1, 3]);
        let mut rng = stream_rng(1, 0);
        let mut st = StepStats::default();
        for _ in 0..50 {
            assert_eq!(euler_step(&s, &spec, 1.0, 2.0, 0.5, 0.0, &x, &mut rng, &mut st), x);
        }
    }

    #[test]
    fn absorb_data_tokens_never_move() {
        let spec = MatrixSpec::absorb(4).unwrap();
        let s = ScoreTable::ones(2, 5);
        let x = TokenSequence::new(vec![2, 4]);
        let mut rng = stream_rng(2, 0);
        let mut st = StepStats::default();
        for _ in 0..200 {
            let y = euler_step(&s, &spec, 1.0, 2.0, 0.5, 0.05, &x, &mut rng, &mut st);
            assert_eq!(y[0], 2);
        }
    }

    #[test]
    fn zero_interval_analytic_step_stays() {
        let spec = MatrixSpec::roulette(4, 0.6).unwrap();
        let s = ScoreTable::new(5, vec![0.3, 1.0, 2.0, 0.5, 0.7, 0.4, 0.2, 1.0, 3.0, 1.0]).unwrap();
        let x = TokenSequence::new(vec![1, 4]);
        let mut s = s;
        s.row_mut(1)[4] = 1.0;
        let l = spec.level(1.3, 0.0);
        for i in 0..2 {
            let p = analytic_probabilities(s.row(i), &spec, l, l, x[i]);
            assert!((p[x[i]] - 1.0).abs() < 1e-12, "{p:?}");
        }
    }

    #[test]
    fn correction_requires_roulette() {
        let spec = MatrixSpec::absorb(3).unwrap();
        assert!(matches!(count_corrections(&Trajectory::default(), &spec), Err(Error::Unsupported(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::new(SamplerKind::Euler, 0, 4, 0);
        assert!(c.validate().is_err());
        c.steps = 3;
        c.prefix = Some(vec![0; 4]);
        assert!(c.validate().is_err());
        c.prefix = Some(vec![0; 2]);
        assert!(c.validate().is_ok());
        assert!((c.time(3) - c.t_end).abs() < 1e-15);
    }
}
