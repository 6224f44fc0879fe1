//! Dense brute-force counterparts of every closed form, for tiny state spaces.
//!
//! Nothing here reuses the grouped formulas of the engine: rate matrices are
//! built entry by entry from their jump-probability matrices, exponentials go
//! through a scaling-and-squaring Taylor series, and sequence distributions
//! are enumerated.

use nalgebra::DMatrix;
use rand::distr::Open01;
use rand::Rng;
use rayon::prelude::*;

use crate::bounds::j2_constant;
use crate::ctmc::{Family, MatrixSpec, NoiseSchedule, Token, TokenSequence};
use crate::error::{domain, Error, Result};
use crate::losses::kernel_k;
use crate::scores::{rescale_sigma_for_generation, DenoisingModel, ProbTable, ScoreModel, ScoreTable};
use crate::util::{entropy, mean_stderr, sample_categorical, stream_rng};

/// Largest per-position state count the dense oracle accepts.
pub const MAX_STATES: usize = 64;
/// Largest number of enumerated sequences.
pub const MAX_SEQUENCES: usize = 4096;

fn mask_fraction(spec: &MatrixSpec, t: f64) -> f64 {
    match spec.family() {
        Family::Uniform => 0.0,
        Family::Absorb => 1.0,
        Family::Roulette { p_m } => p_m,
        Family::ERoulette { a } => {
            if t <= 0.0 {
                0.0
            } else {
                t.powf(1.0 / (a * t))
            }
        }
    }
}

fn mask_fraction_derivative(spec: &MatrixSpec, t: f64) -> f64 {
    match spec.family() {
        Family::ERoulette { a } if t > 0.0 => {
            // d/dt exp(ln t / (a t))
            let g = (1.0 - t.ln()) / (a * t * t);
            t.powf(1.0 / (a * t)) * g
        }
        _ => 0.0,
    }
}

/// Jump-probability matrix `P` with `P(to, from)`, for `p_m` frozen at `t`.
pub fn jump_matrix(spec: &MatrixSpec, t: f64) -> DMatrix<f64> {
    let n = spec.n();
    let v = spec.data_tokens();
    let mut p = DMatrix::zeros(n, n);
    match spec.family() {
        Family::Uniform => p.fill(1.0 / v as f64),
        Family::Absorb => {
            for j in 0..n {
                p[(n - 1, j)] = 1.0;
            }
        }
        Family::Roulette { .. } | Family::ERoulette { .. } => {
            let pm = mask_fraction(spec, t);
            for j in 0..n - 1 {
                for i in 0..n - 1 {
                    p[(i, j)] = (1.0 - pm) / (n - 1) as f64;
                }
                p[(n - 1, j)] = pm;
            }
            p[(n - 1, n - 1)] = 1.0;
        }
    }
    p
}

/// `Q = P - I` with `p_m` frozen at `t`.
pub fn dense_generator(spec: &MatrixSpec, t: f64) -> DMatrix<f64> {
    let n = spec.n();
    jump_matrix(spec, t) - DMatrix::identity(n, n)
}

/// Masking and uniform-resampling generators over the same state space.
fn component_generators(spec: &MatrixSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = spec.n();
    let v = spec.data_tokens();
    let mut absorb = DMatrix::zeros(n, n);
    let mut uniform = DMatrix::zeros(n, n);
    for j in 0..v {
        if spec.mask().is_some() {
            absorb[(n - 1, j)] = 1.0;
            absorb[(j, j)] = -1.0;
        }
        for i in 0..v {
            uniform[(i, j)] = 1.0 / v as f64;
        }
        uniform[(j, j)] -= 1.0;
    }
    (absorb, uniform)
}

/// Instantaneous rate matrix of the token process at time `t`.
pub fn dense_rate_matrix(spec: &MatrixSpec, sigma: f64, sigma_prime: f64, t: f64) -> DMatrix<f64> {
    match spec.family() {
        Family::ERoulette { .. } => {
            let (qa, qu) = component_generators(spec);
            let p = mask_fraction(spec, t);
            let mask_rate = mask_fraction_derivative(spec, t) * sigma + p * sigma_prime;
            qa * mask_rate + qu * (sigma_prime - mask_rate)
        }
        _ => dense_generator(spec, t) * sigma_prime,
    }
}

/// `exp(sigma Q)` by scaling and squaring with a Taylor series.
pub fn expm_series(q: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    if n != q.ncols() {
        return domain("matrix exponential needs a square matrix");
    }
    if n > MAX_STATES {
        return Err(Error::TooLarge(format!("{n} states exceed the dense oracle limit {MAX_STATES}")));
    }
    let a = q * sigma;
    let norm = (0..n).map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    if !norm.is_finite() {
        return domain("non-finite matrix");
    }
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    if squarings > 60 {
        return Err(Error::TooLarge(format!("norm {norm} exceeds the squaring budget")));
    }
    let b = a / 2f64.powi(squarings);
    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..200 {
        term = &term * &b / k as f64;
        result += &term;
        if term.abs().max() < 1e-17 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

/// `exp(sigma Q)` for the family, with `p_m` frozen at `t`.
pub fn dense_transition(spec: &MatrixSpec, sigma: f64, t: f64) -> Result<DMatrix<f64>> {
    expm_series(&dense_generator(spec, t), sigma)
}

/// Exponential over the interval between two times, exact for the time-varying family too.
fn dense_interval(spec: &MatrixSpec, from: (f64, f64), to: (f64, f64), sign: f64) -> Result<DMatrix<f64>> {
    let (qa, qu) = component_generators(spec);
    let level = |(sigma, t): (f64, f64)| {
        let p = mask_fraction(spec, t);
        (p * sigma, (1.0 - p) * sigma)
    };
    let (a1, b1) = level(from);
    let (a0, b0) = level(to);
    expm_series(&(qa * (a1 - a0) + qu * (b1 - b0)), sign)
}

/// Distribution over all `width^len` sequences, position 0 most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    width: usize,
    len: usize,
    probs: Vec<f64>,
}

impl JointDist {
    pub fn new(width: usize, len: usize, probs: Vec<f64>) -> Result<Self> {
        let size = checked_size(width, len)?;
        if probs.len() != size {
            return domain(format!("expected {size} probabilities, got {}", probs.len()));
        }
        if probs.iter().any(|&p| !(p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return domain("joint distribution is not a simplex");
        }
        Ok(Self { width, len, probs })
    }

    pub fn uniform(width: usize, len: usize) -> Result<Self> {
        let size = checked_size(width, len)?;
        Ok(Self { width, len, probs: vec![1.0 / size as f64; size] })
    }

    pub fn point_mass(width: usize, seq: &[Token]) -> Result<Self> {
        let size = checked_size(width, seq.len())?;
        let mut probs = vec![0.0; size];
        let d = Self { width, len: seq.len(), probs: Vec::new() };
        probs[d.index(seq)] = 1.0;
        Ok(Self { probs, ..d })
    }

    /// Product of independent per-position marginals.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self> {
        let width = marginals.first().map_or(0, Vec::len);
        let size = checked_size(width, marginals.len())?;
        let mut d = Self { width, len: marginals.len(), probs: vec![0.0; size] };
        for k in 0..size {
            let seq = d.sequence(k);
            d.probs[k] = seq.iter().enumerate().map(|(i, &x)| marginals[i][x]).product();
        }
        Ok(d)
    }

    /// Flat Dirichlet draw.
    pub fn random<R: Rng + ?Sized>(width: usize, len: usize, rng: &mut R) -> Result<Self> {
        let size = checked_size(width, len)?;
        let mut probs: Vec<f64> = (0..size).map(|_| -rng.sample::<f64, _>(Open01).ln()).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        Ok(Self { width, len, probs })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, seq: &[Token]) -> f64 {
        self.probs[self.index(seq)]
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.probs)
    }

    pub fn index(&self, seq: &[Token]) -> usize {
        seq.iter().fold(0, |acc, &x| acc * self.width + x)
    }

    pub fn sequence(&self, mut index: usize) -> Vec<Token> {
        let mut seq = vec![0; self.len];
        for slot in seq.iter_mut().rev() {
            *slot = index % self.width;
            index /= self.width;
        }
        seq
    }

    pub fn marginal(&self, i: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.width];
        for (k, &p) in self.probs.iter().enumerate() {
            m[self.sequence(k)[i]] += p;
        }
        m
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSequence {
        let k = sample_categorical(&self.probs, rng).expect("distribution has mass");
        TokenSequence::new(self.sequence(k))
    }
}

fn checked_size(width: usize, len: usize) -> Result<usize> {
    if width == 0 || len == 0 {
        return domain("empty joint distribution");
    }
    let size = (width as f64).powi(len as i32);
    if size > MAX_SEQUENCES as f64 {
        return Err(Error::TooLarge(format!("{width}^{len} sequences exceed {MAX_SEQUENCES}")));
    }
    Ok(width.pow(len as u32))
}

/// Push-forward of `p0` through the per-position kernel `k` (an `n x V` block).
fn push_forward(p0: &JointDist, k: &DMatrix<f64>, n: usize) -> Result<JointDist> {
    let size = checked_size(n, p0.len())?;
    let mut out = JointDist { width: n, len: p0.len(), probs: vec![0.0; size] };
    let sources: Vec<(Vec<Token>, f64)> =
        (0..p0.probs.len()).filter(|&k| p0.probs[k] > 0.0).map(|k| (p0.sequence(k), p0.probs[k])).collect();
    for idx in 0..size {
        let x = out.sequence(idx);
        out.probs[idx] = sources
            .iter()
            .map(|(x0, p)| p * x.iter().zip(x0).map(|(&a, &b)| k[(a, b)]).product::<f64>())
            .sum();
    }
    Ok(out)
}

/// Exact distribution of `x_t` over all `n^L` sequences.
pub fn exact_sequence_distribution(
    p0: &JointDist,
    spec: &MatrixSpec,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<JointDist> {
    distribution_at_sigma(p0, spec, schedule.sigma(t)?, t)
}

pub fn distribution_at_sigma(p0: &JointDist, spec: &MatrixSpec, sigma: f64, t: f64) -> Result<JointDist> {
    if p0.width != spec.data_tokens() {
        return domain("clean distribution width differs from the data vocabulary");
    }
    push_forward(p0, &dense_transition(spec, sigma, t)?, spec.n())
}

/// `s[i][y] = p_t(x with x^i = y) / p_t(x)`.
pub fn exact_scores(p_t: &JointDist, x: &TokenSequence) -> Result<ScoreTable> {
    let px = p_t.prob(x.ids());
    if px == 0.0 {
        return domain("sequence has zero probability");
    }
    let mut rows = Vec::with_capacity(x.len());
    let mut y = x.ids().to_vec();
    for i in 0..x.len() {
        let mut row = vec![0.0; p_t.width];
        for (tok, r) in row.iter_mut().enumerate() {
            y[i] = tok;
            *r = p_t.prob(&y) / px;
        }
        y[i] = x[i];
        rows.push(row);
    }
    ScoreTable::from_rows(rows)
}

/// Per-position posterior `p(x0^i = h | x_t)`.
pub fn posterior_marginals(p0: &JointDist, spec: &MatrixSpec, sigma: f64, t: f64, xt: &TokenSequence) -> Result<ProbTable> {
    let tr = spec.transition(sigma, t);
    let v = spec.data_tokens();
    let mut rows = vec![vec![0.0; v]; xt.len()];
    let mut z = 0.0;
    for (k, &p) in p0.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let x0 = p0.sequence(k);
        let w = p * xt.ids().iter().zip(&x0).map(|(&a, &b)| tr.prob(a, b)).product::<f64>();
        z += w;
        for (i, &h) in x0.iter().enumerate() {
            rows[i][h] += w;
        }
    }
    if z == 0.0 {
        return domain("noisy sequence is unreachable from the clean distribution");
    }
    rows.iter_mut().for_each(|r| r.iter_mut().for_each(|p| *p /= z));
    ProbTable::from_rows(&rows)
}

/// Denoiser that returns exact posteriors of a known clean distribution.
pub struct ExactPosteriorModel {
    pub p0: JointDist,
    pub spec: MatrixSpec,
    pub schedule: NoiseSchedule,
}

impl DenoisingModel for ExactPosteriorModel {
    fn data_tokens(&self) -> usize {
        self.spec.data_tokens()
    }

    fn predict(&self, xt: &TokenSequence, t: f64) -> Result<ProbTable> {
        posterior_marginals(&self.p0, &self.spec, self.schedule.sigma(t)?, t, xt)
    }
}

/// Exact concrete scores of a known clean distribution, computed per query.
pub struct ExactScoreModel {
    spec: MatrixSpec,
    support: Vec<(Vec<Token>, f64)>,
}

impl ExactScoreModel {
    pub fn new(p0: &JointDist, spec: MatrixSpec) -> Self {
        let support = (0..p0.probs.len()).filter(|&k| p0.probs[k] > 0.0).map(|k| (p0.sequence(k), p0.probs[k])).collect();
        Self { spec, support }
    }
}

impl ScoreModel for ExactScoreModel {
    fn scores(&self, xt: &TokenSequence, t: f64, sigma: f64) -> Result<ScoreTable> {
        let n = self.spec.n();
        let v = self.spec.data_tokens();
        let tr = self.spec.transition(sigma, t);
        let kernel: Vec<f64> = (0..n).flat_map(|a| (0..v).map(move |b| (a, b))).map(|(a, b)| tr.prob(a, b)).collect();
        let len = xt.len();
        let mut weights = vec![0.0; len * n];
        let mut px = 0.0;
        let mut factors = vec![0.0; len];
        for (x0, p) in &self.support {
            for j in 0..len {
                factors[j] = kernel[xt[j] * v + x0[j]];
            }
            px += p * factors.iter().product::<f64>();
            for i in 0..len {
                let rest: f64 = p * factors.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, f)| f).product::<f64>();
                if rest == 0.0 {
                    continue;
                }
                for y in 0..n {
                    weights[i * n + y] += rest * kernel[y * v + x0[i]];
                }
            }
        }
        if px == 0.0 {
            return domain("noisy sequence is unreachable from the clean distribution");
        }
        for i in 0..len {
            for y in 0..n {
                let w = &mut weights[i * n + y];
                *w = if y == xt[i] { 1.0 } else { *w / px };
            }
        }
        ScoreTable::new(n, weights)
    }
}

/// Both sides of the entropy identity and their gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// `H(p_1) - integral of E_{x_t} sum_y Q_t(x_t, y) K(p_t(y) / p_t(x_t)) dt`,
/// the sum running over all one-position neighbours including `y = x_t`.
/// The time integral is taken in `sigma` on the warped midpoint grid
/// `sigma = sigma_1 u^3`, which absorbs the logarithmic blow-up near zero noise.
pub fn entropy_identity_check(
    p0: &JointDist,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    n_quad: usize,
) -> Result<EntropyCheck> {
    if matches!(spec.family(), Family::ERoulette { .. }) {
        return Err(Error::Unsupported("entropy identity needs a time-homogeneous generator".into()));
    }
    if n_quad == 0 {
        return Err(Error::EmptyEstimate);
    }
    let (s0, s1) = (schedule.sigma_start(), schedule.sigma_end());
    let q = dense_generator(spec, 0.0);
    let n = spec.n();
    let nodes: Vec<f64> = (0..n_quad)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let u = (k as f64 + 0.5) / n_quad as f64;
            let sigma = s0 + (s1 - s0) * u.powi(3);
            let jac = 3.0 * (s1 - s0) * u * u / n_quad as f64;
            let pt = distribution_at_sigma(p0, spec, sigma, 0.0)?;
            let mut acc = 0.0;
            for (idx, &px) in pt.probs.iter().enumerate() {
                if px <= 0.0 {
                    continue;
                }
                let x = pt.sequence(idx);
                let mut y = x.clone();
                for i in 0..x.len() {
                    for tok in 0..n {
                        let rate = q[(x[i], tok)];
                        if rate == 0.0 {
                            continue;
                        }
                        y[i] = tok;
                        acc += px * rate * kernel_k(pt.prob(&y) / px);
                    }
                    y[i] = x[i];
                }
            }
            Ok(acc * jac)
        })
        .collect::<Result<Vec<_>>>()?;
    let integral: f64 = nodes.iter().sum();
    let p1 = distribution_at_sigma(p0, spec, s1, 0.0)?;
    let lhs = p0.entropy();
    let rhs = p1.entropy() - integral;
    Ok(EntropyCheck { lhs, rhs, gap: (lhs - rhs).abs() })
}

/// Entropy of the reference distribution over length-`len` sequences.
pub fn reference_entropy(spec: &MatrixSpec, len: usize) -> f64 {
    len as f64 * entropy(&spec.reference_distribution())
}

/// Monte Carlo estimate of `-integral of E sum_i sum_{y != x_t^i} Q_t(y, x_t^i) dt`
/// with uniform clean tokens, `t ~ U(0,1)`, and `x_t` drawn from dense kernels.
pub fn mc_integral_prop1(
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    len: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::EmptyEstimate);
    }
    let v = spec.data_tokens();
    let n = spec.n();
    let draws = (0..n_samples)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let mut rng = stream_rng(seed, k as u64);
            let t: f64 = rng.sample::<f64, _>(Open01).min(1.0 - f64::EPSILON);
            let (sigma, sigma_prime) = schedule.eval(t)?;
            let kernel = dense_transition(spec, sigma, t)?;
            let rates = dense_rate_matrix(spec, sigma, sigma_prime, t);
            let mut acc = 0.0;
            for _ in 0..len {
                let x0 = rng.random_range(0..v);
                let col: Vec<f64> = (0..n).map(|i| kernel[(i, x0)]).collect();
                let xt = sample_categorical(&col, &mut rng).unwrap_or(x0);
                acc -= (0..n).filter(|&y| y != xt).map(|y| rates[(y, xt)]).sum::<f64>();
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_stderr(&draws))
}

/// Monte Carlo check of the J2 constant: returns `(closed form, MC mean, MC stderr)`.
pub fn j2_constant_check(
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    len: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let closed = j2_constant(spec, schedule, len)?;
    let (mean, se) = mc_integral_prop1(spec, schedule, len, n_samples, seed)?;
    Ok((closed, mean + reference_entropy(spec, len), se))
}

/// `sum_h p(y | h) / p(xt | h) f[h]` over every clean token that can reach `xt`,
/// with `f` renormalized over those tokens and the own entry set to 1.
pub fn brute_force_score_row(
    f_row: &[f64],
    spec: &MatrixSpec,
    sigma: f64,
    t: f64,
    xt: Token,
    rescale: bool,
) -> Result<Vec<f64>> {
    let masked = Some(xt) == spec.mask();
    let sigma = if rescale && !masked { rescale_sigma_for_generation(spec.family(), sigma) } else { sigma };
    let k = dense_transition(spec, sigma, t)?;
    let n = spec.n();
    let reachable: Vec<Token> = (0..spec.data_tokens()).filter(|&h| k[(xt, h)] > 0.0).collect();
    if reachable.is_empty() {
        return domain("no clean token reaches the noisy token");
    }
    let z: f64 = reachable.iter().map(|&h| f_row[h]).sum();
    let mut s = vec![0.0; n];
    for (y, slot) in s.iter_mut().enumerate() {
        *slot = reachable.iter().map(|&h| k[(y, h)] / k[(xt, h)] * f_row[h] / z).sum();
    }
    s[xt] = 1.0;
    Ok(s)
}

/// `sum_{y != xt} Q_t(xt, y) l(p(y | x0) / p(xt | x0), s[y])` over the full vocabulary.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_loss_row(
    spec: &MatrixSpec,
    sigma: f64,
    sigma_prime: f64,
    t: f64,
    s_row: &[f64],
    x0: Token,
    xt: Token,
    include_k: bool,
) -> Result<f64> {
    let k = dense_transition(spec, sigma, t)?;
    let q = dense_rate_matrix(spec, sigma, sigma_prime, t);
    let den = k[(xt, x0)];
    if den == 0.0 {
        return Err(Error::Unreachable { xt, from: x0 });
    }
    let mut total = 0.0;
    for y in (0..spec.n()).filter(|&y| y != xt) {
        let w = q[(xt, y)];
        if w == 0.0 {
            continue;
        }
        let a = k[(y, x0)] / den;
        let b = s_row[y];
        let mut term = if a == 0.0 {
            b
        } else {
            if !(b > 0.0) {
                return Err(Error::NonPositiveScore { index: y, value: b });
            }
            b - a * b.ln()
        };
        if include_k {
            term += kernel_k(a);
        }
        total += w * term;
    }
    Ok(total)
}

/// Unnormalized reverse weights `exp(dQ)(x, z) sum_y exp(-dQ)(z, y) s[y]` from dense exponentials.
pub fn dense_analytic_weights(
    s_row: &[f64],
    spec: &MatrixSpec,
    (sigma_t, t): (f64, f64),
    (sigma_prev, t_prev): (f64, f64),
    x: Token,
) -> Result<Vec<f64>> {
    let fwd = dense_interval(spec, (sigma_t, t), (sigma_prev, t_prev), 1.0)?;
    let inv = dense_interval(spec, (sigma_t, t), (sigma_prev, t_prev), -1.0)?;
    let n = spec.n();
    let s = nalgebra::DVector::from_column_slice(s_row);
    let back = &inv * s;
    Ok((0..n).map(|z| fwd[(x, z)] * back[z]).collect())
}

/// Forward simulation of a single token under roulette noise with total
/// `sigma_total`: the fraction of tokens that sit on a different data token
/// at the moment they are masked.
pub fn simulate_mask_hit(spec: &MatrixSpec, sigma_total: f64, n_traj: usize, seed: u64) -> Result<(f64, f64)> {
    let Family::Roulette { p_m } = spec.family() else {
        return Err(Error::Unsupported("mask-hit simulation needs roulette diffusion".into()));
    };
    let v = spec.data_tokens();
    let hits: Vec<f64> = (0..n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let mut level = 0.0;
            let mut tok = 0usize;
            loop {
                level -= rng.sample::<f64, _>(Open01).ln();
                if level > sigma_total {
                    return 0.0;
                }
                if rng.random::<f64>() < p_m {
                    return f64::from(u8::from(tok != 0));
                }
                tok = rng.random_range(0..v);
            }
        })
        .collect();
    Ok(mean_stderr(&hits))
}

/// Distance between the forward distribution at noise `sigma` and the reference distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryGap {
    pub total_variation: f64,
    /// `KL(p_sigma || p_ref)`; infinite when `p_sigma` puts mass where the reference has none.
    pub kl: f64,
}

pub fn boundary_gap(p0: &JointDist, spec: &MatrixSpec, sigma: f64, t: f64) -> Result<BoundaryGap> {
    let pt = distribution_at_sigma(p0, spec, sigma, t)?;
    let reference = spec.reference_distribution();
    let mut tv = 0.0;
    let mut kl = 0.0;
    for (idx, &p) in pt.probs.iter().enumerate() {
        let r: f64 = pt.sequence(idx).iter().map(|&x| reference[x]).product();
        tv += (p - r).abs();
        if p > 0.0 {
            kl += if r > 0.0 { p * (p / r).ln() } else { f64::INFINITY };
        }
    }
    Ok(BoundaryGap { total_variation: tv / 2.0, kl })
}

/// One line of the verification table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let gap = (lhs - rhs).abs();
        Self { name: name.into(), lhs, rhs, gap, tolerance, pass: gap <= tolerance }
    }

    /// A row whose gap is already a maximum error over many comparisons.
    pub fn max_error(name: impl Into<String>, gap: f64, tolerance: f64) -> Self {
        Self { name: name.into(), lhs: gap, rhs: 0.0, gap, tolerance, pass: gap <= tolerance }
    }
}

/// Closed form, its oracle, and the test binding them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleBinding {
    pub closed_form: &'static str,
    pub oracle: &'static str,
    pub test: &'static str,
}

/// Every closed form with its brute-force counterpart and binding test.
pub const ORACLE_MANIFEST: &[OracleBinding] = &[
    OracleBinding { closed_form: "MatrixSpec::transition_prob", oracle: "expm_series", test: "closed_form_exponentials_match_dense" },
    OracleBinding { closed_form: "MatrixSpec::conditional_ratio", oracle: "dense_transition", test: "conditional_ratios_match_dense" },
    OracleBinding { closed_form: "MatrixSpec::mask_hit_probability", oracle: "simulate_mask_hit", test: "mask_hit_probability_matches_simulation" },
    OracleBinding { closed_form: "corrupt_sequence", oracle: "dense_transition", test: "corruption_frequencies_match_dense_column" },
    OracleBinding { closed_form: "probs_to_scores", oracle: "brute_force_score_row", test: "score_reconstruction_matches_mixture" },
    OracleBinding { closed_form: "sedd_scale_factor", oracle: "dense_transition", test: "scale_factor_matches_average_ratio" },
    OracleBinding { closed_form: "sedd_loss_position", oracle: "brute_force_loss_row", test: "grouped_loss_matches_full_sum" },
    OracleBinding { closed_form: "sedd_log_score_gradient", oracle: "brute_force_loss_row", test: "log_score_gradient_matches_finite_differences" },
    OracleBinding { closed_form: "j2_constant", oracle: "mc_integral_prop1", test: "j2_constant_matches_monte_carlo" },
    OracleBinding { closed_form: "analytic_weights", oracle: "dense_analytic_weights", test: "analytic_weights_match_dense" },
    OracleBinding { closed_form: "euler_probabilities", oracle: "dense_rate_matrix", test: "euler_probabilities_match_dense_rates" },
    OracleBinding { closed_form: "posterior_marginals", oracle: "exact_scores", test: "posterior_scores_match_joint_ratios" },
];

/// Default tiny-configuration verification suite.
pub fn verify_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let mut rng = stream_rng(seed, u64::MAX);
    let ll = NoiseSchedule::loglinear(NoiseSchedule::DEFAULT_EPS)?;

    for spec in [
        MatrixSpec::uniform(4)?,
        MatrixSpec::absorb(4)?,
        MatrixSpec::roulette(4, 0.35)?,
        MatrixSpec::eroulette(4, 1.5)?,
    ] {
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let sigma = rng.random_range(0.01..10.0);
            let t = rng.random_range(0.05..0.95);
            let dense = dense_transition(&spec, sigma, t)?;
            for from in 0..spec.n() {
                for to in 0..spec.n() {
                    worst = worst.max((dense[(to, from)] - spec.transition_prob(sigma, t, to, from)).abs());
                }
            }
        }
        rows.push(CheckRow::max_error(format!("expm/{}", spec.family().name()), worst, 1e-9));

        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let sigma = rng.random_range(0.05..6.0);
            let t = rng.random_range(0.05..0.95);
            let mut f: Vec<f64> = (0..spec.data_tokens()).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = f.iter().sum();
            f.iter_mut().for_each(|p| *p /= z);
            let xt = rng.random_range(0..spec.n());
            let a = crate::scores::probs_to_scores(&f, &spec, sigma, t, xt, false)?;
            let b = brute_force_score_row(&f, &spec, sigma, t, xt, false)?;
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max((x - y).abs() / y.abs().max(1.0));
            }
        }
        rows.push(CheckRow::max_error(format!("scores/{}", spec.family().name()), worst, 1e-9));
    }

    let p0 = JointDist::random(3, 2, &mut rng)?;
    for spec in [MatrixSpec::absorb(3)?, MatrixSpec::uniform(3)?] {
        let c = entropy_identity_check(&p0, &spec, &ll, 2048)?;
        rows.push(CheckRow::new(format!("entropy-identity/{}", spec.family().name()), c.lhs, c.rhs, 1e-3));
    }

    for (spec, schedule) in [
        (MatrixSpec::absorb(4)?, ll),
        (MatrixSpec::uniform(4)?, ll),
        (MatrixSpec::roulette(4, 0.35)?, NoiseSchedule::roulette_loglinear(0.35, NoiseSchedule::DEFAULT_EPS)?),
    ] {
        let (closed, mean, se) = j2_constant_check(&spec, &schedule, 4, 20_000, seed)?;
        rows.push(CheckRow::new(format!("j2-constant/{}", spec.family().name()), closed, mean, 3.0 * se));
    }

    for spec in [MatrixSpec::absorb(3)?, MatrixSpec::uniform(3)?] {
        let g = boundary_gap(&p0, &spec, ll.sigma_end(), 1.0)?;
        rows.push(CheckRow::new(format!("boundary-tv/{}", spec.family().name()), g.total_variation, 0.0, 0.01));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_identity_and_inverse() {
        let spec = MatrixSpec::roulette(5, 0.3).unwrap();
        let q = dense_generator(&spec, 0.0);
        let e0 = expm_series(&q, 0.0).unwrap();
        assert_eq!(e0, DMatrix::identity(6, 6));
        let e = expm_series(&q, 2.3).unwrap();
        let inv = expm_series(&q, -2.3).unwrap();
        assert!(((&e * &inv) - DMatrix::identity(6, 6)).abs().max() < 1e-10);
    }

    #[test]
    fn idempotent_jump_matrix_closed_form() {
        for spec in [MatrixSpec::absorb(4).unwrap(), MatrixSpec::uniform(4).unwrap()] {
            let q = dense_generator(&spec, 0.0);
            for &sigma in &[0.1, 1.0, 4.0] {
                let e = expm_series(&q, sigma).unwrap();
                let closed = DMatrix::identity(spec.n(), spec.n()) + &q * (1.0 - (-sigma).exp());
                assert!((e - closed).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn expm_columns_are_stochastic() {
        let spec = MatrixSpec::eroulette(6, 0.7).unwrap();
        let e = dense_transition(&spec, 7.0, 0.6).unwrap();
        for j in 0..7 {
            assert!((e.column(j).sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn size_guards() {
        assert!(matches!(JointDist::uniform(5, 6), Err(Error::TooLarge(_))));
        let big = DMatrix::<f64>::zeros(65, 65);
        assert!(matches!(expm_series(&big, 1.0), Err(Error::TooLarge(_))));
    }

    #[test]
    fn joint_indexing_round_trip() {
        let d = JointDist::uniform(3, 3).unwrap();
        for k in 0..27 {
            assert_eq!(d.index(&d.sequence(k)), k);
        }
    }
}
