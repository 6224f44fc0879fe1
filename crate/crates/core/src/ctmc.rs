//! Token-level CTMC: vocabulary, noise schedules, the rate-matrix families and
//! their closed-form exponentials.
//!
//! Every family is a mix of two commuting generators over `n` states: the
//! masking generator (every data token jumps to the mask at rate 1) and the
//! uniform generator (every data token jumps to a uniformly chosen data token
//! at rate 1, itself included). A family only decides how the cumulative noise
//! `sigma` is split between the two, so every transition probability is
//! computed from a [`NoiseLevel`] `(mask, resample)`:
//!
//! | family    | mask         | resample          |
//! |-----------|--------------|-------------------|
//! | uniform   | 0            | sigma             |
//! | absorb    | sigma        | 0                 |
//! | roulette  | p_m sigma    | (1 - p_m) sigma   |
//! | eroulette | p_m(t) sigma | (1 - p_m(t)) sigma|
//!
//! Token ids are 0-based; when a mask state exists it is always the last id.

use rand::Rng;

use crate::error::{domain, Error, Result};
use crate::util::sample_categorical;

pub type Token = usize;

/// Data vocabulary plus the optional mask state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    data: usize,
    has_mask: bool,
}

impl Vocab {
    pub fn new(data: usize, has_mask: bool) -> Result<Self> {
        if data < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 2 data tokens, got {data}"
            )));
        }
        Ok(Self { data, has_mask })
    }

    /// Number of data tokens `V`.
    pub fn data_tokens(&self) -> usize {
        self.data
    }

    /// Number of states per position `n` (`V + 1` with a mask, else `V`).
    pub fn states(&self) -> usize {
        self.data + usize::from(self.has_mask)
    }

    pub fn has_mask(&self) -> bool {
        self.has_mask
    }

    pub fn mask(&self) -> Option<Token> {
        self.has_mask.then_some(self.data)
    }

    pub fn is_mask(&self, tok: Token) -> bool {
        self.has_mask && tok == self.data
    }
}

/// Fixed-length token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(Vec<Token>);

impl TokenSequence {
    pub fn new(ids: Vec<Token>) -> Self {
        Self(ids)
    }

    /// Checks every id against the vocabulary; `clean` additionally forbids the mask.
    pub fn validate(&self, vocab: &Vocab, clean: bool) -> Result<()> {
        for (i, &tok) in self.0.iter().enumerate() {
            if tok >= vocab.states() {
                return domain(format!(
                    "token {tok} at position {i} outside 0..{}",
                    vocab.states()
                ));
            }
            if clean && vocab.is_mask(tok) {
                return domain(format!("clean sequence contains the mask at position {i}"));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> &[Token] {
        &self.0
    }

    pub fn ids_mut(&mut self) -> &mut [Token] {
        &mut self.0
    }

    pub fn into_ids(self) -> Vec<Token> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<Token>> for TokenSequence {
    fn from(ids: Vec<Token>) -> Self {
        Self(ids)
    }
}

impl std::ops::Index<usize> for TokenSequence {
    type Output = Token;
    fn index(&self, i: usize) -> &Token {
        &self.0[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// `sigma(t) = -log(1 - (1 - eps) t)`
    LogLinear,
    /// `sigma(t) = sigma_min^(1-t) sigma_max^t`
    Geometric { sigma_min: f64, sigma_max: f64 },
    /// The log-linear schedule divided by `p_m`, so masking arrives at the
    /// same rate as absorb diffusion under the log-linear schedule.
    RouletteLogLinear { p_m: f64 },
}

/// Total noise `sigma(t)` on `t in [0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    eps: f64,
}

impl NoiseSchedule {
    pub const DEFAULT_EPS: f64 = 1e-3;

    pub fn new(kind: ScheduleKind, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::Config(format!("schedule floor eps={eps} must lie in (0,1)")));
        }
        match kind {
            ScheduleKind::LogLinear => {}
            ScheduleKind::Geometric { sigma_min, sigma_max } => {
                if !(sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite()) {
                    return Err(Error::Config(format!(
                        "geometric schedule needs 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
                    )));
                }
            }
            ScheduleKind::RouletteLogLinear { p_m } => {
                if !(p_m > 0.0 && p_m <= 1.0) {
                    return Err(Error::Config(format!(
                        "roulette-loglinear schedule needs p_m in (0,1], got {p_m}"
                    )));
                }
            }
        }
        Ok(Self { kind, eps })
    }

    pub fn loglinear(eps: f64) -> Result<Self> {
        Self::new(ScheduleKind::LogLinear, eps)
    }

    pub fn geometric(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::Geometric { sigma_min, sigma_max }, Self::DEFAULT_EPS)
    }

    pub fn roulette_loglinear(p_m: f64, eps: f64) -> Result<Self> {
        Self::new(ScheduleKind::RouletteLogLinear { p_m }, eps)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Returns `(sigma(t), sigma'(t))`.
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..1.0).contains(&t) {
            return domain(format!("schedule time t={t} outside [0,1)"));
        }
        let (s, ds) = match self.kind {
            ScheduleKind::LogLinear => loglinear(self.eps, t),
            ScheduleKind::RouletteLogLinear { p_m } => {
                let (s, ds) = loglinear(self.eps, t);
                (s / p_m, ds / p_m)
            }
            ScheduleKind::Geometric { sigma_min, sigma_max } => {
                let s = sigma_min.powf(1.0 - t) * sigma_max.powf(t);
                (s, s * (sigma_max / sigma_min).ln())
            }
        };
        Ok((s, ds))
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.eval(t)?.0)
    }

    /// `sigma(0)`.
    pub fn sigma_start(&self) -> f64 {
        match self.kind {
            ScheduleKind::Geometric { sigma_min, .. } => sigma_min,
            _ => 0.0,
        }
    }

    /// `lim_{t -> 1} sigma(t)`, which is finite for every schedule here.
    pub fn sigma_end(&self) -> f64 {
        match self.kind {
            ScheduleKind::LogLinear => -self.eps.ln(),
            ScheduleKind::RouletteLogLinear { p_m } => -self.eps.ln() / p_m,
            ScheduleKind::Geometric { sigma_max, .. } => sigma_max,
        }
    }

    /// Inverse of `sigma`, for `sigma` in `[sigma_start, sigma_end)`.
    pub fn time_for_sigma(&self, sigma: f64) -> Result<f64> {
        if !(sigma >= self.sigma_start() && sigma < self.sigma_end()) {
            return domain(format!(
                "sigma={sigma} outside [{}, {})",
                self.sigma_start(),
                self.sigma_end()
            ));
        }
        let t = match self.kind {
            ScheduleKind::LogLinear => -(-sigma).exp_m1() / (1.0 - self.eps),
            ScheduleKind::RouletteLogLinear { p_m } => -(-sigma * p_m).exp_m1() / (1.0 - self.eps),
            ScheduleKind::Geometric { sigma_min, sigma_max } => {
                (sigma / sigma_min).ln() / (sigma_max / sigma_min).ln()
            }
        };
        Ok(t.clamp(0.0, 1.0 - f64::EPSILON))
    }
}

fn loglinear(eps: f64, t: f64) -> (f64, f64) {
    let k = 1.0 - eps;
    (-(-k * t).ln_1p(), k / (1.0 - k * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Uniform,
    Absorb,
    Roulette { p_m: f64 },
    /// Roulette with a time-dependent mask fraction `p_m(t) = t^(1/(a t))`.
    ERoulette { a: f64 },
}

impl Family {
    pub fn needs_mask(&self) -> bool {
        !matches!(self, Family::Uniform)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Uniform => "uniform",
            Family::Absorb => "absorb",
            Family::Roulette { .. } => "roulette",
            Family::ERoulette { .. } => "eroulette",
        }
    }
}

/// Cumulative noise split into its masking and uniform-resampling parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub mask: f64,
    pub resample: f64,
}

impl NoiseLevel {
    pub const ZERO: NoiseLevel = NoiseLevel { mask: 0.0, resample: 0.0 };

    pub fn minus(self, other: NoiseLevel) -> NoiseLevel {
        NoiseLevel { mask: self.mask - other.mask, resample: self.resample - other.resample }
    }

    pub fn negated(self) -> NoiseLevel {
        NoiseLevel { mask: -self.mask, resample: -self.resample }
    }
}

/// Instantaneous rates of the two generators at time `t` (already multiplied
/// by the schedule derivative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub mask: f64,
    pub resample: f64,
}

/// Everything a loss or sampler needs about the forward process at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dynamics {
    pub t: f64,
    pub sigma: f64,
    pub sigma_prime: f64,
    pub level: NoiseLevel,
    pub rates: Rates,
}

/// Entries of `exp(level)`: the only three distinct values a data column can hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    /// `P(mask | data token)`
    pub to_mask: f64,
    /// `P(j | j)` for a data token `j`
    pub stay: f64,
    /// `P(i | j)` for distinct data tokens
    pub other: f64,
    level: NoiseLevel,
    data: usize,
    mask: Option<Token>,
}

impl Transition {
    pub fn level(&self) -> NoiseLevel {
        self.level
    }

    pub fn prob(&self, to: Token, from: Token) -> f64 {
        match self.mask {
            Some(m) if from == m => f64::from(u8::from(to == m)),
            Some(m) if to == m => self.to_mask,
            _ if to == from => self.stay,
            _ => self.other,
        }
    }

    /// `other / to_mask`, i.e. `p(i | j) / p(mask | j)` for `i != j`.
    pub fn other_over_mask(&self) -> f64 {
        -(-self.level.resample).exp_m1() / (self.data as f64 * self.level.mask.exp_m1())
    }

    /// `stay / to_mask`.
    pub fn stay_over_mask(&self) -> f64 {
        let g = -(-self.level.resample).exp_m1();
        (1.0 - (self.data as f64 - 1.0) / self.data as f64 * g) / self.level.mask.exp_m1()
    }

    /// `stay / other`.
    pub fn stay_over_other(&self) -> f64 {
        1.0 + self.data as f64 / self.level.resample.exp_m1()
    }

    /// `other / stay`.
    pub fn other_over_stay(&self) -> f64 {
        1.0 / self.stay_over_other()
    }
}

/// A rate-matrix family over a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixSpec {
    family: Family,
    vocab: Vocab,
}

impl MatrixSpec {
    pub fn new(family: Family, vocab: Vocab) -> Result<Self> {
        if family.needs_mask() != vocab.has_mask() {
            return Err(Error::Config(format!(
                "{} diffusion {} a mask state",
                family.name(),
                if family.needs_mask() { "requires" } else { "forbids" }
            )));
        }
        match family {
            Family::Roulette { p_m } if !(0.0..=1.0).contains(&p_m) => {
                return Err(Error::Config(format!("roulette p_m={p_m} outside [0,1]")));
            }
            Family::ERoulette { a } if !(a > 0.0 && a.is_finite()) => {
                return Err(Error::Config(format!("eroulette exponent a={a} must be positive")));
            }
            _ => {}
        }
        Ok(Self { family, vocab })
    }

    /// Builds the `MatrixSpec` with the vocabulary the family requires.
    pub fn with_data_tokens(family: Family, data_tokens: usize) -> Result<Self> {
        Self::new(family, Vocab::new(data_tokens, family.needs_mask())?)
    }

    pub fn uniform(v: usize) -> Result<Self> {
        Self::with_data_tokens(Family::Uniform, v)
    }

    pub fn absorb(v: usize) -> Result<Self> {
        Self::with_data_tokens(Family::Absorb, v)
    }

    pub fn roulette(v: usize, p_m: f64) -> Result<Self> {
        Self::with_data_tokens(Family::Roulette { p_m }, v)
    }

    pub fn eroulette(v: usize, a: f64) -> Result<Self> {
        Self::with_data_tokens(Family::ERoulette { a }, v)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn n(&self) -> usize {
        self.vocab.states()
    }

    pub fn data_tokens(&self) -> usize {
        self.vocab.data_tokens()
    }

    pub fn mask(&self) -> Option<Token> {
        self.vocab.mask()
    }

    /// Fraction of the noise that goes into masking at time `t`.
    pub fn mask_fraction(&self, t: f64) -> f64 {
        match self.family {
            Family::Uniform => 0.0,
            Family::Absorb => 1.0,
            Family::Roulette { p_m } => p_m,
            Family::ERoulette { a } => eroulette_fraction(a, t).0,
        }
    }

    pub fn level(&self, sigma: f64, t: f64) -> NoiseLevel {
        let p = self.mask_fraction(t);
        NoiseLevel { mask: p * sigma, resample: (1.0 - p) * sigma }
    }

    /// The levels as the sum of the two generator amounts; when the family has
    /// a fixed fraction this is `rates = (p sigma', (1 - p) sigma')`.
    pub fn rates(&self, sigma: f64, sigma_prime: f64, t: f64) -> Rates {
        match self.family {
            Family::ERoulette { a } => {
                let (p, dp) = eroulette_fraction(a, t);
                let mask = dp * sigma + p * sigma_prime;
                Rates { mask, resample: sigma_prime - mask }
            }
            _ => {
                let p = self.mask_fraction(t);
                Rates { mask: p * sigma_prime, resample: (1.0 - p) * sigma_prime }
            }
        }
    }

    pub fn dynamics(&self, schedule: &NoiseSchedule, t: f64) -> Result<Dynamics> {
        let (sigma, sigma_prime) = schedule.eval(t)?;
        Ok(self.dynamics_at(sigma, sigma_prime, t))
    }

    pub fn dynamics_at(&self, sigma: f64, sigma_prime: f64, t: f64) -> Dynamics {
        Dynamics {
            t,
            sigma,
            sigma_prime,
            level: self.level(sigma, t),
            rates: self.rates(sigma, sigma_prime, t),
        }
    }

    /// Closed-form `exp(level)`. Negative levels give the matrix inverse.
    pub fn transition_at(&self, level: NoiseLevel) -> Transition {
        let v = self.data_tokens() as f64;
        let keep = (-level.mask).exp();
        let moved = -(-level.resample).exp_m1();
        Transition {
            to_mask: -(-level.mask).exp_m1(),
            stay: keep * (1.0 - (v - 1.0) / v * moved),
            other: keep * moved / v,
            level,
            data: self.data_tokens(),
            mask: self.mask(),
        }
    }

    pub fn transition(&self, sigma: f64, t: f64) -> Transition {
        self.transition_at(self.level(sigma, t))
    }

    /// `p_{t|0}(to | from) = exp(sigma Q)(to, from)`.
    pub fn transition_prob(&self, sigma: f64, t: f64, to: Token, from: Token) -> f64 {
        assert!(to < self.n() && from < self.n(), "token id out of range");
        self.transition(sigma, t).prob(to, from)
    }

    pub fn transition_column(&self, sigma: f64, t: f64, from: Token) -> Vec<f64> {
        let tr = self.transition(sigma, t);
        (0..self.n()).map(|to| tr.prob(to, from)).collect()
    }

    /// Forward rate `Q_t(to, from)` for `to != from`; the diagonal holds minus the exit rate.
    pub fn rate(&self, rates: Rates, to: Token, from: Token) -> f64 {
        let v = self.data_tokens() as f64;
        if self.vocab.is_mask(from) {
            return 0.0;
        }
        let mask_rate = if self.vocab.has_mask() { rates.mask } else { 0.0 };
        if to == from {
            -(mask_rate + rates.resample * (v - 1.0) / v)
        } else if self.vocab.is_mask(to) {
            mask_rate
        } else {
            rates.resample / v
        }
    }

    /// `p_{t|0}(y | h) / p_{t|0}(x_t | h)`.
    pub fn conditional_ratio(&self, sigma: f64, t: f64, y: Token, xt: Token, h: Token) -> Result<f64> {
        let tr = self.transition(sigma, t);
        let den = tr.prob(xt, h);
        if den == 0.0 {
            return Err(Error::Unreachable { xt, from: h });
        }
        if y == xt {
            return Ok(1.0);
        }
        Ok(tr.prob(y, h) / den)
    }

    /// Stationary distribution the reverse process starts from.
    pub fn reference_distribution(&self) -> Vec<f64> {
        match self.mask() {
            Some(m) => (0..self.n()).map(|i| f64::from(u8::from(i == m))).collect(),
            None => vec![1.0 / self.n() as f64; self.n()],
        }
    }

    /// Probability, under the forward roulette process with total noise
    /// `sigma_total`, that a token sits on a different data token when it gets masked.
    pub fn mask_hit_probability(&self, sigma_total: f64) -> Result<f64> {
        let Family::Roulette { p_m } = self.family else {
            return Err(Error::Unsupported(format!(
                "mask-hit probability is defined for roulette, not {}",
                self.family.name()
            )));
        };
        if sigma_total < 0.0 {
            return domain("sigma_total must be nonnegative");
        }
        let n = self.n() as f64;
        Ok((n - 2.0) / (n - 1.0)
            * ((-sigma_total).exp() * p_m - (-sigma_total * p_m).exp() + 1.0 - p_m))
    }

    /// Draws a token from column `from` of `exp(level)`.
    pub fn sample_transition<R: Rng + ?Sized>(&self, tr: &Transition, from: Token, rng: &mut R) -> Token {
        if self.vocab.is_mask(from) {
            return from;
        }
        let probs: Vec<f64> = (0..self.n()).map(|to| tr.prob(to, from)).collect();
        sample_categorical(&probs, rng).unwrap_or(from)
    }
}

/// `(p_m(t), p_m'(t))` for `p_m(t) = t^(1/(a t))`.
fn eroulette_fraction(a: f64, t: f64) -> (f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0);
    }
    let p = (t.ln() / (a * t)).exp();
    (p, p * (1.0 - t.ln()) / (a * t * t))
}

/// Samples `x_t` from `x_0` position by position.
pub fn corrupt_sequence<R: Rng + ?Sized>(
    x0: &TokenSequence,
    t: f64,
    spec: &MatrixSpec,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<TokenSequence> {
    x0.validate(&spec.vocab(), true)?;
    let sigma = schedule.sigma(t)?;
    let tr = spec.transition(sigma, t);
    Ok(x0.ids().iter().map(|&tok| spec.sample_transition(&tr, tok, rng)).collect::<Vec<_>>().into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn families(v: usize) -> Vec<MatrixSpec> {
        vec![
            MatrixSpec::uniform(v).unwrap(),
            MatrixSpec::absorb(v).unwrap(),
            MatrixSpec::roulette(v, 0.35).unwrap(),
            MatrixSpec::eroulette(v, 1.5).unwrap(),
        ]
    }

    #[test]
    fn loglinear_values() {
        let s = NoiseSchedule::loglinear(1e-3).unwrap();
        assert_eq!(s.eval(0.0).unwrap().0, 0.0);
        // -ln(0.5005)
        assert!((s.sigma(0.5).unwrap() - 0.692_147_680_2).abs() < 1e-9);
        let r = NoiseSchedule::roulette_loglinear(0.5, 1e-3).unwrap();
        assert!((r.sigma(0.5).unwrap() - 1.384_295_360_5).abs() < 1e-9);
        assert!(s.eval(1.0).is_err());
        assert!(s.eval(-0.1).is_err());
    }

    #[test]
    fn schedule_derivative_matches_finite_difference() {
        let schedules = [
            NoiseSchedule::loglinear(1e-3).unwrap(),
            NoiseSchedule::roulette_loglinear(0.35, 1e-3).unwrap(),
            NoiseSchedule::geometric(1e-4, 20.0).unwrap(),
        ];
        for s in schedules {
            for &t in &[0.05, 0.3, 0.7, 0.95] {
                let h = 1e-6;
                let fd = (s.sigma(t + h).unwrap() - s.sigma(t - h).unwrap()) / (2.0 * h);
                let ds = s.eval(t).unwrap().1;
                assert!((fd - ds).abs() / ds < 1e-6, "{s:?} t={t}: {fd} vs {ds}");
                assert!(ds > 0.0);
                let back = s.time_for_sigma(s.sigma(t).unwrap()).unwrap();
                assert!((back - t).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn geometric_has_no_default_bounds() {
        assert!(NoiseSchedule::geometric(2.0, 1.0).is_err());
        assert!(NoiseSchedule::geometric(0.0, 1.0).is_err());
    }

    #[test]
    fn family_vocab_mismatch_is_config_error() {
        let masked = Vocab::new(4, true).unwrap();
        let plain = Vocab::new(4, false).unwrap();
        assert!(matches!(MatrixSpec::new(Family::Uniform, masked), Err(Error::Config(_))));
        assert!(matches!(MatrixSpec::new(Family::Absorb, plain), Err(Error::Config(_))));
        assert!(Vocab::new(1, false).is_err());
    }

    #[test]
    fn roulette_three_states() {
        let spec = MatrixSpec::roulette(2, 0.5).unwrap();
        let col = spec.transition_column(1.0, 0.5, 0);
        assert!((col[2] - 0.393_469_3).abs() < 1e-6);
        assert!((col[0] - 0.487_205_05).abs() < 1e-8);
        assert!((col[1] - 0.119_325_61).abs() < 1e-8);
        assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_sigma_is_identity() {
        for spec in families(5) {
            for from in 0..spec.n() {
                for to in 0..spec.n() {
                    let p = spec.transition_prob(0.0, 0.4, to, from);
                    assert_eq!(p, f64::from(u8::from(to == from)), "{spec:?}");
                }
            }
        }
    }

    #[test]
    fn columns_are_stochastic() {
        for spec in families(6) {
            for &sigma in &[0.01, 0.5, 1.0, 5.0, 50.0] {
                for from in 0..spec.n() {
                    let sum: f64 = spec.transition_column(sigma, 0.6, from).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "{spec:?} sigma={sigma}");
                }
            }
        }
    }

    #[test]
    fn absorb_saturates() {
        let spec = MatrixSpec::absorb(7).unwrap();
        for from in 0..7 {
            assert!((spec.transition_prob(50.0, 0.0, 7, from) - 1.0).abs() < 1e-20);
        }
    }

    #[test]
    fn masking_is_monotone() {
        for spec in [MatrixSpec::absorb(4).unwrap(), MatrixSpec::roulette(4, 0.2).unwrap()] {
            let mut last = 0.0;
            for k in 0..200 {
                let p = spec.transition_prob(k as f64 * 0.05, 0.0, 4, 1);
                assert!(p >= last);
                last = p;
            }
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let absorb = MatrixSpec::absorb(5).unwrap();
        let r1 = MatrixSpec::roulette(5, 1.0).unwrap();
        let r0 = MatrixSpec::roulette(5, 0.0).unwrap();
        let uni = MatrixSpec::uniform(5).unwrap();
        for &sigma in &[0.01, 0.7, 3.0, 20.0] {
            for from in 0..6 {
                for to in 0..6 {
                    let a = absorb.transition_prob(sigma, 0.0, to, from);
                    assert!((a - r1.transition_prob(sigma, 0.0, to, from)).abs() < 1e-12);
                    if from < 5 && to < 5 {
                        let u = uni.transition_prob(sigma, 0.0, to, from);
                        assert!((u - r0.transition_prob(sigma, 0.0, to, from)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conditional_ratios() {
        let absorb = MatrixSpec::absorb(4).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((absorb.conditional_ratio(ln2, 0.0, 2, 4, 2).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(absorb.conditional_ratio(ln2, 0.0, 1, 4, 2).unwrap(), 0.0);
        assert!(matches!(
            absorb.conditional_ratio(ln2, 0.0, 4, 1, 2),
            Err(Error::Unreachable { xt: 1, from: 2 })
        ));
        let uni = MatrixSpec::uniform(4).unwrap();
        assert!((uni.conditional_ratio(ln2, 0.0, 2, 1, 2).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(uni.conditional_ratio(ln2, 0.0, 3, 3, 0).unwrap(), 1.0);
    }

    #[test]
    fn grouped_ratio_helpers_match_entries() {
        let spec = MatrixSpec::roulette(6, 0.3).unwrap();
        let tr = spec.transition(0.8, 0.0);
        assert!((tr.other_over_mask() - tr.other / tr.to_mask).abs() < 1e-13);
        assert!((tr.stay_over_mask() - tr.stay / tr.to_mask).abs() < 1e-13);
        assert!((tr.stay_over_other() - tr.stay / tr.other).abs() < 1e-11);
    }

    #[test]
    fn reference_distributions() {
        assert_eq!(MatrixSpec::absorb(3).unwrap().reference_distribution(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(MatrixSpec::uniform(4).unwrap().reference_distribution(), vec![0.25; 4]);
        let r = MatrixSpec::roulette(3, 0.05).unwrap().reference_distribution();
        assert_eq!(r, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mask_hit_probability_limits() {
        let absorb_like = MatrixSpec::roulette(29, 1.0).unwrap();
        assert!(absorb_like.mask_hit_probability(7.0).unwrap().abs() < 1e-15);
        let r = MatrixSpec::roulette(29, 0.95).unwrap();
        let p = r.mask_hit_probability(13.8).unwrap();
        assert!((p - 28.0 / 29.0 * 0.05).abs() < 2e-5, "{p}");
        assert!(MatrixSpec::absorb(3).unwrap().mask_hit_probability(1.0).is_err());
    }

    #[test]
    fn corruption_at_time_zero_is_identity() {
        let spec = MatrixSpec::roulette(5, 0.5).unwrap();
        let sched = NoiseSchedule::roulette_loglinear(0.5, 1e-3).unwrap();
        let x0 = TokenSequence::new(vec![0, 1, 2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(corrupt_sequence(&x0, 0.0, &spec, &sched, &mut rng).unwrap(), x0);
        let masked = TokenSequence::new(vec![0, 5]);
        assert!(corrupt_sequence(&masked, 0.1, &spec, &sched, &mut rng).is_err());
    }

    #[test]
    fn absorb_mask_fraction_within_three_stderr() {
        let spec = MatrixSpec::absorb(6).unwrap();
        let sched = NoiseSchedule::loglinear(1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = TokenSequence::new((0..1000).map(|i| i % 6).collect());
        let mut masked = 0usize;
        let reps = 100;
        for _ in 0..reps {
            let xt = corrupt_sequence(&x0, 0.5, &spec, &sched, &mut rng).unwrap();
            masked += xt.ids().iter().filter(|&&x| x == 6).count();
        }
        let total = (reps * 1000) as f64;
        let p = 1.0 - (-sched.sigma(0.5).unwrap()).exp();
        assert!((p - 0.4995).abs() < 1e-12);
        let se = (p * (1.0 - p) / total).sqrt();
        assert!(((masked as f64 / total) - p).abs() < 3.0 * se);
    }

    #[test]
    fn uniform_corruption_near_one_is_uniform() {
        let spec = MatrixSpec::uniform(4).unwrap();
        let sched = NoiseSchedule::loglinear(1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = TokenSequence::new(vec![0; 40_000]);
        let xt = corrupt_sequence(&x0, 1.0 - 1e-9, &spec, &sched, &mut rng).unwrap();
        // the column still carries eps of the start token
        let sigma = sched.sigma(1.0 - 1e-9).unwrap();
        let col = spec.transition_column(sigma, 0.0, 0);
        for (tok, &p) in col.iter().enumerate() {
            let freq = xt.ids().iter().filter(|&&x| x == tok).count() as f64 / 40_000.0;
            let se = (p * (1.0 - p) / 40_000.0).sqrt();
            assert!((freq - p).abs() < 4.0 * se);
            assert!((p - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn eroulette_rates_sum_to_sigma_prime() {
        let spec = MatrixSpec::eroulette(4, 1.0).unwrap();
        let sched = NoiseSchedule::loglinear(1e-3).unwrap();
        for &t in &[0.1, 0.4, 0.8] {
            let d = spec.dynamics(&sched, t).unwrap();
            assert!((d.rates.mask + d.rates.resample - d.sigma_prime).abs() < 1e-12);
            // derivative of the mask level by finite differences
            let h = 1e-6;
            let lvl = |t: f64| spec.level(sched.sigma(t).unwrap(), t).mask;
            let fd = (lvl(t + h) - lvl(t - h)) / (2.0 * h);
            assert!((fd - d.rates.mask).abs() < 1e-5 * d.rates.mask.abs().max(1.0));
        }
    }
}
