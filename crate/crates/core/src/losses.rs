//! Score-entropy kernels, the grouped per-position score-entropy loss and the
//! weighted cross-entropy loss used to train denoisers.

use crate::ctmc::{MatrixSpec, Token, TokenSequence};
use crate::error::{domain, Error, Result};
use crate::scores::ProbTable;

/// `K(a) = a (log a - 1)` with `K(0) = 0`.
pub fn kernel_k(a: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a.ln() - 1.0)
    }
}

/// `b - a log b`, with the log term dropped when `a = 0`.
pub fn kernel_ell_bar(a: f64, b: f64) -> Result<f64> {
    if !(b > 0.0) {
        return domain(format!("score-entropy kernel needs b > 0, got {b}"));
    }
    Ok(if a == 0.0 { b } else { b - a * b.ln() })
}

/// `b - a log b + K(a)`; nonnegative with its minimum 0 at `b = a`.
pub fn kernel_ell(a: f64, b: f64) -> Result<f64> {
    Ok(kernel_ell_bar(a, b)? + kernel_k(a))
}

#[derive(Debug, Clone, Copy)]
pub enum WeightSchedule {
    /// `w(t) = 1`
    Cedd,
    /// `w(t) = log(e + 0.3 / t)`
    CeddStar,
    Custom(fn(f64) -> f64),
}

impl PartialEq for WeightSchedule {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (WeightSchedule::Cedd, WeightSchedule::Cedd) => true,
            (WeightSchedule::CeddStar, WeightSchedule::CeddStar) => true,
            (WeightSchedule::Custom(a), WeightSchedule::Custom(b)) => std::ptr::fn_addr_eq(*a, *b),
            _ => false,
        }
    }
}

impl WeightSchedule {
    pub fn weight(&self, t: f64) -> f64 {
        match self {
            WeightSchedule::Cedd => 1.0,
            WeightSchedule::CeddStar => (std::f64::consts::E + 0.3 / t).ln(),
            WeightSchedule::Custom(f) => f(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Weighted sum over positions.
    pub total: f64,
    /// Unweighted per-position terms.
    pub per_position: Vec<f64>,
    pub weight: f64,
    pub t: f64,
    /// Set when some probability of the clean token was exactly zero.
    pub infinite: bool,
}

impl LossReport {
    pub fn per_token(&self) -> f64 {
        self.total / self.per_position.len().max(1) as f64
    }
}

/// Floor applied to probabilities when clamping is requested.
pub const PROB_FLOOR: f64 = 1e-30;

/// `-w(t) sum_i log f_i[x0_i]`.
pub fn cedd_loss(
    f: &ProbTable,
    x0: &TokenSequence,
    t: f64,
    weights: WeightSchedule,
    clamp: bool,
) -> Result<LossReport> {
    if f.len() != x0.len() {
        return domain(format!("{} probability rows for {} tokens", f.len(), x0.len()));
    }
    let mut infinite = false;
    let mut per_position = Vec::with_capacity(x0.len());
    for (i, &tok) in x0.ids().iter().enumerate() {
        if tok >= f.width() {
            return domain(format!("clean token {tok} at position {i} has no probability column"));
        }
        let mut p = f.row(i)[tok];
        if clamp {
            p = p.max(PROB_FLOOR);
        }
        if p == 0.0 {
            infinite = true;
        }
        per_position.push(-p.ln());
    }
    let weight = weights.weight(t);
    let total = weight * per_position.iter().sum::<f64>();
    Ok(LossReport { total, per_position, weight, t, infinite })
}

fn log_score(s: &[f64], y: Token) -> Result<f64> {
    let v = s[y];
    if !(v > 0.0) {
        return Err(Error::NonPositiveScore { index: y, value: v });
    }
    Ok(v.ln())
}

/// `sum_{y != xt} Q_t(xt, y) l(p(y | x0) / p(xt | x0), s[y])` at one position,
/// evaluated through the three distinct ratio values. With `include_k` false
/// the `K` terms are left out.
#[allow(clippy::too_many_arguments)]
pub fn sedd_loss_position(
    spec: &MatrixSpec,
    sigma: f64,
    sigma_prime: f64,
    t: f64,
    s_row: &[f64],
    x0: Token,
    xt: Token,
    include_k: bool,
) -> Result<f64> {
    let v = spec.data_tokens();
    if s_row.len() != spec.n() {
        return domain(format!("score row has length {}, expected {}", s_row.len(), spec.n()));
    }
    if x0 >= v || xt >= spec.n() {
        return domain(format!("token pair ({x0}, {xt}) out of range"));
    }
    let d = spec.dynamics_at(sigma, sigma_prime, t);
    if d.rates.mask < 0.0 || d.rates.resample < 0.0 {
        return domain(format!(
            "forward rates at t={t} are negative (mask {}, resample {})",
            d.rates.mask, d.rates.resample
        ));
    }
    let tr = spec.transition_at(d.level);
    let vf = v as f64;
    let k = |a: f64| if include_k { kernel_k(a) } else { 0.0 };
    let data_sum = |skip: Token| (0..v).filter(|&y| y != skip).map(|y| s_row[y]).sum::<f64>();

    if spec.vocab().is_mask(xt) {
        if d.level.mask <= 0.0 {
            return Err(Error::Unreachable { xt, from: x0 });
        }
        let hit = tr.stay_over_mask();
        let miss = tr.other_over_mask();
        let mut acc = data_sum(usize::MAX) - hit * log_score(s_row, x0)?;
        if miss > 0.0 {
            for y in (0..v).filter(|&y| y != x0) {
                acc -= miss * log_score(s_row, y)?;
            }
        }
        acc += k(hit) + (vf - 1.0) * k(miss);
        return Ok(d.rates.mask * acc);
    }

    let w = d.rates.resample / vf;
    if xt == x0 {
        if w == 0.0 {
            return Ok(0.0);
        }
        let r = tr.other_over_stay();
        let mut acc = data_sum(xt);
        if r > 0.0 {
            for y in (0..v).filter(|&y| y != xt) {
                acc -= r * log_score(s_row, y)?;
            }
        }
        acc += (vf - 1.0) * k(r);
        return Ok(w * acc);
    }

    if tr.other == 0.0 {
        return Err(Error::Unreachable { xt, from: x0 });
    }
    let r = tr.stay_over_other();
    let mut acc = data_sum(xt) - r * log_score(s_row, x0)?;
    for y in (0..v).filter(|&y| y != xt && y != x0) {
        acc -= log_score(s_row, y)?;
    }
    acc += k(r) + (vf - 2.0) * k(1.0);
    Ok(w * acc)
}

/// Derivative of [`sedd_loss_position`] with respect to `log s[y]` for every
/// `y`, i.e. `Q_t(xt, y) (s[y] - ratio_y)`; used to fit raw log-scores.
pub fn sedd_log_score_gradient(
    spec: &MatrixSpec,
    sigma: f64,
    sigma_prime: f64,
    t: f64,
    s_row: &[f64],
    x0: Token,
    xt: Token,
) -> Result<Vec<f64>> {
    let v = spec.data_tokens();
    let d = spec.dynamics_at(sigma, sigma_prime, t);
    let tr = spec.transition_at(d.level);
    let mut g = vec![0.0; spec.n()];
    if spec.vocab().is_mask(xt) {
        for y in 0..v {
            let r = if y == x0 { tr.stay_over_mask() } else { tr.other_over_mask() };
            g[y] = d.rates.mask * (s_row[y] - r);
        }
        return Ok(g);
    }
    let w = d.rates.resample / v as f64;
    if w == 0.0 {
        return Ok(g);
    }
    if xt != x0 && tr.other == 0.0 {
        return Err(Error::Unreachable { xt, from: x0 });
    }
    for y in (0..v).filter(|&y| y != xt) {
        let r = if xt == x0 {
            tr.other_over_stay()
        } else if y == x0 {
            tr.stay_over_other()
        } else {
            1.0
        };
        g[y] = w * (s_row[y] - r);
    }
    Ok(g)
}
