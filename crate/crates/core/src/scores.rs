//! Probability tables, concrete-score tables and the map between them.
//!
//! A denoising model predicts, per position, a distribution over the clean
//! token. The concrete score at a position follows from it in closed form
//! because the conditional ratios `p(y | h) / p(x_t | h)` of the forward
//! process only take a handful of distinct values.

use crate::ctmc::{Family, MatrixSpec, NoiseLevel, Token, TokenSequence, Transition};
use crate::error::{domain, Error, Result};

macro_rules! row_table {
    ($name:ident) => {
        impl $name {
            pub fn len(&self) -> usize {
                self.data.len() / self.width.max(1)
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn row(&self, i: usize) -> &[f64] {
                &self.data[i * self.width..(i + 1) * self.width]
            }

            pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
                &mut self.data[i * self.width..(i + 1) * self.width]
            }

            pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
                self.data.chunks(self.width)
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.data
            }
        }
    };
}

/// `L x V` table whose rows are distributions over the clean token.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTable {
    width: usize,
    data: Vec<f64>,
}

row_table!(ProbTable);

impl ProbTable {
    /// Row sums must be within this distance of 1.
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || !data.len().is_multiple_of(width) {
            return domain(format!("{} entries do not form rows of width {width}", data.len()));
        }
        let table = Self { width, data };
        table.validate()?;
        Ok(table)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return domain("ragged probability rows");
        }
        Self::new(width, rows.concat())
    }

    pub fn uniform(len: usize, width: usize) -> Self {
        Self { width, data: vec![1.0 / width as f64; len * width] }
    }

    /// Builds without the simplex check; used by models that normalize by construction.
    pub(crate) fn from_normalized(width: usize, data: Vec<f64>) -> Self {
        debug_assert!(data.len().is_multiple_of(width));
        Self { width, data }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return domain(format!("row {i} has a negative or non-finite entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::TOLERANCE {
                return domain(format!("row {i} sums to {s}"));
            }
        }
        Ok(())
    }
}

/// `L x n` table of nonnegative concrete-score estimates; the own-token entry is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    width: usize,
    data: Vec<f64>,
}

row_table!(ScoreTable);

impl ScoreTable {
    pub fn new(width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || !data.len().is_multiple_of(width) {
            return domain(format!("{} entries do not form rows of width {width}", data.len()));
        }
        if let Some(i) = data.iter().position(|&s| !(s >= 0.0)) {
            return domain(format!("negative or NaN score at flat index {i}"));
        }
        Ok(Self { width, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return domain("ragged score rows");
        }
        Self::new(width, rows.concat())
    }

    /// Scores equal to 1 everywhere.
    pub fn ones(len: usize, width: usize) -> Self {
        Self { width, data: vec![1.0; len * width] }
    }

    /// True when every own-token entry is exactly 1.
    pub fn own_entries_are_one(&self, xt: &TokenSequence) -> bool {
        xt.ids().iter().enumerate().all(|(i, &x)| self.row(i)[x] == 1.0)
    }
}

/// Noise level used for the conditional ratios of unmasked positions at
/// sampling time. Tiny levels make `stay / other` explode, which is harmless
/// for sampling but makes the reconstructed scores hard to fit. Masked
/// positions and all bound computations use the raw level.
pub fn rescale_sigma_for_generation(family: Family, sigma: f64) -> f64 {
    match family {
        Family::Uniform => sigma.max(0.0015),
        Family::Roulette { .. } | Family::ERoulette { .. } => {
            if sigma < 0.5 {
                (1.1 * sigma + 1.1).ln()
            } else {
                sigma
            }
        }
        Family::Absorb => sigma,
    }
}

/// Forward-process kernel used for the conditional ratios at position `xt`.
fn ratio_transition(spec: &MatrixSpec, sigma: f64, t: f64, xt: Token, rescale: bool) -> Transition {
    let masked = spec.vocab().is_mask(xt);
    let sigma = if rescale && !masked { rescale_sigma_for_generation(spec.family(), sigma) } else { sigma };
    spec.transition(sigma, t)
}

/// Concrete scores at one position from the predicted clean-token
/// distribution `f_row` (length `V`), using
/// `s[y] = sum_h p(y | h) / p(xt | h) f[h]` in closed form. Clean tokens that
/// cannot produce `xt` are dropped and `f` is renormalized over the rest.
pub fn probs_to_scores(
    f_row: &[f64],
    spec: &MatrixSpec,
    sigma: f64,
    t: f64,
    xt: Token,
    rescale: bool,
) -> Result<Vec<f64>> {
    let v = spec.data_tokens();
    let n = spec.n();
    if f_row.len() != v {
        return domain(format!("probability row has length {}, expected {v}", f_row.len()));
    }
    if xt >= n {
        return domain(format!("token {xt} outside 0..{n}"));
    }
    let tr = ratio_transition(spec, sigma, t, xt, rescale);
    let level = tr.level();
    let mut s = vec![0.0; n];

    if spec.vocab().is_mask(xt) {
        if level.mask <= 0.0 {
            return domain("masked position needs sigma > 0");
        }
        let base = tr.other_over_mask();
        let slope = tr.stay_over_mask() - base;
        for y in 0..v {
            s[y] = base + f_row[y] * slope;
        }
        s[xt] = 1.0;
        return Ok(s);
    }

    if level.resample <= 0.0 {
        // Only `h = xt` reaches `xt`; every other data token has ratio 0.
        if let Some(m) = spec.mask() {
            s[m] = level.mask.exp_m1();
        }
        s[xt] = 1.0;
        return Ok(s);
    }

    let up = tr.stay_over_other() - 1.0;
    let down = tr.other_over_stay() - 1.0;
    let own = f_row[xt];
    for y in 0..v {
        s[y] = 1.0 + f_row[y] * up + own * down;
    }
    if let Some(m) = spec.mask() {
        s[m] = tr.to_mask / tr.other * (1.0 - own) + tr.to_mask / tr.stay * own;
    }
    s[xt] = 1.0;
    Ok(s)
}

/// Average conditional ratio `mean_{x0} p(y | x0) / p(xt | x0)` over the
/// clean tokens, in closed form. The score-entropy parameterization adds its
/// log to the raw network output. Pairs whose ratio never enters a loss or a
/// sampler step (a mask target, or an unmasked position under pure masking)
/// get the neutral factor 1.
pub fn sedd_scale_factor(spec: &MatrixSpec, sigma: f64, t: f64, xt: Token, y: Token) -> Result<f64> {
    if !(sigma > 0.0) {
        return domain("scale factor needs sigma > 0");
    }
    let n = spec.n() as f64;
    let level = spec.level(sigma, t);
    let vocab = spec.vocab();
    if vocab.is_mask(y) || y == xt {
        return Ok(1.0);
    }
    if vocab.is_mask(xt) {
        return Ok(1.0 / ((n - 1.0) * level.mask.exp_m1()));
    }
    if level.resample <= 0.0 {
        return Ok(1.0);
    }
    let v = spec.data_tokens() as f64;
    let e = level.resample.exp_m1();
    Ok(1.0 + 1.0 / e - 1.0 / (e + v))
}

/// Maps `(x_t, t)` to per-position distributions over the clean token.
pub trait DenoisingModel: Sync {
    fn data_tokens(&self) -> usize;
    fn predict(&self, xt: &TokenSequence, t: f64) -> Result<ProbTable>;
}

/// Maps `(x_t, t)` to a concrete-score table.
pub trait ScoreModel: Sync {
    fn scores(&self, xt: &TokenSequence, t: f64, sigma: f64) -> Result<ScoreTable>;
}

/// Scores reconstructed from a denoising model.
pub struct CeddScores<'a, M: ?Sized> {
    pub model: &'a M,
    pub spec: MatrixSpec,
    /// Apply the generation-time sigma rescale to unmasked positions.
    pub rescale: bool,
}

impl<'a, M: DenoisingModel + ?Sized> CeddScores<'a, M> {
    pub fn new(model: &'a M, spec: MatrixSpec, rescale: bool) -> Self {
        Self { model, spec, rescale }
    }
}

impl<M: DenoisingModel + ?Sized> ScoreModel for CeddScores<'_, M> {
    fn scores(&self, xt: &TokenSequence, t: f64, sigma: f64) -> Result<ScoreTable> {
        let f = self.model.predict(xt, t)?;
        let n = self.spec.n();
        let mut data = Vec::with_capacity(xt.len() * n);
        for (i, &x) in xt.ids().iter().enumerate() {
            data.extend(probs_to_scores(f.row(i), &self.spec, sigma, t, x, self.rescale)?);
        }
        Ok(ScoreTable { width: n, data })
    }
}

/// Produces raw log-scores (length `n` rows) for the score-entropy parameterization.
pub trait RawScoreModel: Sync {
    fn raw_log_scores(&self, xt: &TokenSequence, t: f64) -> Result<Vec<Vec<f64>>>;
}

/// `s[y] = exp(raw[y] + log scale(y))` with the own entry pinned to 1.
pub struct SeddScores<'a, M: ?Sized> {
    pub model: &'a M,
    pub spec: MatrixSpec,
}

impl<M: RawScoreModel + ?Sized> ScoreModel for SeddScores<'_, M> {
    fn scores(&self, xt: &TokenSequence, t: f64, sigma: f64) -> Result<ScoreTable> {
        let raw = self.model.raw_log_scores(xt, t)?;
        let n = self.spec.n();
        let mut data = Vec::with_capacity(xt.len() * n);
        for (i, &x) in xt.ids().iter().enumerate() {
            let row = &raw[i];
            if row.len() != n {
                return Err(Error::Domain(format!("raw score row of length {}, expected {n}", row.len())));
            }
            for (y, &r) in row.iter().enumerate() {
                data.push(if y == x {
                    1.0
                } else {
                    (r + sedd_scale_factor(&self.spec, sigma, t, x, y)?.ln()).exp()
                });
            }
        }
        Ok(ScoreTable { width: n, data })
    }
}

/// The noise level at which conditional ratios are taken; exposed for the oracle.
pub fn ratio_level(spec: &MatrixSpec, sigma: f64, t: f64, xt: Token, rescale: bool) -> NoiseLevel {
    ratio_transition(spec, sigma, t, xt, rescale).level()
}
