//! Tabular softmax denoiser.
//!
//! The logits at position `i` are a sum of table rows, one per offset in
//! `-context..=context`, each indexed by `(time bucket, token observed at i + offset)`.
//! Offsets that fall outside the sequence read a padding symbol. With
//! `context = 0` this is the plain per-token, per-bucket table.

use crate::ctmc::{MatrixSpec, Token, TokenSequence};
use crate::error::{domain, Error, Result};
use crate::scores::{DenoisingModel, ProbTable, RawScoreModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    states: usize,
    data_tokens: usize,
    buckets: usize,
    context: usize,
    /// Row-major `[offset][bucket][observed][clean]`; `observed` includes the padding symbol.
    logits: Vec<f64>,
    adam: Option<AdamState>,
}

impl TabularModel {
    pub const DEFAULT_BUCKETS: usize = 32;

    pub fn new(spec: &MatrixSpec, buckets: usize, context: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::Config("need at least one time bucket".into()));
        }
        let mut model = Self {
            states: spec.n(),
            data_tokens: spec.data_tokens(),
            buckets,
            context,
            logits: Vec::new(),
            adam: None,
        };
        model.logits = vec![0.0; model.param_count()];
        Ok(model)
    }

    pub fn from_logits(spec: &MatrixSpec, buckets: usize, context: usize, logits: Vec<f64>) -> Result<Self> {
        let mut model = Self::new(spec, buckets, context)?;
        if logits.len() != model.param_count() {
            return domain(format!("expected {} logits, got {}", model.param_count(), logits.len()));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return domain("non-finite logit");
        }
        model.logits = logits;
        Ok(model)
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn param_count(&self) -> usize {
        self.offsets() * self.buckets * self.observed() * self.data_tokens
    }

    fn offsets(&self) -> usize {
        2 * self.context + 1
    }

    fn observed(&self) -> usize {
        self.states + usize::from(self.context > 0)
    }

    fn pad(&self) -> usize {
        self.states
    }

    pub fn bucket(&self, t: f64) -> usize {
        ((t * self.buckets as f64).floor().max(0.0) as usize).min(self.buckets - 1)
    }

    /// Start of the logit row for `(offset index, bucket, observed token)`.
    fn cell(&self, offset: usize, bucket: usize, observed: usize) -> usize {
        ((offset * self.buckets + bucket) * self.observed() + observed) * self.data_tokens
    }

    fn for_each_cell(&self, xt: &[Token], i: usize, bucket: usize, mut f: impl FnMut(usize)) {
        let r = self.context as isize;
        for (k, o) in (-r..=r).enumerate() {
            let j = i as isize + o;
            let obs = if j >= 0 && (j as usize) < xt.len() { xt[j as usize] } else { self.pad() };
            f(self.cell(k, bucket, obs));
        }
    }

    fn check_input(&self, xt: &TokenSequence, t: f64) -> Result<()> {
        if !(0.0..1.0).contains(&t) {
            return domain(format!("model time t={t} outside [0,1)"));
        }
        if let Some(&bad) = xt.ids().iter().find(|&&x| x >= self.states) {
            return domain(format!("token {bad} outside 0..{}", self.states));
        }
        Ok(())
    }

    /// Summed logits at every position, `L x V`.
    pub fn position_logits(&self, xt: &TokenSequence, t: f64) -> Result<Vec<f64>> {
        self.check_input(xt, t)?;
        let v = self.data_tokens;
        let b = self.bucket(t);
        let mut out = vec![0.0; xt.len() * v];
        for i in 0..xt.len() {
            let row = &mut out[i * v..(i + 1) * v];
            self.for_each_cell(xt.ids(), i, b, |c| {
                for (o, w) in row.iter_mut().zip(&self.logits[c..c + v]) {
                    *o += w;
                }
            });
        }
        Ok(out)
    }

    /// Gradient of `-w_t sum_i log f_i[x0_i]` with respect to every logit, added into `grad`.
    pub fn accumulate_gradient(
        &self,
        x0: &TokenSequence,
        xt: &TokenSequence,
        t: f64,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        if x0.len() != xt.len() {
            return domain("clean and noisy sequences differ in length");
        }
        if grad.len() != self.logits.len() {
            return domain("gradient buffer has the wrong size");
        }
        if weight == 0.0 {
            return Ok(());
        }
        let v = self.data_tokens;
        let b = self.bucket(t);
        let mut probs = self.position_logits(xt, t)?;
        for (i, &target) in x0.ids().iter().enumerate() {
            if target >= v {
                return domain(format!("clean token {target} at position {i} is not a data token"));
            }
            let row = &mut probs[i * v..(i + 1) * v];
            softmax_in_place(row);
            row[target] -= 1.0;
            self.for_each_cell(xt.ids(), i, b, |c| {
                for (g, d) in grad[c..c + v].iter_mut().zip(row.iter()) {
                    *g += weight * d;
                }
            });
        }
        Ok(())
    }

    /// Adds `d loss / d raw[i][y]` (an `L x V` block, mask column excluded) into `grad`.
    pub fn accumulate_raw_gradient(&self, xt: &TokenSequence, t: f64, row_grads: &[f64], grad: &mut [f64]) -> Result<()> {
        self.check_input(xt, t)?;
        let v = self.data_tokens;
        if row_grads.len() != xt.len() * v || grad.len() != self.logits.len() {
            return domain("gradient buffer has the wrong size");
        }
        let b = self.bucket(t);
        for (i, row) in row_grads.chunks(v).enumerate() {
            self.for_each_cell(xt.ids(), i, b, |c| {
                for (g, d) in grad[c..c + v].iter_mut().zip(row) {
                    *g += d;
                }
            });
        }
        Ok(())
    }

    /// One optimizer step with a precomputed gradient.
    pub fn apply_gradient(&mut self, grad: &[f64], optimizer: Optimizer) {
        match optimizer {
            Optimizer::Sgd { lr } => {
                for (w, g) in self.logits.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let size = self.logits.len();
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: vec![0.0; size],
                    v: vec![0.0; size],
                    step: 0,
                });
                state.step += 1;
                let c1 = 1.0 - beta1.powi(state.step as i32);
                let c2 = 1.0 - beta2.powi(state.step as i32);
                for (((w, g), m), v) in
                    self.logits.iter_mut().zip(grad).zip(state.m.iter_mut()).zip(state.v.iter_mut())
                {
                    if *g == 0.0 && *m == 0.0 && *v == 0.0 {
                        continue;
                    }
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }

    /// Weighted cross-entropy gradient step on one `(x0, x_t, t)` triple.
    pub fn grad_step(
        &mut self,
        x0: &TokenSequence,
        xt: &TokenSequence,
        t: f64,
        weight: f64,
        optimizer: Optimizer,
    ) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        let mut grad = vec![0.0; self.logits.len()];
        self.accumulate_gradient(x0, xt, t, weight, &mut grad)?;
        self.apply_gradient(&grad, optimizer);
        Ok(())
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl DenoisingModel for TabularModel {
    fn data_tokens(&self) -> usize {
        self.data_tokens
    }

    fn predict(&self, xt: &TokenSequence, t: f64) -> Result<ProbTable> {
        let v = self.data_tokens;
        let mut out = self.position_logits(xt, t)?;
        for row in out.chunks_mut(v) {
            softmax_in_place(row);
        }
        Ok(ProbTable::from_normalized(v, out))
    }
}

impl RawScoreModel for TabularModel {
    /// Logits padded with a zero entry for the mask column.
    fn raw_log_scores(&self, xt: &TokenSequence, t: f64) -> Result<Vec<Vec<f64>>> {
        let v = self.data_tokens;
        let logits = self.position_logits(xt, t)?;
        Ok(logits
            .chunks(v)
            .map(|row| {
                let mut r = row.to_vec();
                r.resize(self.states, 0.0);
                r
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cedd_loss, WeightSchedule};

    fn spec() -> MatrixSpec {
        MatrixSpec::roulette(4, 0.5).unwrap()
    }

    #[test]
    fn zero_logits_predict_uniform() {
        let m = TabularModel::new(&spec(), 8, 1).unwrap();
        let f = m.predict(&TokenSequence::new(vec![0, 4, 2]), 0.3).unwrap();
        for row in f.rows() {
            for &p in row {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn saturated_logit_is_one_hot() {
        let mut m = TabularModel::new(&spec(), 4, 0).unwrap();
        let c = m.cell(0, m.bucket(0.5), 3);
        m.logits[c + 2] = 30.0;
        let f = m.predict(&TokenSequence::new(vec![3]), 0.5).unwrap();
        assert!((f.row(0)[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_hot_prediction_has_zero_gradient() {
        let mut m = TabularModel::new(&spec(), 4, 0).unwrap();
        let c = m.cell(0, m.bucket(0.5), 4);
        m.logits[c + 1] = 800.0;
        let mut g = vec![0.0; m.param_count()];
        m.accumulate_gradient(&TokenSequence::new(vec![1]), &TokenSequence::new(vec![4]), 0.5, 1.0, &mut g)
            .unwrap();
        assert!(g.iter().all(|&x| x.abs() < 1e-300));
    }

    #[test]
    fn zero_weight_leaves_params() {
        let mut m = TabularModel::new(&spec(), 4, 2).unwrap();
        let before = m.clone();
        m.grad_step(&TokenSequence::new(vec![1, 2]), &TokenSequence::new(vec![4, 2]), 0.2, 0.0, Optimizer::adam(0.1))
            .unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let spec = spec();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut m = TabularModel::new(&spec, 3, 1).unwrap();
        for w in m.logits.iter_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        let x0 = TokenSequence::new(vec![0, 3, 1, 1, 2]);
        let xt = TokenSequence::new(vec![4, 3, 0, 4, 2]);
        let t = 0.4;
        let weights = WeightSchedule::CeddStar;
        let w = weights.weight(t);
        let mut g = vec![0.0; m.param_count()];
        m.accumulate_gradient(&x0, &xt, t, w, &mut g).unwrap();
        let loss = |m: &TabularModel| cedd_loss(&m.predict(&xt, t).unwrap(), &x0, t, weights, false).unwrap().total;
        let mut worst: f64 = 0.0;
        let touched: Vec<usize> = (0..g.len()).filter(|&k| g[k] != 0.0).collect();
        assert!(touched.len() >= 20);
        for &k in touched.iter().take(40) {
            let h = 1e-5;
            let mut up = m.clone();
            up.logits[k] += h;
            let mut dn = m.clone();
            dn.logits[k] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            worst = worst.max((fd - g[k]).abs() / g[k].abs().max(1e-3));
        }
        assert!(worst < 1e-5, "relative error {worst}");
    }
}
