//! The five commands, callable without the argument parser.

use std::fmt::Write as _;

use cedd_core::bounds::{estimate_bound, estimate_bounds, BoundEstimate, BoundKind, BoundRecord};
use cedd_core::model::TabularModel;
use cedd_core::oracle::{verify_suite, CheckRow};
use cedd_core::samplers::{generate_many, SamplerConfig, StepStats};
use cedd_core::scores::{CeddScores, DenoisingModel, ScoreModel, SeddScores};
use cedd_core::util::{sample_categorical, stream_rng};
use cedd_core::{Family, MatrixSpec, NoiseSchedule, Token, TokenSequence};
use rand::Rng;

use crate::checkpoint::{Checkpoint, BUILD_ID};
use crate::config::{Estimator, LossMode, RunConfig};
use crate::corpus::{Charset, Corpus};
use crate::error::{CliError, Result};
use crate::train::{train, StepLog};

/// `# `-prefixed provenance block embedded at the top of every text output.
pub fn provenance(cfg: &RunConfig) -> String {
    let mut out = format!("# build = {BUILD_ID:?}\n");
    for line in cfg.to_toml().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn model_and_dynamics(cfg: &RunConfig, data_tokens: usize) -> Result<(MatrixSpec, NoiseSchedule)> {
    cfg.validate()?;
    Ok((cfg.spec(data_tokens)?, cfg.schedule()?))
}

/// Trains a fresh model on the corpus' training chunks.
pub fn run_train(cfg: &RunConfig, corpus: &Corpus, on_step: impl FnMut(&StepLog)) -> Result<(Checkpoint, Vec<StepLog>)> {
    let (spec, schedule) = model_and_dynamics(cfg, corpus.charset.data_tokens())?;
    let mut model = TabularModel::new(&spec, cfg.model.buckets, cfg.model.context)?;
    let logs = train(&mut model, &corpus.train, &spec, &schedule, cfg, on_step)?;
    Ok((Checkpoint::new(cfg.clone(), corpus.charset.clone(), model), logs))
}

pub fn training_log_csv(cfg: &RunConfig, logs: &[StepLog]) -> String {
    let mut out = provenance(cfg);
    out.push_str(StepLog::CSV_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

/// Score model matching how the checkpoint was trained; `rescale` only affects reconstructed scores.
fn with_scores<T>(ck: &Checkpoint, spec: MatrixSpec, rescale: bool, f: impl FnOnce(&dyn ScoreModel) -> Result<T>) -> Result<T> {
    match ck.config.train.loss {
        LossMode::Cedd => f(&CeddScores::new(&ck.model, spec, rescale)),
        LossMode::Sedd => f(&SeddScores { model: &ck.model, spec }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub texts: Vec<String>,
    pub stats: StepStats,
}

pub fn run_sample(ck: &Checkpoint) -> Result<SampleRun> {
    let cfg = &ck.config;
    let (spec, schedule) = model_and_dynamics(cfg, ck.charset.data_tokens())?;
    let mut sampler = SamplerConfig::new(cfg.sampler_kind(), cfg.sample.steps, cfg.model.length, cfg.sample.seed);
    sampler.use_sigma_rescale = cfg.sample.rescale;
    if !cfg.sample.prefix.is_empty() {
        sampler.prefix = Some(ck.charset.tokenize(&cfg.sample.prefix).0);
    }
    let runs = with_scores(ck, spec, cfg.sample.rescale, |m| {
        Ok(generate_many(m, &sampler, &spec, &schedule, cfg.sample.count)?)
    })?;
    let mut stats = StepStats::default();
    let texts = runs
        .iter()
        .map(|(x, traj)| {
            stats.merge(traj.stats);
            ck.charset.detokenize(x.ids())
        })
        .collect();
    Ok(SampleRun { texts, stats })
}

pub fn sample_file(ck: &Checkpoint, run: &SampleRun) -> String {
    let mut out = provenance(&ck.config);
    writeln!(out, "# clamped = {}\n# fallbacks = {}", run.stats.clamped, run.stats.fallbacks).unwrap();
    for (k, text) in run.texts.iter().enumerate() {
        writeln!(out, "%% sample {k}\n{text}").unwrap();
    }
    out
}

/// Bound estimates on `data`, without the generation-time sigma rescale.
pub fn run_eval_bound(ck: &Checkpoint, data: &[TokenSequence], dataset: &str) -> Result<Vec<BoundRecord>> {
    let cfg = &ck.config;
    let (spec, schedule) = model_and_dynamics(cfg, ck.charset.data_tokens())?;
    cfg.validate_bound(ck.charset.data_tokens())?;
    let bc = cfg.bound_config();
    let estimates: Vec<BoundEstimate> = with_scores(ck, spec, false, |m| {
        Ok(match cfg.bound.estimator {
            Estimator::Both => {
                let (j1, j2) = estimate_bounds(m, data, &spec, &schedule, &bc)?;
                vec![j1, j2]
            }
            Estimator::J1 => vec![estimate_bound(BoundKind::J1, m, data, &spec, &schedule, &bc)?],
            Estimator::J2 => vec![estimate_bound(BoundKind::J2, m, data, &spec, &schedule, &bc)?],
        })
    })?;
    Ok(estimates
        .into_iter()
        .map(|estimate| BoundRecord {
            dataset: dataset.to_string(),
            family: spec.family().name().to_string(),
            schedule: cfg.schedule_label(),
            seed: cfg.bound.seed,
            estimate,
        })
        .collect())
}

pub fn results_csv(cfg: &RunConfig, records: &[BoundRecord]) -> String {
    let mut out = provenance(cfg);
    out.push_str(BoundRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn run_verify(seed: u64) -> Result<Vec<CheckRow>> {
    Ok(verify_suite(seed)?)
}

pub fn check_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>14}  {:>14}  {:>10}  {:>9}  result\n", "check", "lhs", "rhs", "gap", "tol");
    for r in rows {
        writeln!(
            out,
            "{:<width$}  {:>14.8}  {:>14.8}  {:>10.2e}  {:>9.1e}  {}",
            r.name,
            r.lhs,
            r.rhs,
            r.gap,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}

/// Replaces a `rate` fraction of characters, each by a uniformly drawn different charset character.
pub fn contaminate(text: &str, charset: &Charset, rate: f64, seed: u64) -> String {
    let chars = charset.chars();
    let mut rng = stream_rng(seed, 0);
    text.chars()
        .map(|c| {
            if chars.len() < 2 || !rng.random_bool(rate) {
                return c;
            }
            loop {
                let r = chars[rng.random_range(0..chars.len())];
                if r != c {
                    return r;
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpellcheckReport {
    pub corrected: String,
    /// Positions where the input differs from the reference.
    pub corrupted: usize,
    /// Corrupted positions restored to the reference character.
    pub fixed: usize,
    /// Clean positions changed by the correction.
    pub broken: usize,
}

impl SpellcheckReport {
    /// Correction accuracy on corrupted positions; 1 when nothing was corrupted.
    pub fn accuracy(&self) -> f64 {
        if self.corrupted == 0 {
            1.0
        } else {
            self.fixed as f64 / self.corrupted as f64
        }
    }
}

fn argmax(row: &[f64]) -> Token {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best }).0
}

/// Reads the noisy text as `x_t` at `t_star` and moves every position to the
/// most probable clean character; positions where that is the input are unchanged.
pub fn run_spellcheck(ck: &Checkpoint, noisy: &str, reference: Option<&str>) -> Result<SpellcheckReport> {
    let cfg = &ck.config;
    match cfg.family() {
        Family::Uniform | Family::Roulette { .. } => {}
        f => {
            return Err(CliError::Unsupported(format!(
                "spellcheck needs unmasked-token dynamics (uniform or roulette), not {}",
                f.name()
            )))
        }
    }
    let (ids, _) = ck.charset.tokenize(noisy);
    let len = cfg.model.length;
    let chunks: Vec<&[Token]> = ids.chunks(len).collect();
    let t = cfg.spellcheck.t_star;
    let predicted: Vec<Vec<Token>> = {
        use rayon::prelude::*;
        chunks
            .par_iter()
            .enumerate()
            .map(|(k, c)| -> Result<Vec<Token>> {
                let f = ck.model.predict(&TokenSequence::new(c.to_vec()), t)?;
                if cfg.spellcheck.only_disagreements {
                    return Ok(f.rows().map(argmax).collect());
                }
                let mut rng = stream_rng(cfg.spellcheck.seed, k as u64);
                Ok(f.rows().map(|row| sample_categorical(row, &mut rng).unwrap_or_else(|| argmax(row))).collect())
            })
            .collect::<Result<_>>()?
    };
    let out: Vec<Token> = predicted.into_iter().flatten().collect();
    let corrected = ck.charset.detokenize(&out);
    let (mut corrupted, mut fixed, mut broken) = (0, 0, 0);
    if let Some(clean) = reference {
        for ((n, c), o) in noisy.chars().zip(clean.chars()).zip(corrected.chars()) {
            if n != c {
                corrupted += 1;
                fixed += usize::from(o == c);
            } else {
                broken += usize::from(o != c);
            }
        }
    }
    Ok(SpellcheckReport { corrected, corrupted, fixed, broken })
}

/// Accuracy on corrupted positions of always answering the most frequent corpus character.
pub fn majority_baseline(corpus_text: &str, noisy: &str, clean: &str) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for c in corpus_text.chars() {
        *counts.entry(c).or_insert(0usize) += 1;
    }
    let Some((&major, _)) = counts.iter().max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c))) else {
        return 0.0;
    };
    let (mut corrupted, mut hits) = (0, 0);
    for (n, c) in noisy.chars().zip(clean.chars()) {
        if n != c {
            corrupted += 1;
            hits += usize::from(c == major);
        }
    }
    if corrupted == 0 {
        1.0
    } else {
        hits as f64 / corrupted as f64
    }
}
