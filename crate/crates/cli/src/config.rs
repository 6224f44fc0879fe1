//! Run configuration, stored as TOML with one section per command.

use cedd_core::bounds::{validate_pairing, Batching, BoundConfig, TimeWindow};
use cedd_core::losses::WeightSchedule;
use cedd_core::samplers::SamplerKind;
use cedd_core::{Family, MatrixSpec, NoiseSchedule};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyName {
    Uniform,
    Absorb,
    Roulette,
    Eroulette,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    Loglinear,
    Geometric,
    RouletteLoglinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Cedd,
    CeddStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Weighted cross-entropy on the clean token.
    Cedd,
    /// Score entropy on raw log-scores.
    Sedd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerName {
    Euler,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    J1,
    J2,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchingName {
    Pooled,
    PerSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: FamilyName,
    /// Mask fraction of the roulette family.
    pub p_m: f64,
    /// Shape of the time-dependent mask fraction of the eroulette family.
    pub a: f64,
    pub schedule: ScheduleName,
    pub eps: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Sequence length.
    pub length: usize,
    /// Time buckets of the tabular model.
    pub buckets: usize,
    /// Neighbours on each side seen by the tabular model.
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: FamilyName::Absorb,
            p_m: 0.95,
            a: 1.0,
            schedule: ScheduleName::Loglinear,
            eps: NoiseSchedule::DEFAULT_EPS,
            sigma_min: 1e-4,
            sigma_max: 20.0,
            length: 32,
            buckets: 32,
            context: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Fraction of chunks held out (taken from the end of the corpus).
    pub eval_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { eval_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weighting: Weighting,
    pub loss: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 32, lr: 0.05, weighting: Weighting::Cedd, loss: LossMode::Cedd, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub sampler: SamplerName,
    pub steps: usize,
    pub count: usize,
    pub seed: u64,
    pub rescale: bool,
    /// Text every sample starts with.
    pub prefix: String,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { sampler: SamplerName::Analytic, steps: 128, count: 16, seed: 0, rescale: true, prefix: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSection {
    pub estimator: Estimator,
    pub samples: usize,
    pub batching: BatchingName,
    pub t_per_sequence: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for BoundSection {
    fn default() -> Self {
        Self {
            estimator: Estimator::Both,
            samples: 4096,
            batching: BatchingName::Pooled,
            t_per_sequence: 1024,
            stratified: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpellcheckConfig {
    /// Noise time at which the text is read as `x_t`.
    pub t_star: f64,
    /// Fraction of characters replaced when contaminating a clean reference.
    pub contamination: f64,
    /// Keep the input wherever the most probable clean character agrees with it;
    /// when off, every position is redrawn from the model posterior.
    pub only_disagreements: bool,
    pub seed: u64,
}

impl Default for SpellcheckConfig {
    fn default() -> Self {
        Self { t_star: 0.15, contamination: 0.05, only_disagreements: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub bound: BoundSection,
    pub spellcheck: SpellcheckConfig,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Config(msg.into()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Parse { what: "configuration", detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        match m.family {
            FamilyName::Roulette if !(m.p_m > 0.0 && m.p_m <= 1.0) => {
                return invalid(format!("roulette needs p_m in (0, 1], got {}", m.p_m))
            }
            FamilyName::Eroulette if !(m.a > 0.0 && m.a.is_finite()) => {
                return invalid(format!("eroulette needs a > 0, got {}", m.a))
            }
            _ => {}
        }
        if m.length == 0 || m.buckets == 0 {
            return invalid("length and buckets must be positive");
        }
        if m.schedule == ScheduleName::RouletteLoglinear && m.family != FamilyName::Roulette {
            return invalid("the roulette-loglinear schedule is tied to the roulette family");
        }
        // schedule constructor checks eps and the geometric bounds
        self.schedule()?;
        if !(0.0..1.0).contains(&self.data.eval_fraction) {
            return invalid("eval_fraction must lie in [0, 1)");
        }
        let t = &self.train;
        if t.batch == 0 || !(t.lr > 0.0 && t.lr.is_finite()) {
            return invalid("training needs batch >= 1 and a positive learning rate");
        }
        if self.sample.steps == 0 {
            return invalid("sampler needs at least one step");
        }
        if self.bound.samples == 0 || self.bound.t_per_sequence == 0 {
            return invalid("bound estimation needs at least one sample");
        }
        let s = &self.spellcheck;
        if !(s.t_star > 0.0 && s.t_star < 1.0) || !(0.0..=1.0).contains(&s.contamination) {
            return invalid("spellcheck needs t_star in (0, 1) and contamination in [0, 1]");
        }
        Ok(())
    }

    /// Checks that the configured estimator is available for the family/schedule pairing.
    pub fn validate_bound(&self, data_tokens: usize) -> Result<()> {
        if self.bound.estimator != Estimator::J1 {
            validate_pairing(&self.spec(data_tokens)?, &self.schedule()?)?;
        }
        Ok(())
    }

    pub fn family(&self) -> Family {
        match self.model.family {
            FamilyName::Uniform => Family::Uniform,
            FamilyName::Absorb => Family::Absorb,
            FamilyName::Roulette => Family::Roulette { p_m: self.model.p_m },
            FamilyName::Eroulette => Family::ERoulette { a: self.model.a },
        }
    }

    pub fn spec(&self, data_tokens: usize) -> Result<MatrixSpec> {
        Ok(MatrixSpec::with_data_tokens(self.family(), data_tokens)?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let m = &self.model;
        Ok(match m.schedule {
            ScheduleName::Loglinear => NoiseSchedule::loglinear(m.eps)?,
            ScheduleName::Geometric => NoiseSchedule::geometric(m.sigma_min, m.sigma_max)?,
            ScheduleName::RouletteLoglinear => NoiseSchedule::roulette_loglinear(m.p_m, m.eps)?,
        })
    }

    pub fn weights(&self) -> WeightSchedule {
        match self.train.weighting {
            Weighting::Cedd => WeightSchedule::Cedd,
            Weighting::CeddStar => WeightSchedule::CeddStar,
        }
    }

    pub fn sampler_kind(&self) -> SamplerKind {
        match self.sample.sampler {
            SamplerName::Euler => SamplerKind::Euler,
            SamplerName::Analytic => SamplerKind::Analytic,
        }
    }

    pub fn bound_config(&self) -> BoundConfig {
        let b = &self.bound;
        BoundConfig {
            n_samples: b.samples,
            batching: match b.batching {
                BatchingName::Pooled => Batching::Pooled,
                BatchingName::PerSequence => Batching::PerSequence { t_per_sequence: b.t_per_sequence },
            },
            window: TimeWindow::default(),
            stratified: b.stratified,
            seed: b.seed,
        }
    }

    /// Short schedule label used in result files.
    pub fn schedule_label(&self) -> String {
        match self.model.schedule {
            ScheduleName::Loglinear => format!("loglinear(eps={})", self.model.eps),
            ScheduleName::Geometric => format!("geometric({},{})", self.model.sigma_min, self.model.sigma_max),
            ScheduleName::RouletteLoglinear => format!("roulette-loglinear(p_m={},eps={})", self.model.p_m, self.model.eps),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_exact() {
        let mut cfg = RunConfig::default();
        cfg.model.family = FamilyName::Roulette;
        cfg.model.p_m = 0.1 + 0.2;
        cfg.model.schedule = ScheduleName::RouletteLoglinear;
        cfg.train.lr = std::f64::consts::PI / 7.0;
        cfg.sample.prefix = "the \"quick\"\n".into();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = RunConfig::from_toml("[model]\nfamily = \"uniform\"\n").unwrap();
        assert_eq!(cfg.model.family, FamilyName::Uniform);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn rejects_bad_fields() {
        assert!(RunConfig::from_toml("[model]\nfamily = \"roulette\"\np_m = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nfamily = \"roulette\"\np_m = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[model]\nfamily = \"eroulette\"\na = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[model]\nschedule = \"geometric\"\nsigma_min = 3.0\nsigma_max = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nschedule = \"roulette-loglinear\"\n").is_err());
    }

    #[test]
    fn rejects_every_pairing_without_a_constant() {
        let cases = [
            (FamilyName::Absorb, ScheduleName::Geometric),
            (FamilyName::Roulette, ScheduleName::Loglinear),
            (FamilyName::Roulette, ScheduleName::Geometric),
            (FamilyName::Eroulette, ScheduleName::Loglinear),
            (FamilyName::Eroulette, ScheduleName::Geometric),
        ];
        for (family, schedule) in cases {
            let mut cfg = RunConfig::default();
            cfg.model.family = family;
            cfg.model.schedule = schedule;
            assert!(cfg.validate_bound(5).is_err(), "{family:?} with {schedule:?}");
            cfg.bound.estimator = Estimator::J1;
            assert!(cfg.validate_bound(5).is_ok());
        }
        let mut ok = RunConfig::default();
        ok.model.family = FamilyName::Uniform;
        ok.model.schedule = ScheduleName::Geometric;
        assert!(ok.validate_bound(5).is_ok());
    }
}
