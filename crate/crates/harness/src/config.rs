//! Run configuration, read from TOML.
//!
//! Every section has defaults, so a file only needs the keys it changes.
//! Unknown keys are rejected.

use std::path::Path;

use asyncflow::flow::{make_time_grid, FieldConfig, FieldTrainConfig, GridKind, Target, TimeGrid};
use asyncflow::grpo::TrainConfig;
use asyncflow::nn::EncoderConfig;
use asyncflow::rewards::{Metric, RewardSpec};
use asyncflow::sampler::{BoundMode, SamplerConfig};
use asyncflow::tpm::TpmConfig;
use asyncflow::{Error, Result};
use serde::{Deserialize, Serialize};

const MAX_STEPS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    /// Closed-form field of the target mixture; needs no checkpoint.
    Analytic,
    /// MLP field loaded from a `pretrain-field` checkpoint.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub kind: FieldKind,
    pub hidden: usize,
    pub layers: usize,
    pub time_freqs: usize,
    pub cond_dim: usize,
}

impl Default for FieldSection {
    fn default() -> Self {
        FieldSection { kind: FieldKind::Analytic, hidden: 128, layers: 3, time_freqs: 16, cond_dim: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub steps: usize,
    pub grid: GridKind,
    pub guidance: f64,
    pub k_max: usize,
    pub sigma_min: f64,
    pub gamma: f64,
    pub bound: BoundMode,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SamplerSection {
            steps: 10,
            grid: GridKind::Uniform,
            guidance: s.guidance,
            k_max: s.k_max,
            sigma_min: s.sigma_min,
            gamma: s.gamma,
            bound: s.bound,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpmSection {
    pub patch: usize,
    pub pad: bool,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub global_tokens: usize,
    pub head_hidden: usize,
    pub time_freqs: usize,
    pub positional: bool,
}

impl Default for TpmSection {
    fn default() -> Self {
        TpmSection {
            patch: 2,
            pad: false,
            layers: 4,
            width: 32,
            heads: 4,
            ffn: 64,
            global_tokens: 2,
            head_hidden: 32,
            time_freqs: 8,
            positional: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rollouts: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { rollouts: 256, seeds: vec![42] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub gammas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { gammas: vec![0.0, 0.5, 1.0, 2.0, 4.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlternativeSection {
    pub scales: Vec<f64>,
}

impl Default for AlternativeSection {
    fn default() -> Self {
        AlternativeSection { scales: vec![0.5, 0.75, 1.0, 1.25, 1.5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub target: Target,
    pub field: FieldSection,
    pub field_train: FieldTrainConfig,
    pub sampler: SamplerSection,
    pub tpm: TpmSection,
    pub reward: RewardSpec,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub alternative: AlternativeSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            target: Target::symmetric_pair(2, 2.0, 0.002),
            field: FieldSection::default(),
            field_train: FieldTrainConfig::default(),
            sampler: SamplerSection::default(),
            tpm: TpmSection::default(),
            reward: RewardSpec {
                metrics: vec![Metric::DetailBand { radius: 0.06 }, Metric::Alignment],
                eps_z: 1e-8,
            },
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            alternative: AlternativeSection::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Config::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let tree = toml::Value::try_from(self).map_err(|e| Error::config(e.to_string()))?;
        if let Some(path) = non_finite(&tree, "") {
            return Err(Error::config(format!("{path} must be finite")));
        }
        self.target.validate()?;
        self.sampler_config().validate()?;
        if self.sampler.steps > MAX_STEPS {
            return Err(Error::config(format!("at most {MAX_STEPS} grid steps are supported")));
        }
        self.grid()?;
        self.reward.validate()?;
        self.train.validate()?;
        let d = self.target.dim();
        self.field_config().validate()?;
        self.tpm_config().validate()?;
        if self.reward.metrics.iter().any(|m| matches!(m, Metric::NoisePenalty)) && d < 2 {
            return Err(Error::config("noise penalty needs a target of dimension at least 2"));
        }
        if self.reward.metrics.iter().any(|m| matches!(m, Metric::Alignment)) && self.target.classes() < 2 {
            return Err(Error::config("alignment needs at least two target components"));
        }
        if self.eval.rollouts < 2 || self.eval.seeds.is_empty() {
            return Err(Error::config("evaluation needs at least two rollouts and one seed"));
        }
        if self.sweep.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::config("sweep gammas must be non-negative"));
        }
        if self.alternative.scales.iter().any(|s| !(*s > 0.0 && *s < 2.0)) {
            return Err(Error::config("velocity scales must lie in (0, 2)"));
        }
        if self.field_train.iterations == 0 || !(self.field_train.lr > 0.0) {
            return Err(Error::config("field training needs iterations and a positive learning rate"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        make_time_grid(self.sampler.steps, self.sampler.grid)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig { guidance: s.guidance, k_max: s.k_max, sigma_min: s.sigma_min, gamma: s.gamma, bound: s.bound }
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            dim: self.target.dim(),
            classes: self.target.classes(),
            hidden: self.field.hidden,
            layers: self.field.layers,
            time_freqs: self.field.time_freqs,
            cond_dim: self.field.cond_dim,
        }
    }

    pub fn tpm_config(&self) -> TpmConfig {
        let t = &self.tpm;
        TpmConfig {
            dim: self.target.dim(),
            classes: self.target.classes(),
            patch: t.patch,
            pad: t.pad,
            encoder: EncoderConfig { layers: t.layers, width: t.width, heads: t.heads, ffn: t.ffn },
            global_tokens: t.global_tokens,
            head_hidden: t.head_hidden,
            time_freqs: t.time_freqs,
            k_max: self.sampler.k_max,
            positional: t.positional,
        }
    }
}

fn non_finite(v: &toml::Value, path: &str) -> Option<String> {
    match v {
        toml::Value::Float(f) if !f.is_finite() => Some(path.trim_start_matches('.').to_string()),
        toml::Value::Array(a) => a.iter().enumerate().find_map(|(i, x)| non_finite(x, &format!("{path}[{i}]"))),
        toml::Value::Table(t) => t.iter().find_map(|(k, x)| non_finite(x, &format!("{path}.{k}"))),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let c = Config::default();
        let text = c.to_toml();
        let back = Config::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(Config::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(Config::parse("[sampler]\nwhatever = 2").is_err());
        assert!(Config::parse("[train]\nminibatch = 5").is_err());
        assert!(Config::parse("[sampler]\nsteps = 0").is_err());
        assert!(Config::parse("[tpm]\npatch = 3").is_err());
        assert!(Config::parse("[reward]\nmetrics = []").is_err());
        let err = Config::parse("[field_train]\nuncond_prob = nan").unwrap_err();
        assert!(err.to_string().contains("field_train.uncond_prob"), "{err}");
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = Config::parse("[sampler]\ngamma = 2.5\nbound = \"lifted\"\ngrid = { kind = \"shifted\", shift = 3.0 }").unwrap();
        assert_eq!(c.sampler.gamma, 2.5);
        assert_eq!(c.sampler.bound, BoundMode::Lifted);
        assert_eq!(c.sampler.steps, 10);
        assert_eq!(c.grid().unwrap().times()[1], 3.0 * 0.9 / (1.0 + 2.0 * 0.9));
    }
}
