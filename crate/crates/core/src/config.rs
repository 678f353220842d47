//! Run configuration: one strict JSON document covering the task, model,
//! sampler, oracle, evaluation and every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::apo::{ApoSamplerConfig, TimestepMode};
use crate::diffusion::{GuidanceConfig, ModelArch};
use crate::synthworld::{OracleConfig, TaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if !(v > 0.0) || !v.is_finite() {
        return invalid(format!("{name} must be positive and finite, got {v}"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_eval: usize,
    pub grid_steps: usize,
    pub deployment_shift: f64,
    /// Optimizer steps between evaluations.
    pub every: usize,
    /// Guidance used when sampling from a non-distilled model.
    pub guidance: GuidanceConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_eval: 512,
            grid_steps: 20,
            deployment_shift: 3.0,
            every: 50,
            guidance: GuidanceConfig {
                omega: 1.0,
                lambda: 0.1,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_pos: usize,
    pub n_neg: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_pos: 2000,
            n_neg: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Probability that a whole batch is trained unconditionally.
    pub null_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 1e-3,
            batch: 128,
            null_prob: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoStageConfig {
    pub steps: usize,
    pub beta: f64,
    pub lr: f64,
    pub pairs_per_window: usize,
    pub timestep_mode: TimestepMode,
}

impl Default for DpoStageConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            beta: 1.0,
            lr: 3e-5,
            pairs_per_window: 16,
            timestep_mode: TimestepMode::Apo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub guidance: GuidanceConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            batch: 128,
            guidance: GuidanceConfig {
                omega: 1.0,
                lambda: 0.1,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub pretrain: PretrainConfig,
    pub online: DpoStageConfig,
    pub half_online: DpoStageConfig,
    pub offline: DpoStageConfig,
    pub distill: DistillConfig,
    pub distill_aware: DpoStageConfig,
}

impl Default for StagesConfig {
    fn default() -> Self {
        Self {
            pretrain: PretrainConfig::default(),
            online: DpoStageConfig::default(),
            half_online: DpoStageConfig::default(),
            offline: DpoStageConfig::default(),
            distill: DistillConfig::default(),
            distill_aware: DpoStageConfig {
                steps: 200,
                ..DpoStageConfig::default()
            },
        }
    }
}

impl StagesConfig {
    /// Sets every stage's step count to `n`.
    pub fn set_all_steps(&mut self, n: usize) {
        self.pretrain.steps = n;
        self.online.steps = n;
        self.half_online.steps = n;
        self.offline.steps = n;
        self.distill.steps = n;
        self.distill_aware.steps = n;
    }

    /// Sets the timestep mode of every preference stage.
    pub fn set_timestep_mode(&mut self, mode: TimestepMode) {
        for s in [
            &mut self.online,
            &mut self.half_online,
            &mut self.offline,
            &mut self.distill_aware,
        ] {
            s.timestep_mode = mode;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Starting weights for pretraining; a fresh initialization when absent.
    pub init_checkpoint: Option<PathBuf>,
    /// Log a metrics row every this many optimizer steps.
    pub log_every: usize,
    pub task: TaskSpec,
    pub model: ModelArch,
    pub sampler: ApoSamplerConfig,
    pub oracle: OracleConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub stages: StagesConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            init_checkpoint: None,
            log_every: 10,
            task: TaskSpec::default(),
            model: ModelArch::default(),
            sampler: ApoSamplerConfig::default(),
            oracle: OracleConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            stages: StagesConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Pretty JSON with fields in declaration order; stable across runs.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampler.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.oracle.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.model.num_conditions != self.task.num_modes {
            return invalid(format!(
                "model.num_conditions ({}) must equal task.num_modes ({})",
                self.model.num_conditions, self.task.num_modes
            ));
        }
        if self.model.hidden_layers < 2 {
            return invalid("model.hidden_layers must be >= 2 so a layer can be skipped");
        }
        if self.log_every == 0 {
            return invalid("log_every must be >= 1");
        }

        let e = &self.eval;
        if e.n_eval == 0 || e.grid_steps == 0 || e.every == 0 {
            return invalid("eval.n_eval, eval.grid_steps and eval.every must be >= 1");
        }
        positive("eval.deployment_shift", e.deployment_shift)?;
        e.guidance.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let p = &self.stages.pretrain;
        positive("stages.pretrain.lr", p.lr)?;
        if p.batch == 0 {
            return invalid("stages.pretrain.batch must be >= 1");
        }
        if !(0.0..=1.0).contains(&p.null_prob) {
            return invalid(format!("stages.pretrain.null_prob must lie in [0, 1], got {}", p.null_prob));
        }

        for (name, s) in [
            ("online", &self.stages.online),
            ("half_online", &self.stages.half_online),
            ("offline", &self.stages.offline),
            ("distill_aware", &self.stages.distill_aware),
        ] {
            positive(&format!("stages.{name}.beta"), s.beta)?;
            positive(&format!("stages.{name}.lr"), s.lr)?;
            if s.pairs_per_window == 0 {
                return invalid(format!("stages.{name}.pairs_per_window must be >= 1"));
            }
        }

        let d = &self.stages.distill;
        positive("stages.distill.lr", d.lr)?;
        if d.batch == 0 {
            return invalid("stages.distill.batch must be >= 1");
        }
        d.guidance.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_document_means_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected_at_every_level() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#), Err(ConfigError::Parse(_))));
        assert!(RunConfig::from_json(r#"{"stages": {"offline": {"step": 3}}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sampler": {"gama": 3}}"#).is_err());
    }

    #[test]
    fn out_of_range_values_rejected() {
        for doc in [
            r#"{"stages": {"online": {"beta": 0}}}"#,
            r#"{"stages": {"offline": {"pairs_per_window": 0}}}"#,
            r#"{"stages": {"pretrain": {"null_prob": 1.5}}}"#,
            r#"{"oracle": {"flip_prob": 0.7}}"#,
            r#"{"eval": {"deployment_shift": -1}}"#,
            r#"{"model": {"num_conditions": 4}}"#,
            r#"{"sampler": {"shift_set": []}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(ConfigError::Invalid(_))), "{doc}");
        }
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "stages": {"offline": {"steps": 7}}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.stages.offline.steps, 7);
        assert_eq!(cfg.stages.online.steps, 300);
        assert_eq!(cfg.stages.distill_aware.steps, 200);
    }

    #[test]
    fn bulk_setters() {
        let mut s = StagesConfig::default();
        s.set_all_steps(0);
        s.set_timestep_mode(TimestepMode::Uniform);
        assert_eq!(s.distill.steps, 0);
        assert_eq!(s.offline.timestep_mode, TimestepMode::Uniform);
    }
}
