//! The staged alignment run: pretraining, online, half-online and offline
//! preference optimization, guidance distillation, and a final preference
//! round on the distilled student.
//!
//! Every stage starts by snapshotting the current policy as its frozen
//! reference. A fixed probe batch is pushed through both models at the start
//! of each stage (they must agree bit for bit) and through the reference again
//! at the end (it must not have moved).

mod metrics;
mod stages;

pub use metrics::{MetricsError, MetricsLog, MetricsRow, METRICS_HEADER};
pub use stages::distill_gap;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::apo::ApoError;
use crate::config::{ConfigError, RunConfig};
use crate::diffusion::{
    build_inference_grid, DiffusionError, EpsModel, EpsPredictor, GuidanceConfig, InferenceGrid, NoiseSchedule,
    Pass,
};
use crate::ndtensor::{ParamSet, Tensor, TensorError};
use crate::rng;
use crate::synthworld::{evaluate, gen_offline_dataset, DataError, DiffusionSampler, EvalReport, OfflineDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Online,
    HalfOnline,
    Offline,
    Distill,
    DistillAware,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Pretrain,
        Stage::Online,
        Stage::HalfOnline,
        Stage::Offline,
        Stage::Distill,
        Stage::DistillAware,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Online => "online",
            Stage::HalfOnline => "half_online",
            Stage::Offline => "offline",
            Stage::Distill => "distill",
            Stage::DistillAware => "distill_aware",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn previous(self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Self::ALL[i])
    }

    pub fn checkpoint_file(self) -> String {
        format!("{}.apockpt", self.name())
    }

    /// Stages whose output is the distilled single-pass student.
    pub fn produces_student(self) -> bool {
        matches!(self, Stage::Distill | Stage::DistillAware)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage}: non-finite values at step {step}: {reason}")]
    NonFinite { stage: Stage, step: usize, reason: String },
    #[error("{stage}: probe check failed: {what}")]
    ProbeViolation { stage: Stage, what: String },
    #[error("{stage} needs the {missing} checkpoint at {}", path.display())]
    MissingPrerequisite {
        stage: Stage,
        missing: Stage,
        path: PathBuf,
    },
    #[error("{stage}: no training data")]
    EmptyData { stage: Stage },
    #[error("checkpoint {}: {source}", path.display())]
    Checkpoint { path: PathBuf, source: TensorError },
    #[error("cannot write {}: {source}", path.display())]
    Output { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Apo(#[from] ApoError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Outcome of the probe checks for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCheck {
    pub stage: Stage,
    /// Reference and policy agree bit for bit when the stage starts.
    pub handoff_identical: bool,
    /// The frozen model's outputs are unchanged when the stage ends.
    pub reference_frozen: bool,
    /// The distillation teacher, when one exists, is unchanged.
    pub teacher_frozen: bool,
}

impl ProbeCheck {
    pub fn passed(&self) -> bool {
        self.handoff_identical && self.reference_frozen && self.teacher_frozen
    }
}

/// Mutable state carried from stage to stage.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub policy: EpsModel,
    pub reference: EpsModel,
    /// Frozen guided model the student was distilled from.
    pub teacher: Option<EpsModel>,
    /// True once the policy is a distilled student that samples unguided.
    pub distilled: bool,
    pub stages_done: Vec<Stage>,
    pub metrics: MetricsLog,
    pub probes: Vec<ProbeCheck>,
}

impl PipelineState {
    pub fn new(policy: EpsModel) -> Self {
        Self {
            reference: policy.clone(),
            policy,
            teacher: None,
            distilled: false,
            stages_done: Vec::new(),
            metrics: MetricsLog::default(),
            probes: Vec::new(),
        }
    }
}

/// Per-stage training record.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// Optimizer updates applied.
    pub updates: usize,
    /// Loss of every step, in order. Preference stages record the mean
    /// loss per window timestep.
    pub losses: Vec<f64>,
    /// Mean `Δ_l − Δ_w` of every preference window.
    pub margins: Vec<f64>,
    /// `(step, report)` for each evaluation, including step 0.
    pub evals: Vec<(usize, EvalReport)>,
    /// Model forward evaluations spent on training (generation plus loss).
    pub train_nfe: u64,
    /// Windows dropped because candidate generation failed.
    pub skipped: usize,
}

impl StageReport {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            updates: 0,
            losses: Vec::new(),
            margins: Vec::new(),
            evals: Vec::new(),
            train_nfe: 0,
            skipped: 0,
        }
    }

    pub fn first_eval(&self) -> Option<&EvalReport> {
        self.evals.first().map(|(_, r)| r)
    }

    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.evals.last().map(|(_, r)| r)
    }
}

/// Fixed inputs on which reference and policy outputs are compared.
#[derive(Debug, Clone)]
struct ProbeBatch {
    x: Tensor,
    ts: Vec<usize>,
    conds: Vec<usize>,
}

impl ProbeBatch {
    const ROWS: usize = 16;

    fn new(master: u64, t_max: usize, null_condition: usize) -> Self {
        let mut r = rng::stream(master, "probe");
        let n = Self::ROWS;
        let x = Tensor::new(vec![n, 2], rng::normals(&mut r, 2 * n)).expect("2n values");
        let ts = (0..n).map(|i| 1 + i * (t_max - 1) / (n - 1)).collect();
        let conds = (0..n).map(|i| i % (null_condition + 1)).collect();
        Self { x, ts, conds }
    }

    fn outputs(&self, model: &EpsModel) -> Result<Vec<u64>, DiffusionError> {
        let mut bits: Vec<u64> = Vec::new();
        for pass in [Pass::Normal, Pass::Skip] {
            let out = model.predict(&self.x, &self.ts, &self.conds, pass)?;
            bits.extend(out.data().iter().map(|v| v.to_bits()));
        }
        Ok(bits)
    }
}

/// Everything a stage needs besides the state it mutates.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: RunConfig,
    sched: NoiseSchedule,
    grid: InferenceGrid,
    probe: ProbeBatch,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let t_max = cfg.sampler.t_max;
        let sched = NoiseSchedule::linear(t_max)?;
        let grid = build_inference_grid(cfg.eval.grid_steps, cfg.eval.deployment_shift, t_max)?;
        let probe = ProbeBatch::new(cfg.seed, t_max, cfg.model.num_conditions);
        Ok(Self {
            cfg,
            sched,
            grid,
            probe,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn grid(&self) -> &InferenceGrid {
        &self.grid
    }

    /// Weights from `init_checkpoint`, or a fresh seeded initialization.
    pub fn initial_model(&self) -> Result<EpsModel, PipelineError> {
        match &self.cfg.init_checkpoint {
            Some(path) => load_model(path),
            None => Ok(EpsModel::new(self.cfg.model, rng::derive_seed(self.cfg.seed, "init", 0))?),
        }
    }

    /// The offline anchors and pairs for this seed; identical to what
    /// `gen-data` writes.
    pub fn offline_data(&self) -> OfflineDataset {
        let mut r = rng::stream(self.cfg.seed, "data");
        gen_offline_dataset(self.cfg.data.n_pos, self.cfg.data.n_neg, &self.cfg.task, &mut r)
    }

    /// Seed of every evaluation in this run.
    pub fn eval_seed(&self) -> u64 {
        rng::derive_seed(self.cfg.seed, "eval", 0)
    }

    /// Guidance used when sampling from the current policy.
    pub fn sampling_guidance(&self, state: &PipelineState) -> Option<GuidanceConfig> {
        (!state.distilled).then_some(self.cfg.eval.guidance)
    }

    /// Scores `model` on the deployment grid with a seed that is fixed for
    /// the whole run, so every evaluation sees the same starting noise.
    pub fn evaluate_model(&self, model: &EpsModel, guidance: Option<&GuidanceConfig>) -> Result<EvalReport, PipelineError> {
        let gen = DiffusionSampler {
            model,
            sched: &self.sched,
        };
        Ok(evaluate(&gen, &self.grid, guidance, &self.cfg.task, self.cfg.eval.n_eval, self.eval_seed())?)
    }

    /// Runs one stage on `state`, checking the probes around it.
    pub fn run_stage(
        &self,
        stage: Stage,
        state: &mut PipelineState,
        data: &OfflineDataset,
    ) -> Result<StageReport, PipelineError> {
        let teacher_before = state.teacher.as_ref().map(|t| t.params().clone());
        state.reference = state.policy.clone();
        let ref_start = self.probe.outputs(&state.reference)?;
        let handoff_identical = ref_start == self.probe.outputs(&state.policy)?;

        let report = match stage {
            Stage::Pretrain => self.pretrain(state)?,
            Stage::Online => self.online_stage(state)?,
            Stage::HalfOnline => self.half_online_stage(state, &data.records)?,
            Stage::Offline => self.offline_stage(state, &data.pairs)?,
            Stage::Distill => self.distill_stage(state)?,
            Stage::DistillAware => self.distill_aware_stage(state, &data.pairs)?,
        };

        // During distillation the reference is the teacher.
        let frozen = match (stage, &state.teacher) {
            (Stage::Distill, Some(t)) => t,
            _ => &state.reference,
        };
        let reference_frozen = self.probe.outputs(frozen)? == ref_start;
        let teacher_frozen = match (&teacher_before, &state.teacher) {
            (Some(before), Some(now)) => before.values_bit_identical(now.params()),
            (Some(_), None) => false,
            (None, _) => true,
        };
        let check = ProbeCheck {
            stage,
            handoff_identical,
            reference_frozen,
            teacher_frozen,
        };
        let passed = check.passed();
        state.probes.push(check);
        if !passed {
            return Err(PipelineError::ProbeViolation {
                stage,
                what: format!("{:?}", state.probes.last()),
            });
        }
        state.stages_done.push(stage);
        Ok(report)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EpsModel, PipelineError> {
    let path = path.as_ref();
    let params = ParamSet::load(path).map_err(|source| PipelineError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    EpsModel::from_params(params).map_err(|e| PipelineError::Checkpoint {
        path: path.to_path_buf(),
        source: TensorError::Checkpoint(e.to_string()),
    })
}

pub fn save_model(model: &EpsModel, path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let path = path.as_ref();
    model.params().save(path).map_err(|source| PipelineError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

fn write_metrics(log: &MetricsLog, path: &Path) -> Result<(), PipelineError> {
    let file = fs::File::create(path).map_err(|source| PipelineError::Output {
        path: path.to_path_buf(),
        source,
    })?;
    log.write_csv(BufWriter::new(file))?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::Output {
        path: dir.to_path_buf(),
        source,
    })
}

/// Result of running one or more stages.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub state: PipelineState,
    pub reports: Vec<StageReport>,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Runs every stage in order, writing `<stage>.apockpt` after each one and
/// `metrics.csv` as the run progresses. On failure the checkpoints of the
/// completed stages stay on disk and the metrics file covers every logged row.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome, PipelineError> {
    let pipeline = Pipeline::new(cfg.clone())?;
    let dir = cfg.output_dir.clone();
    ensure_dir(&dir)?;
    let mut state = PipelineState::new(pipeline.initial_model()?);
    let data = pipeline.offline_data();
    let metrics_path = dir.join(METRICS_FILE);
    let mut reports = Vec::new();
    for stage in Stage::ALL {
        let result = pipeline.run_stage(stage, &mut state, &data);
        write_metrics(&state.metrics, &metrics_path)?;
        reports.push(result?);
        save_model(&state.policy, dir.join(stage.checkpoint_file()))?;
    }
    Ok(PipelineOutcome { state, reports })
}

/// Runs a single stage against the checkpoints already in `cfg.output_dir`.
///
/// The stage's predecessor checkpoint must exist; pretraining starts from
/// `init_checkpoint` or a fresh model. Metrics go to `metrics.<stage>.csv`.
pub fn run_single_stage(cfg: &RunConfig, stage: Stage) -> Result<PipelineOutcome, PipelineError> {
    let pipeline = Pipeline::new(cfg.clone())?;
    let dir = cfg.output_dir.clone();
    let policy = match stage.previous() {
        None => pipeline.initial_model()?,
        Some(prev) => {
            let path = dir.join(prev.checkpoint_file());
            if !path.is_file() {
                return Err(PipelineError::MissingPrerequisite {
                    stage,
                    missing: prev,
                    path,
                });
            }
            load_model(&path)?
        }
    };
    ensure_dir(&dir)?;
    let mut state = PipelineState::new(policy);
    if stage == Stage::DistillAware {
        state.distilled = true;
        let teacher_path = dir.join(Stage::Offline.checkpoint_file());
        if teacher_path.is_file() {
            state.teacher = Some(load_model(&teacher_path)?);
        }
    }
    let data = pipeline.offline_data();
    let result = pipeline.run_stage(stage, &mut state, &data);
    write_metrics(&state.metrics, &dir.join(format!("metrics.{}.csv", stage.name())))?;
    let report = result?;
    save_model(&state.policy, dir.join(stage.checkpoint_file()))?;
    Ok(PipelineOutcome {
        state,
        reports: vec![report],
    })
}
