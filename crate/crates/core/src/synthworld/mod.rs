//! A conditional 2-D mixture task with exact quality, defect and
//! instruction-following ground truth, plus a noisy pairwise ranker.
//!
//! Condition `c` asks for a sample from the mode centered at
//! `radius · (cos 2πc/K, sin 2πc/K)`. A sample is defective when it lands
//! farther than `defect_radius` from its target center, and follows the
//! instruction when its nearest center is the target.

mod data;

pub use data::{
    corrupt_sample, gen_offline_dataset, read_offline_records, read_pairs, write_offline_records,
    write_pairs, AnchorLabel, DataError, OfflineDataset, OfflineRecord,
};

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    sample_reverse, DiffusionError, EpsPredictor, GuidanceConfig, InferenceGrid, NoiseSchedule,
    ReverseSample, DATA_DIM,
};
use crate::ndtensor::Tensor;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub num_modes: usize,
    pub radius: f64,
    pub mode_std: f64,
    pub defect_radius: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            num_modes: 8,
            radius: 2.0,
            mode_std: 0.1,
            defect_radius: 0.3,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("invalid task: {0}")]
    Invalid(String),
    #[error("condition {c} out of range for {num_modes} modes")]
    Condition { c: usize, num_modes: usize },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.num_modes == 0 {
            return Err(TaskError::Invalid("num_modes must be >= 1".into()));
        }
        if !(self.radius > self.defect_radius && self.defect_radius > self.mode_std && self.mode_std >= 0.0) {
            return Err(TaskError::Invalid(format!(
                "need radius > defect_radius > mode_std >= 0, got {} / {} / {}",
                self.radius, self.defect_radius, self.mode_std
            )));
        }
        Ok(())
    }

    pub fn check(&self, c: usize) -> Result<(), TaskError> {
        if c >= self.num_modes {
            return Err(TaskError::Condition {
                c,
                num_modes: self.num_modes,
            });
        }
        Ok(())
    }

    /// Center `μ_c` of mode `c`.
    pub fn center(&self, c: usize) -> [f64; 2] {
        let angle = 2.0 * PI * c as f64 / self.num_modes as f64;
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }
}

fn dist(x: &[f64], mu: [f64; 2]) -> f64 {
    ((x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2)).sqrt()
}

/// `μ_c + mode_std · N(0, I₂)`
pub fn sample_clean<R: Rng + ?Sized>(c: usize, task: &TaskSpec, rng: &mut R) -> Tensor {
    let mu = task.center(c);
    let z = rng::normals(rng, DATA_DIM);
    Tensor::from_vec(vec![mu[0] + task.mode_std * z[0], mu[1] + task.mode_std * z[1]])
}

/// `−‖x − μ_c‖`
pub fn quality(x: &[f64], c: usize, task: &TaskSpec) -> f64 {
    -dist(x, task.center(c))
}

pub fn is_defect(x: &[f64], c: usize, task: &TaskSpec) -> bool {
    dist(x, task.center(c)) > task.defect_radius
}

/// True when `c` is the nearest center (ties go to the smaller index).
pub fn follows_instruction(x: &[f64], c: usize, task: &TaskSpec) -> bool {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..task.num_modes {
        let d = dist(x, task.center(k));
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best == c
}

/// Ranker error model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Probability that a non-tied verdict is inverted.
    pub flip_prob: f64,
}

impl OracleConfig {
    /// 91.8% agreement.
    pub const HUMAN_CENTRIC: OracleConfig = OracleConfig { flip_prob: 0.082 };
    /// 78.5% agreement.
    pub const NON_HUMAN_CENTRIC: OracleConfig = OracleConfig { flip_prob: 0.215 };

    pub fn validate(&self) -> Result<(), TaskError> {
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(TaskError::Invalid(format!(
                "flip_prob must lie in [0, 0.5), got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self::HUMAN_CENTRIC
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    AChosen,
    BChosen,
}

/// Prefers the higher-quality sample, inverting the verdict with probability
/// `flip_prob`. Exact ties always choose `a`. One uniform variate is consumed
/// per call regardless of the outcome.
pub fn rank_pair<R: Rng + ?Sized>(
    a: &[f64],
    b: &[f64],
    c: usize,
    oracle: &OracleConfig,
    task: &TaskSpec,
    rng: &mut R,
) -> Verdict {
    let u: f64 = rng.random();
    let (qa, qb) = (quality(a, c, task), quality(b, c, task));
    if qa == qb {
        return Verdict::AChosen;
    }
    let truth = if qa > qb { Verdict::AChosen } else { Verdict::BChosen };
    if u < oracle.flip_prob {
        match truth {
            Verdict::AChosen => Verdict::BChosen,
            Verdict::BChosen => Verdict::AChosen,
        }
    } else {
        truth
    }
}

/// Produces samples for a list of conditions.
pub trait SampleGenerator {
    fn generate(
        &self,
        conds: &[usize],
        grid: &InferenceGrid,
        guidance: Option<&GuidanceConfig>,
        seed: u64,
    ) -> Result<ReverseSample, DiffusionError>;
}

/// Reverse-diffusion sampling from a noise predictor.
pub struct DiffusionSampler<'a, P: ?Sized> {
    pub model: &'a P,
    pub sched: &'a NoiseSchedule,
}

impl<P: EpsPredictor + ?Sized> SampleGenerator for DiffusionSampler<'_, P> {
    fn generate(
        &self,
        conds: &[usize],
        grid: &InferenceGrid,
        guidance: Option<&GuidanceConfig>,
        seed: u64,
    ) -> Result<ReverseSample, DiffusionError> {
        sample_reverse(self.model, conds, grid, guidance, self.sched, seed)
    }
}

/// Emits the exact mode centers; zero model evaluations.
#[derive(Debug, Clone)]
pub struct CenterGenerator {
    pub task: TaskSpec,
}

impl SampleGenerator for CenterGenerator {
    fn generate(
        &self,
        conds: &[usize],
        _: &InferenceGrid,
        _: Option<&GuidanceConfig>,
        _: u64,
    ) -> Result<ReverseSample, DiffusionError> {
        let rows: Vec<[f64; 2]> = conds.iter().map(|&c| self.task.center(c)).collect();
        Ok(ReverseSample {
            x0: Tensor::from_rows(&rows),
            nfe: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub defect_rate: f64,
    pub follow_rate: f64,
    pub mean_quality: f64,
    pub nfe_per_sample: usize,
    pub n_eval: usize,
}

/// Generates `n_eval` samples with conditions cycling `0, 1, …` and scores them.
pub fn evaluate(
    generator: &dyn SampleGenerator,
    grid: &InferenceGrid,
    guidance: Option<&GuidanceConfig>,
    task: &TaskSpec,
    n_eval: usize,
    seed: u64,
) -> Result<EvalReport, DiffusionError> {
    let n_eval = n_eval.max(1);
    let conds: Vec<usize> = (0..n_eval).map(|i| i % task.num_modes).collect();
    let out = generator.generate(&conds, grid, guidance, seed)?;
    let mut defects = 0usize;
    let mut follows = 0usize;
    let mut quality_sum = 0.0;
    for (i, &c) in conds.iter().enumerate() {
        let x = out.x0.row(i);
        defects += usize::from(is_defect(x, c, task));
        follows += usize::from(follows_instruction(x, c, task));
        quality_sum += quality(x, c, task);
    }
    let n = n_eval as f64;
    Ok(EvalReport {
        defect_rate: defects as f64 / n,
        follow_rate: follows as f64 / n,
        mean_quality: quality_sum / n,
        nfe_per_sample: out.nfe,
        n_eval,
    })
}
