use super::{guided_predict, DiffusionError, EpsPredictor, GuidanceConfig, NoiseSchedule, Pass, DATA_DIM};
use crate::apo::shift_sigma;
use crate::ndtensor::Tensor;
use crate::rng;

/// Strictly decreasing timesteps visited by the deterministic sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceGrid {
    steps: Vec<usize>,
}

impl InferenceGrid {
    pub fn new(steps: Vec<usize>, t_max: usize) -> Result<Self, DiffusionError> {
        if steps.is_empty()
            || steps.windows(2).any(|w| w[0] <= w[1])
            || steps.iter().any(|&t| t > t_max)
        {
            return Err(DiffusionError::InvalidGrid(steps));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// `N` uniformly spaced noise levels `i/N` (`i = N..1`) pushed through the
/// shift map with `s*`, scaled to `[0, T]` and rounded half-up. Duplicate
/// timesteps produced by rounding are dropped.
pub fn build_inference_grid(n: usize, s_star: f64, t_max: usize) -> Result<InferenceGrid, DiffusionError> {
    if n < 2 || !(s_star > 0.0) || !s_star.is_finite() {
        return Err(DiffusionError::InvalidGridRequest { n, s_star });
    }
    let mut steps: Vec<usize> = Vec::with_capacity(n);
    for i in (1..=n).rev() {
        let sigma = i as f64 / n as f64;
        let shifted = shift_sigma(sigma, s_star).expect("sigma in (0, 1] and s* > 0");
        let t = ((shifted * t_max as f64 + 0.5).floor() as usize).min(t_max);
        if steps.last() != Some(&t) {
            steps.push(t);
        }
    }
    InferenceGrid::new(steps, t_max)
}

/// Output of a reverse sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseSample {
    pub x0: Tensor,
    /// Model forward evaluations consumed per sample.
    pub nfe: usize,
}

/// Deterministic DDIM (η = 0) reverse process over `grid`.
///
/// Starts from seeded unit Gaussian noise, one row per entry of `conds`.
/// With `guidance` set, every step uses [`guided_predict`]; otherwise a single
/// conditional pass.
pub fn sample_reverse<P: EpsPredictor + ?Sized>(
    model: &P,
    conds: &[usize],
    grid: &InferenceGrid,
    guidance: Option<&GuidanceConfig>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<ReverseSample, DiffusionError> {
    let n = conds.len();
    let mut r = rng::seeded(seed);
    let x = Tensor::new(vec![n, DATA_DIM], rng::normals(&mut r, n * DATA_DIM))?;
    sample_reverse_from(model, x, conds, grid, guidance, sched)
}

/// [`sample_reverse`] from an explicit starting state.
pub fn sample_reverse_from<P: EpsPredictor + ?Sized>(
    model: &P,
    mut x: Tensor,
    conds: &[usize],
    grid: &InferenceGrid,
    guidance: Option<&GuidanceConfig>,
    sched: &NoiseSchedule,
) -> Result<ReverseSample, DiffusionError> {
    let steps = grid.steps();
    let mut nfe = 0;
    for (i, &t) in steps.iter().enumerate() {
        sched.check(t)?;
        let ts = vec![t; conds.len()];
        let eps = match guidance {
            Some(g) => {
                let out = guided_predict(model, &x, &ts, conds, g)?;
                nfe += out.nfe;
                out.eps
            }
            None => {
                nfe += 1;
                model.predict(&x, &ts, conds, Pass::Normal)?
            }
        };
        let x0_hat = ddim_x0(&x, &eps, t, sched)?;
        x = match steps.get(i + 1) {
            Some(&next) => ddim_renoise(&x0_hat, &eps, next, sched)?,
            None => x0_hat,
        };
        if !x.is_finite() {
            return Err(DiffusionError::NonFiniteState { step: i });
        }
    }
    Ok(ReverseSample { x0: x, nfe })
}

/// `x̂0 = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`
pub fn ddim_x0(x_t: &Tensor, eps: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    let (a, b) = sched.coefficients(t);
    Ok(x_t.zip_with(eps, "ddim", |x, e| (x - b * e) / a)?)
}

/// `x_t' = √ᾱ_t'·x̂0 + √(1−ᾱ_t')·ε̂`
pub fn ddim_renoise(x0_hat: &Tensor, eps: &Tensor, t_next: usize, sched: &NoiseSchedule) -> Result<Tensor, DiffusionError> {
    let (a, b) = sched.coefficients(t_next);
    Ok(x0_hat.zip_with(eps, "ddim", |x, e| a * x + b * e)?)
}
