//! Noise schedule, conditional ε-prediction network, composite guidance and
//! deterministic reverse sampling.

mod guidance;
mod model;
mod sampler;
mod schedule;

use rand::Rng;

pub use guidance::{cfg_predict, guided_predict, perturbation_predict, Guided, GuidanceConfig};
pub use model::{time_embedding, BoundModel, EpsModel, EpsPredictor, ModelArch, Pass, DATA_DIM};
pub use sampler::{
    build_inference_grid, ddim_renoise, ddim_x0, sample_reverse, sample_reverse_from, InferenceGrid,
    ReverseSample,
};
pub use schedule::{forward_diffuse, forward_diffuse_rows, NoiseSchedule, BETA_END, BETA_START};

use crate::ndtensor::{Tape, Tensor, TensorError, Var};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error("schedule needs T >= 2, got {0}")]
    ScheduleTooShort(usize),
    #[error("timestep {t} outside [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("batch size mismatch: expected {expected}, got {got}")]
    BatchMismatch { expected: usize, got: usize },
    #[error("condition index {0} out of range")]
    InvalidCondition(usize),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid guidance {0:?}")]
    InvalidGuidance(GuidanceConfig),
    #[error("inference grid must be strictly decreasing within [0, T]: {0:?}")]
    InvalidGrid(Vec<usize>),
    #[error("cannot build an inference grid with N = {n}, s* = {s_star}")]
    InvalidGridRequest { n: usize, s_star: f64 },
    #[error("reverse sampling produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Mean over rows of `‖ε − ε̂‖²`, recorded on `tape` with `model` bound as `bound`.
#[allow(clippy::too_many_arguments)]
pub fn dm_loss_on_tape(
    tape: &mut Tape,
    model: &EpsModel,
    bound: &BoundModel,
    x0: &Tensor,
    conds: &[usize],
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Var, DiffusionError> {
    if x0.rows() == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    let x_t = forward_diffuse_rows(x0, ts, eps, sched)?;
    let x = tape.constant(x_t);
    let pred = model.forward_on(tape, bound, x, ts, conds, Pass::Normal)?;
    let target = tape.constant(eps.clone());
    let diff = tape.sub(target, pred)?;
    let sq = tape.square(diff)?;
    let per_row = tape.row_sum(sq)?;
    Ok(tape.mean(per_row)?)
}

/// Denoising loss of any predictor with fresh `ε ~ N(0, I)` per row.
pub fn dm_loss<P: EpsPredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x0: &Tensor,
    conds: &[usize],
    ts: &[usize],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64, DiffusionError> {
    if x0.rows() == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    let eps = Tensor::new(x0.shape().to_vec(), rng::normals(rng, x0.len()))?;
    let x_t = forward_diffuse_rows(x0, ts, &eps, sched)?;
    let pred = model.predict(&x_t, ts, conds, Pass::Normal)?;
    let residual = eps.sub(&pred)?;
    Ok(residual.row_sq_norms().iter().sum::<f64>() / x0.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl EpsPredictor for Zero {
        fn null_condition(&self) -> usize {
            0
        }
        fn predict(&self, x: &Tensor, _: &[usize], _: &[usize], _: Pass) -> Result<Tensor, DiffusionError> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    /// Recovers the injected noise from `x_t` and the known clean batch.
    struct Injected {
        x0: Tensor,
        sched: NoiseSchedule,
    }
    impl EpsPredictor for Injected {
        fn null_condition(&self) -> usize {
            0
        }
        fn predict(&self, x: &Tensor, ts: &[usize], _: &[usize], _: Pass) -> Result<Tensor, DiffusionError> {
            let mut out = Tensor::zeros(x.shape());
            for (i, &t) in ts.iter().enumerate() {
                let (a, b) = self.sched.coefficients(t);
                for d in 0..x.cols() {
                    out.row_mut(i)[d] = (x.row(i)[d] - a * self.x0.row(i)[d]) / b;
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn zero_model_loss_is_data_dimension() {
        let sched = NoiseSchedule::linear(1000).unwrap();
        let n = 10_000;
        let x0 = Tensor::zeros(&[n, 2]);
        let mut r = rng::seeded(5);
        let ts: Vec<usize> = (0..n).map(|_| r.random_range(1..=1000)).collect();
        let loss = dm_loss(&Zero, &x0, &vec![0; n], &ts, &sched, &mut r).unwrap();
        assert!((loss - 2.0).abs() < 0.05, "loss {loss}");
    }

    #[test]
    fn injected_noise_model_has_zero_loss() {
        let sched = NoiseSchedule::linear(1000).unwrap();
        let x0 = Tensor::from_rows(&[[2.0, 0.0], [0.0, -2.0], [1.0, 1.0]]);
        let stub = Injected {
            x0: x0.clone(),
            sched: sched.clone(),
        };
        let mut r = rng::seeded(9);
        let loss = dm_loss(&stub, &x0, &[0, 1, 2], &[10, 500, 990], &sched, &mut r).unwrap();
        assert!(loss < 1e-20, "loss {loss}");
    }

    #[test]
    fn tape_loss_agrees_with_direct_loss() {
        let sched = NoiseSchedule::linear(1000).unwrap();
        let m = EpsModel::new(ModelArch::default(), 3).unwrap();
        let x0 = Tensor::from_rows(&[[2.0, 0.0], [0.0, -2.0]]);
        let conds = [0, 6];
        let ts = [100, 800];
        let direct = dm_loss(&m, &x0, &conds, &ts, &sched, &mut rng::seeded(1)).unwrap();
        let eps = Tensor::new(vec![2, 2], rng::normals(&mut rng::seeded(1), 4)).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, false).unwrap();
        let v = dm_loss_on_tape(&mut tape, &m, &bound, &x0, &conds, &ts, &eps, &sched).unwrap();
        assert!((tape.value(v).item() - direct).abs() < 1e-12);
        assert!(matches!(
            dm_loss(&m, &Tensor::zeros(&[0, 2]), &[], &[], &sched, &mut rng::seeded(1)),
            Err(DiffusionError::EmptyBatch)
        ));
    }
}
