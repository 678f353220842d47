//! Diffusion-DPO loss on noise-prediction residuals and the windowed update.
//!
//! For a pair `(x^w, x^l)` corrupted to the same timestep with independent
//! noise, the implicit log-likelihood ratio of each sample is the difference
//! of squared residuals between policy and reference:
//!
//! ```text
//! Δ_w = ‖ε^w − ε_θ(x^w_t)‖² − ‖ε^w − ε_ref(x^w_t)‖²
//! Δ_l = ‖ε^l − ε_θ(x^l_t)‖² − ‖ε^l − ε_ref(x^l_t)‖²
//! loss = −log σ(β · (Δ_l − Δ_w))
//! ```
//!
//! A window sums this loss (and its gradient) over K timesteps before a
//! single optimizer step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ApoError, WindowDraw};
use crate::diffusion::{forward_diffuse, EpsModel, EpsPredictor, NoiseSchedule, Pass, DATA_DIM};
use crate::ndtensor::{AdamW, Tape, Tensor, TensorError, Var};
use crate::rng;

/// Where a preference pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Online,
    HalfOnline,
    Offline,
}

impl PairSource {
    pub fn tag(self) -> &'static str {
        match self {
            PairSource::Online => "ON",
            PairSource::HalfOnline => "HO",
            PairSource::Offline => "OF",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "ON" => Some(PairSource::Online),
            "HO" => Some(PairSource::HalfOnline),
            "OF" => Some(PairSource::Offline),
            _ => None,
        }
    }
}

/// A condition with a preferred (`chosen`) and dispreferred (`rejected`) sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub condition: usize,
    pub chosen: Tensor,
    pub rejected: Tensor,
    pub source: PairSource,
}

impl PreferencePair {
    pub fn new(
        condition: usize,
        chosen: Tensor,
        rejected: Tensor,
        source: PairSource,
    ) -> Result<Self, ApoError> {
        if chosen.shape() != rejected.shape() || chosen.len() != DATA_DIM {
            return Err(ApoError::Tensor(TensorError::ShapeMismatch {
                op: "preference_pair",
                lhs: chosen.shape().to_vec(),
                rhs: rejected.shape().to_vec(),
            }));
        }
        Ok(Self {
            condition,
            chosen,
            rejected,
            source,
        })
    }

    /// Same pair with the roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            condition: self.condition,
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
            source: self.source,
        }
    }
}

/// Pairs stacked row-wise for batched evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceBatch {
    pub conds: Vec<usize>,
    pub chosen: Tensor,
    pub rejected: Tensor,
}

impl PreferenceBatch {
    pub fn from_pairs(pairs: &[PreferencePair]) -> Result<Self, ApoError> {
        if pairs.is_empty() {
            return Err(ApoError::EmptyBatch);
        }
        let stack = |f: fn(&PreferencePair) -> &Tensor| -> Result<Tensor, ApoError> {
            let mut data = Vec::with_capacity(pairs.len() * DATA_DIM);
            for p in pairs {
                data.extend_from_slice(f(p).data());
            }
            Ok(Tensor::new(vec![pairs.len(), DATA_DIM], data)?)
        };
        Ok(Self {
            conds: pairs.iter().map(|p| p.condition).collect(),
            chosen: stack(|p| &p.chosen)?,
            rejected: stack(|p| &p.rejected)?,
        })
    }

    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            conds: self.conds.clone(),
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
        }
    }
}

/// Independent corruption noise for the chosen and rejected rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairNoise {
    pub eps_chosen: Tensor,
    pub eps_rejected: Tensor,
}

impl PairNoise {
    pub fn draw<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        let mut gen = || {
            Tensor::new(vec![rows, DATA_DIM], rng::normals(rng, rows * DATA_DIM))
                .expect("rows * DATA_DIM values")
        };
        let eps_chosen = gen();
        let eps_rejected = gen();
        Self {
            eps_chosen,
            eps_rejected,
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            eps_chosen: self.eps_rejected.clone(),
            eps_rejected: self.eps_chosen.clone(),
        }
    }
}

/// One timestep's loss recorded on a tape.
#[derive(Debug, Clone)]
pub struct DpoTerm {
    pub loss: Var,
    /// `Δ_l − Δ_w` per pair.
    pub margins: Vec<f64>,
}

fn residual_sq(eps: &Tensor, pred: &Tensor) -> Result<Vec<f64>, ApoError> {
    Ok(eps.sub(pred)?.row_sq_norms())
}

/// Records the mean pair loss at timestep `t` on `tape`.
///
/// The reference is evaluated off-tape; only the policy contributes gradients.
#[allow(clippy::too_many_arguments)]
pub fn dpo_term_on_tape(
    tape: &mut Tape,
    policy: &EpsModel,
    policy_trainable: bool,
    reference: &dyn EpsPredictor,
    batch: &PreferenceBatch,
    t: usize,
    noise: &PairNoise,
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<DpoTerm, ApoError> {
    let n = batch.len();
    let ts = vec![t; n];
    let xw = forward_diffuse(&batch.chosen, t, &noise.eps_chosen, sched)?;
    let xl = forward_diffuse(&batch.rejected, t, &noise.eps_rejected, sched)?;

    let ref_w = residual_sq(&noise.eps_chosen, &reference.predict(&xw, &ts, &batch.conds, Pass::Normal)?)?;
    let ref_l = residual_sq(&noise.eps_rejected, &reference.predict(&xl, &ts, &batch.conds, Pass::Normal)?)?;

    let bound = policy.bind(tape, policy_trainable)?;
    let mut policy_residual = |x: Tensor, eps: &Tensor| -> Result<Var, ApoError> {
        let x = tape.constant(x);
        let pred = policy.forward_on(tape, &bound, x, &ts, &batch.conds, Pass::Normal)?;
        let target = tape.constant(eps.clone());
        let diff = tape.sub(target, pred)?;
        let sq = tape.square(diff)?;
        Ok(tape.row_sum(sq)?)
    };
    let pol_w = policy_residual(xw, &noise.eps_chosen)?;
    let pol_l = policy_residual(xl, &noise.eps_rejected)?;

    let ref_w = tape.constant(Tensor::from_vec(ref_w));
    let ref_l = tape.constant(Tensor::from_vec(ref_l));
    let delta_w = tape.sub(pol_w, ref_w)?;
    let delta_l = tape.sub(pol_l, ref_l)?;
    let margin = tape.sub(delta_l, delta_w)?;
    let margins = tape.value(margin).data().to_vec();
    let scaled = tape.scale(margin, beta)?;
    let prob = tape.sigmoid(scaled)?;
    let log_prob = tape.log(prob)?;
    let mean = tape.mean(log_prob)?;
    let loss = tape.scale(mean, -1.0)?;
    Ok(DpoTerm { loss, margins })
}

/// Loss of a single pair at timestep `t` with freshly drawn noise.
#[allow(clippy::too_many_arguments)]
pub fn dpo_pair_loss<R: Rng + ?Sized>(
    policy: &EpsModel,
    reference: &EpsModel,
    pair: &PreferencePair,
    t: usize,
    beta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64, ApoError> {
    sched.check(t)?;
    let batch = PreferenceBatch::from_pairs(std::slice::from_ref(pair))?;
    let noise = PairNoise::draw(1, rng);
    let mut tape = Tape::new();
    let term = dpo_term_on_tape(&mut tape, policy, false, reference, &batch, t, &noise, beta, sched)?;
    Ok(tape.value(term.loss).item())
}

/// Result of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    /// Sum of the per-timestep losses.
    pub loss_total: f64,
    /// Mean of `Δ_l − Δ_w` over timesteps and pairs.
    pub margin: f64,
    pub per_timestep: Vec<f64>,
}

impl WindowOutcome {
    /// Loss per timestep, comparable across window sizes.
    pub fn loss_per_timestep(&self) -> f64 {
        self.loss_total / self.per_timestep.len() as f64
    }
}

/// Draws the per-timestep noise for a window, in window order.
pub fn draw_window_noise<R: Rng + ?Sized>(rows: usize, window: &WindowDraw, rng: &mut R) -> Vec<PairNoise> {
    window.timesteps.iter().map(|_| PairNoise::draw(rows, rng)).collect()
}

fn run_window(
    policy: &mut EpsModel,
    reference: &dyn EpsPredictor,
    batch: &PreferenceBatch,
    window: &WindowDraw,
    noises: &[PairNoise],
    beta: f64,
    sched: &NoiseSchedule,
    accumulate: bool,
) -> Result<WindowOutcome, ApoError> {
    if noises.len() != window.len() {
        return Err(ApoError::NoiseCount {
            expected: window.len(),
            got: noises.len(),
        });
    }
    let mut per_timestep = Vec::with_capacity(window.len());
    let mut margin_sum = 0.0;
    let mut margin_count = 0usize;
    for (&t, noise) in window.timesteps.iter().zip(noises) {
        let abort = |source: ApoError| ApoError::WindowAborted {
            timestep: t,
            reason: source.to_string(),
        };
        sched.check(t)?;
        let mut tape = Tape::new();
        let term = dpo_term_on_tape(&mut tape, policy, accumulate, reference, batch, t, noise, beta, sched)
            .map_err(abort)?;
        let loss = if accumulate {
            tape.backward_into(term.loss, policy.params_mut())
                .map_err(|e| abort(e.into()))?
        } else {
            tape.value(term.loss).item()
        };
        if !loss.is_finite() {
            return Err(abort(ApoError::NonFiniteLoss));
        }
        per_timestep.push(loss);
        margin_sum += term.margins.iter().sum::<f64>();
        margin_count += term.margins.len();
    }
    Ok(WindowOutcome {
        loss_total: per_timestep.iter().sum(),
        margin: margin_sum / margin_count.max(1) as f64,
        per_timestep,
    })
}

/// Evaluates the window loss without touching gradients.
pub fn window_loss(
    policy: &EpsModel,
    reference: &dyn EpsPredictor,
    batch: &PreferenceBatch,
    window: &WindowDraw,
    noises: &[PairNoise],
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<WindowOutcome, ApoError> {
    let mut scratch = policy.clone();
    run_window(&mut scratch, reference, batch, window, noises, beta, sched, false)
}

/// Adds the gradient of the summed window loss into the policy's gradient
/// slots, one timestep at a time in window order. Slots are not zeroed.
pub fn accumulate_window_gradients(
    policy: &mut EpsModel,
    reference: &dyn EpsPredictor,
    batch: &PreferenceBatch,
    window: &WindowDraw,
    noises: &[PairNoise],
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<WindowOutcome, ApoError> {
    run_window(policy, reference, batch, window, noises, beta, sched, true)
}

/// One optimizer update from a full window on the same batch of pairs.
///
/// Gradients are zeroed, summed over all window timesteps, and applied with a
/// single optimizer step. If any timestep yields a non-finite loss the window
/// is abandoned: gradients are cleared and no update happens.
#[allow(clippy::too_many_arguments)]
pub fn apo_window_step<R: Rng + ?Sized>(
    policy: &mut EpsModel,
    reference: &dyn EpsPredictor,
    batch: &PreferenceBatch,
    window: &WindowDraw,
    beta: f64,
    sched: &NoiseSchedule,
    optimizer: &mut AdamW,
    rng: &mut R,
) -> Result<WindowOutcome, ApoError> {
    let noises = draw_window_noise(batch.len(), window, rng);
    apo_window_step_with_noise(policy, reference, batch, window, &noises, beta, sched, optimizer)
}

/// [`apo_window_step`] with explicit per-timestep noise.
#[allow(clippy::too_many_arguments)]
pub fn apo_window_step_with_noise(
    policy: &mut EpsModel,
    reference: &dyn EpsPredictor,
    batch: &PreferenceBatch,
    window: &WindowDraw,
    noises: &[PairNoise],
    beta: f64,
    sched: &NoiseSchedule,
    optimizer: &mut AdamW,
) -> Result<WindowOutcome, ApoError> {
    policy.params_mut().zero_grad();
    match accumulate_window_gradients(policy, reference, batch, window, noises, beta, sched) {
        Ok(outcome) => {
            optimizer.step(policy.params_mut());
            Ok(outcome)
        }
        Err(e) => {
            policy.params_mut().zero_grad();
            Err(e)
        }
    }
}
