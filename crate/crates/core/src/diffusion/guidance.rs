use serde::{Deserialize, Serialize};

use super::{DiffusionError, EpsPredictor, Pass};
use crate::ndtensor::Tensor;

/// Strengths of the classifier-free (`omega`) and perturbation (`lambda`) terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub lambda: f64,
}

impl GuidanceConfig {
    pub const OFF: GuidanceConfig = GuidanceConfig {
        omega: 0.0,
        lambda: 0.0,
    };

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !self.omega.is_finite() || !self.lambda.is_finite() || self.omega < 0.0 || self.lambda < 0.0
        {
            return Err(DiffusionError::InvalidGuidance(*self));
        }
        Ok(())
    }

    /// Model evaluations needed per guided prediction.
    pub fn evaluations(&self) -> usize {
        1 + usize::from(self.omega != 0.0) + usize::from(self.lambda != 0.0)
    }
}

/// A prediction together with the number of model evaluations it consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Guided {
    pub eps: Tensor,
    pub nfe: usize,
}

fn null_conds<P: EpsPredictor + ?Sized>(model: &P, n: usize) -> Vec<usize> {
    vec![model.null_condition(); n]
}

fn cfg_combine(cond: &Tensor, uncond: &Tensor, omega: f64) -> Result<Tensor, DiffusionError> {
    Ok(cond.zip_with(uncond, "cfg", |c, u| (1.0 + omega) * c - omega * u)?)
}

/// `(1 + ω)·ε(x_t, t, c) − ω·ε(x_t, t, ∅)`; a single evaluation when ω = 0.
pub fn cfg_predict<P: EpsPredictor + ?Sized>(
    model: &P,
    x_t: &Tensor,
    ts: &[usize],
    conds: &[usize],
    omega: f64,
) -> Result<Guided, DiffusionError> {
    let cond = model.predict(x_t, ts, conds, Pass::Normal)?;
    if omega == 0.0 {
        return Ok(Guided { eps: cond, nfe: 1 });
    }
    let uncond = model.predict(x_t, ts, &null_conds(model, conds.len()), Pass::Normal)?;
    Ok(Guided {
        eps: cfg_combine(&cond, &uncond, omega)?,
        nfe: 2,
    })
}

/// `ε(x_t, t, c) − ε_skip(x_t, t, c)`.
pub fn perturbation_predict<P: EpsPredictor + ?Sized>(
    model: &P,
    x_t: &Tensor,
    ts: &[usize],
    conds: &[usize],
) -> Result<Guided, DiffusionError> {
    let normal = model.predict(x_t, ts, conds, Pass::Normal)?;
    let skip = model.predict(x_t, ts, conds, Pass::Skip)?;
    Ok(Guided {
        eps: normal.sub(&skip)?,
        nfe: 2,
    })
}

/// CFG plus `λ` times the perturbation term, sharing the conditional pass.
pub fn guided_predict<P: EpsPredictor + ?Sized>(
    model: &P,
    x_t: &Tensor,
    ts: &[usize],
    conds: &[usize],
    g: &GuidanceConfig,
) -> Result<Guided, DiffusionError> {
    let cond = model.predict(x_t, ts, conds, Pass::Normal)?;
    let mut nfe = 1;
    let mut eps = if g.omega != 0.0 {
        let uncond = model.predict(x_t, ts, &null_conds(model, conds.len()), Pass::Normal)?;
        nfe += 1;
        cfg_combine(&cond, &uncond, g.omega)?
    } else {
        cond.clone()
    };
    if g.lambda != 0.0 {
        let skip = model.predict(x_t, ts, conds, Pass::Skip)?;
        nfe += 1;
        eps.axpy(g.lambda, &cond.sub(&skip)?)?;
    }
    Ok(Guided { eps, nfe })
}
