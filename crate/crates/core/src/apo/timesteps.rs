use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ApoError;
use crate::rng;

/// Timestep sampling parameters for one preference window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApoSamplerConfig {
    /// Candidate schedule shifts; one is drawn uniformly per stride.
    pub shift_set: Vec<f64>,
    /// Standard deviation of the Gaussian offset, in timestep units.
    pub gamma: f64,
    /// Fraction of T at which the high-noise regime starts.
    pub high_threshold: f64,
    pub n_high: usize,
    pub n_low: usize,
    /// Optimizer steps that share one drawn shift.
    pub stride: usize,
    pub t_max: usize,
}

impl Default for ApoSamplerConfig {
    fn default() -> Self {
        Self {
            shift_set: vec![3.0, 4.0, 5.0, 6.0],
            gamma: 5.0,
            high_threshold: 0.8,
            n_high: 4,
            n_low: 1,
            stride: 4,
            t_max: 1000,
        }
    }
}

impl ApoSamplerConfig {
    pub fn window_size(&self) -> usize {
        self.n_high + self.n_low
    }

    /// First timestep of the high-noise regime, `round(threshold · T)`.
    pub fn high_start(&self) -> usize {
        round_half_up(self.high_threshold * self.t_max as f64)
    }

    pub fn validate(&self) -> Result<(), ApoError> {
        let fail = |msg: String| Err(ApoError::InvalidConfig(msg));
        if self.shift_set.is_empty() || self.shift_set.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return fail(format!("shift_set must be nonempty and positive: {:?}", self.shift_set));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return fail(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.high_threshold > 0.0 && self.high_threshold < 1.0) {
            return fail(format!("high_threshold must lie in (0, 1), got {}", self.high_threshold));
        }
        if self.window_size() == 0 {
            return fail("window must contain at least one timestep".into());
        }
        if self.stride == 0 {
            return fail("stride must be >= 1".into());
        }
        if self.t_max < 2 {
            return fail(format!("t_max must be >= 2, got {}", self.t_max));
        }
        let h = self.high_start();
        if h == 0 && self.n_low > 0 {
            return fail("low regime is empty".into());
        }
        Ok(())
    }
}

/// How training timesteps are drawn for a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepMode {
    /// Shifted anchors with Gaussian offsets in a high/low hybrid window.
    #[default]
    Apo,
    /// Independent uniform draws on `[1, T]` (plain Diffusion-DPO).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    High,
    Low,
}

/// Timesteps for one accumulation window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDraw {
    pub timesteps: Vec<usize>,
    pub shift_used: f64,
    pub regimes: Vec<Regime>,
}

impl WindowDraw {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn count(&self, regime: Regime) -> usize {
        self.regimes.iter().filter(|&&r| r == regime).count()
    }
}

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// `σ̃ = s·σ / (1 + (s − 1)·σ)`
pub fn shift_sigma(sigma: f64, s: f64) -> Result<f64, ApoError> {
    if !(0.0..=1.0).contains(&sigma) || !(s > 0.0) || !s.is_finite() {
        return Err(ApoError::OutOfDomain { sigma, shift: s });
    }
    Ok(s * sigma / (1.0 + (s - 1.0) * sigma))
}

/// `round(σ̃ · T)`, rounding halves up.
pub fn anchor_timestep(sigma: f64, s: f64, t_max: usize) -> Result<usize, ApoError> {
    let shifted = shift_sigma(sigma, s)?;
    Ok(round_half_up(shifted * t_max as f64).min(t_max))
}

/// `clip(round(t + γ·z), 0, T)` with `z ~ N(0, 1)`.
///
/// One normal variate is consumed even when `gamma` is zero.
pub fn perturb_timestep<R: Rng + ?Sized>(t: usize, gamma: f64, t_max: usize, rng: &mut R) -> usize {
    offset_timestep(t, gamma * rng::normal(rng), t_max)
}

/// Applies a fixed offset, rounds and clips to `[0, T]`.
pub fn offset_timestep(t: usize, offset: f64, t_max: usize) -> usize {
    let moved = t as f64 + offset;
    if moved <= 0.0 {
        return 0;
    }
    round_half_up(moved).min(t_max)
}

/// Builds a window from explicit noise levels: each level is shifted,
/// anchored, perturbed and re-clipped into its regime.
pub fn window_from_sigmas<R: Rng + ?Sized>(
    cfg: &ApoSamplerConfig,
    shift: f64,
    high_sigmas: &[f64],
    low_sigmas: &[f64],
    rng: &mut R,
) -> Result<WindowDraw, ApoError> {
    let high_start = cfg.high_start();
    let mut timesteps = Vec::with_capacity(high_sigmas.len() + low_sigmas.len());
    let mut regimes = Vec::with_capacity(timesteps.capacity());
    for &sigma in high_sigmas {
        let anchor = anchor_timestep(sigma, shift, cfg.t_max)?;
        let t = perturb_timestep(anchor, cfg.gamma, cfg.t_max, rng);
        timesteps.push(t.clamp(high_start, cfg.t_max));
        regimes.push(Regime::High);
    }
    for &sigma in low_sigmas {
        let anchor = anchor_timestep(sigma, shift, cfg.t_max)?;
        let t = perturb_timestep(anchor, cfg.gamma, cfg.t_max, rng);
        timesteps.push(t.min(high_start.saturating_sub(1)));
        regimes.push(Regime::Low);
    }
    Ok(WindowDraw {
        timesteps,
        shift_used: shift,
        regimes,
    })
}

/// One hybrid window with the given shift: `n_high` levels uniform on
/// `[threshold, 1]`, `n_low` uniform on `[0, threshold)`.
pub fn draw_window_with_shift<R: Rng + ?Sized>(
    cfg: &ApoSamplerConfig,
    shift: f64,
    rng: &mut R,
) -> Result<WindowDraw, ApoError> {
    let high: Vec<f64> = (0..cfg.n_high)
        .map(|_| rng.random_range(cfg.high_threshold..=1.0))
        .collect();
    let low: Vec<f64> = (0..cfg.n_low)
        .map(|_| rng.random_range(0.0..cfg.high_threshold))
        .collect();
    window_from_sigmas(cfg, shift, &high, &low, rng)
}

/// One hybrid window with a freshly drawn shift.
pub fn draw_window<R: Rng + ?Sized>(cfg: &ApoSamplerConfig, rng: &mut R) -> Result<WindowDraw, ApoError> {
    let shift = cfg.shift_set[rng.random_range(0..cfg.shift_set.len())];
    draw_window_with_shift(cfg, shift, rng)
}

/// `k` independent timesteps uniform on `[1, T]`, tagged by regime.
pub fn draw_uniform_window<R: Rng + ?Sized>(cfg: &ApoSamplerConfig, k: usize, rng: &mut R) -> WindowDraw {
    let high_start = cfg.high_start();
    let timesteps: Vec<usize> = (0..k).map(|_| rng.random_range(1..=cfg.t_max)).collect();
    let regimes = timesteps
        .iter()
        .map(|&t| if t >= high_start { Regime::High } else { Regime::Low })
        .collect();
    WindowDraw {
        timesteps,
        shift_used: 1.0,
        regimes,
    }
}

/// Stateful window source for a training stage. In APO mode the shift is
/// redrawn from the shift set once every `stride` windows.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    cfg: ApoSamplerConfig,
    mode: TimestepMode,
    current_shift: Option<f64>,
    drawn_in_stride: usize,
}

impl WindowSampler {
    pub fn new(cfg: ApoSamplerConfig, mode: TimestepMode) -> Result<Self, ApoError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            mode,
            current_shift: None,
            drawn_in_stride: 0,
        })
    }

    pub fn config(&self) -> &ApoSamplerConfig {
        &self.cfg
    }

    pub fn mode(&self) -> TimestepMode {
        self.mode
    }

    pub fn next_window<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<WindowDraw, ApoError> {
        match self.mode {
            TimestepMode::Uniform => Ok(draw_uniform_window(&self.cfg, self.cfg.window_size(), rng)),
            TimestepMode::Apo => {
                if self.current_shift.is_none() || self.drawn_in_stride == self.cfg.stride {
                    let set = &self.cfg.shift_set;
                    self.current_shift = Some(set[rng.random_range(0..set.len())]);
                    self.drawn_in_stride = 0;
                }
                self.drawn_in_stride += 1;
                let shift = self.current_shift.expect("set above");
                draw_window_with_shift(&self.cfg, shift, rng)
            }
        }
    }
}
