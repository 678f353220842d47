use super::DiffusionError;
use crate::ndtensor::Tensor;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Discrete variance-preserving schedule over timesteps `0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-β schedule: β_t evenly spaced from 1e-4 to 0.02 for t = 1..=T,
    /// and ᾱ_t the running product of (1 − β_i).
    pub fn linear(t_max: usize) -> Result<Self, DiffusionError> {
        if t_max < 2 {
            return Err(DiffusionError::ScheduleTooShort(t_max));
        }
        let mut alpha_bar = Vec::with_capacity(t_max + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=t_max {
            let beta = BETA_START + (BETA_END - BETA_START) * (t - 1) as f64 / (t_max - 1) as f64;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { t_max, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.t_max {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.t_max });
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1 − ᾱ_t))`
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` at a single timestep.
pub fn forward_diffuse(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    sched.check(t)?;
    let (a, b) = sched.coefficients(t);
    Ok(x0.zip_with(eps, "forward_diffuse", |x, e| a * x + b * e)?)
}

/// Row-wise variant of [`forward_diffuse`]: row `i` is corrupted to `ts[i]`.
pub fn forward_diffuse_rows(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    x0.expect_same_shape(eps, "forward_diffuse")?;
    if ts.len() != x0.rows() {
        return Err(DiffusionError::BatchMismatch {
            expected: x0.rows(),
            got: ts.len(),
        });
    }
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        sched.check(t)?;
        let (a, b) = sched.coefficients(t);
        let e = eps.row(i);
        for (o, &ev) in out.row_mut(i).iter_mut().zip(e) {
            *o = a * *o + b * ev;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn endpoints() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        // straight product oracle
        let mut prod = 1.0;
        for t in 1..=1000 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-18);
        assert!(s.alpha_bar(1000) < 1e-4 && s.alpha_bar(1000) > 0.0);
    }

    #[test]
    fn monotone_and_variance_preserving() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert!(s.alpha_bar(0) > 0.999);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let (a, b) = s.coefficients(t);
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_short_schedule_is_rejected() {
        assert!(matches!(
            NoiseSchedule::linear(1),
            Err(DiffusionError::ScheduleTooShort(1))
        ));
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let x0 = Tensor::from_rows(&[[0.3, -1.7]]);
        let eps = Tensor::from_rows(&[[5.0, 5.0]]);
        assert_eq!(forward_diffuse(&x0, 0, &eps, &s).unwrap(), x0);
        assert!(matches!(
            forward_diffuse(&x0, 1001, &eps, &s),
            Err(DiffusionError::TimestepOutOfRange { .. })
        ));

        // ᾱ = 0.25 via a hand-built schedule
        let quarter = NoiseSchedule {
            t_max: 2,
            alpha_bar: vec![1.0, 0.25, 0.1],
        };
        let x = forward_diffuse(
            &Tensor::from_rows(&[[2.0, 0.0]]),
            1,
            &Tensor::from_rows(&[[0.0, 2.0]]),
            &quarter,
        )
        .unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-15);
        assert!((x.data()[1] - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn forward_diffuse_variance_is_unit() {
        let s = NoiseSchedule::linear(1000).unwrap();
        let mut r = rng::seeded(11);
        let n = 100_000;
        for &t in &[50usize, 400, 900] {
            let x0 = Tensor::new(vec![n, 2], rng::normals(&mut r, 2 * n)).unwrap();
            let eps = Tensor::new(vec![n, 2], rng::normals(&mut r, 2 * n)).unwrap();
            let xt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            for d in 0..2 {
                let col: Vec<f64> = (0..n).map(|i| xt.row(i)[d]).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                assert!((var - 1.0).abs() < 0.02, "t={t} var={var}");
            }
        }
    }
}
