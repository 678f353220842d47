use super::*;
use crate::diffusion::{EpsModel, EpsPredictor, ModelArch, NoiseSchedule, Pass};
use crate::ndtensor::{AdamW, AdamWConfig, ParamSet, Tensor};
use crate::rng;

fn tiny_arch() -> ModelArch {
    ModelArch {
        time_dim: 2,
        cond_dim: 2,
        hidden: 3,
        hidden_layers: 2,
        num_conditions: 2,
    }
}

fn pair(c: usize, w: [f64; 2], l: [f64; 2]) -> PreferencePair {
    PreferencePair::new(c, Tensor::from_vec(w.to_vec()), Tensor::from_vec(l.to_vec()), PairSource::Offline)
        .unwrap()
}

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(1000).unwrap()
}

fn window(ts: &[usize]) -> WindowDraw {
    WindowDraw {
        timesteps: ts.to_vec(),
        shift_used: 1.0,
        regimes: ts
            .iter()
            .map(|&t| if t >= 800 { Regime::High } else { Regime::Low })
            .collect(),
    }
}

#[test]
fn identical_policy_and_reference_give_ln2() {
    let s = sched();
    let m = EpsModel::new(ModelArch::default(), 17).unwrap();
    let mut r = rng::seeded(4);
    for (t, beta) in [(0, 1.0), (1, 0.1), (450, 5.0), (1000, 1000.0)] {
        let p = pair(3, [1.0, -0.5], [0.0, 2.0]);
        let loss = dpo_pair_loss(&m, &m, &p, t, beta, &s, &mut r).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "t={t} loss={loss}");
    }
}

/// Always predicts `(1, 0)`.
struct UnitX;
impl EpsPredictor for UnitX {
    fn null_condition(&self) -> usize {
        2
    }
    fn predict(
        &self,
        x: &Tensor,
        _: &[usize],
        _: &[usize],
        _: Pass,
    ) -> Result<Tensor, crate::diffusion::DiffusionError> {
        Ok(Tensor::from_rows(&vec![[1.0, 0.0]; x.rows()]))
    }
}

fn zero_output(mut m: EpsModel) -> EpsModel {
    for name in ["out.w", "out.b"] {
        m.params_mut().get_mut(name).unwrap().value.data_mut().fill(0.0);
    }
    m
}

#[test]
fn stub_residuals_give_expected_loss() {
    // Policy predicts 0, reference predicts (1, 0), t = 0 so x_t = x0.
    // ε^w = 0 -> Δ_w = 0 - 1 = -1;  ε^l = (1, 0) -> Δ_l = 1 - 0 = +1.
    let policy = zero_output(EpsModel::new(tiny_arch(), 1).unwrap());
    let batch = PreferenceBatch::from_pairs(&[pair(0, [2.0, 0.0], [0.0, 2.0])]).unwrap();
    let noise = PairNoise {
        eps_chosen: Tensor::from_rows(&[[0.0, 0.0]]),
        eps_rejected: Tensor::from_rows(&[[1.0, 0.0]]),
    };
    let out = window_loss(&policy, &UnitX, &batch, &window(&[0]), &[noise], 1.0, &sched()).unwrap();
    assert_eq!(out.margin, 2.0);
    let expected = -(1.0 / (1.0 + (-2.0f64).exp())).ln();
    assert!((out.loss_total - expected).abs() < 1e-15);
    assert!((out.loss_total - 0.126928).abs() < 1e-6);
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Independent forward pass of the tiny MLP, written out with plain loops.
fn naive_eps(p: &ParamSet, x: [f64; 2], t: usize, c: usize) -> [f64; 2] {
    let v = |n: &str| p.value(n).unwrap().data().to_vec();
    let (emb, w0, b0, w1, b1, wo, bo) = (
        v("cond_embed"),
        v("hidden0.w"),
        v("hidden0.b"),
        v("hidden1.w"),
        v("hidden1.b"),
        v("out.w"),
        v("out.b"),
    );
    let tf = t as f64;
    let input = [x[0], x[1], tf.sin(), tf.cos(), emb[c * 2], emb[c * 2 + 1]];
    let mut h0 = [0.0; 3];
    for j in 0..3 {
        let mut acc = b0[j];
        for i in 0..6 {
            acc += input[i] * w0[i * 3 + j];
        }
        h0[j] = silu(acc);
    }
    let mut h1 = [0.0; 3];
    for j in 0..3 {
        let mut acc = b1[j];
        for i in 0..3 {
            acc += h0[i] * w1[i * 3 + j];
        }
        h1[j] = silu(acc);
    }
    let mut out = [0.0; 2];
    for j in 0..2 {
        let mut acc = bo[j];
        for i in 0..3 {
            acc += h1[i] * wo[i * 2 + j];
        }
        out[j] = acc;
    }
    out
}

#[test]
fn straight_line_reimplementation_matches() {
    let s = sched();
    let policy = EpsModel::new(tiny_arch(), 21).unwrap();
    let reference = EpsModel::new(tiny_arch(), 22).unwrap();
    let xw = [1.2, -0.3];
    let xl = [-0.8, 0.6];
    let ew = [0.4, -1.1];
    let el = [0.9, 0.2];
    let (t, c, beta) = (640, 1, 0.7);

    let ab = s.alpha_bar(t);
    let corrupt = |x: [f64; 2], e: [f64; 2]| [ab.sqrt() * x[0] + (1.0 - ab).sqrt() * e[0], ab.sqrt() * x[1] + (1.0 - ab).sqrt() * e[1]];
    let sq = |e: [f64; 2], p: [f64; 2]| (e[0] - p[0]).powi(2) + (e[1] - p[1]).powi(2);
    let (xwt, xlt) = (corrupt(xw, ew), corrupt(xl, el));
    let dw = sq(ew, naive_eps(policy.params(), xwt, t, c)) - sq(ew, naive_eps(reference.params(), xwt, t, c));
    let dl = sq(el, naive_eps(policy.params(), xlt, t, c)) - sq(el, naive_eps(reference.params(), xlt, t, c));
    let expected = -(1.0 / (1.0 + (-beta * (dl - dw)).exp())).ln();

    let batch = PreferenceBatch::from_pairs(&[pair(c, xw, xl)]).unwrap();
    let noise = PairNoise {
        eps_chosen: Tensor::from_rows(&[ew]),
        eps_rejected: Tensor::from_rows(&[el]),
    };
    let out = window_loss(&policy, &reference, &batch, &window(&[t]), &[noise], beta, &s).unwrap();
    assert!((out.loss_total - expected).abs() < 1e-12, "{} vs {expected}", out.loss_total);
    assert!((out.margin - (dl - dw)).abs() < 1e-12);
}

#[test]
fn equal_window_draws_with_identical_models_sum_to_k_ln2() {
    let s = sched();
    let m = EpsModel::new(ModelArch::default(), 3).unwrap();
    let batch = PreferenceBatch::from_pairs(&[pair(2, [0.0, 2.0], [1.0, 1.0])]).unwrap();
    let w = window(&[900; 5]);
    let noises = draw_window_noise(1, &w, &mut rng::seeded(1));
    let out = window_loss(&m, &m, &batch, &w, &noises, 1.0, &s).unwrap();
    assert!((out.loss_total - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(out.margin, 0.0);
}

#[test]
fn window_gradient_is_sum_of_per_timestep_gradients() {
    let s = sched();
    let mut policy = EpsModel::new(tiny_arch(), 5).unwrap();
    let reference = EpsModel::new(tiny_arch(), 6).unwrap();
    let batch = PreferenceBatch::from_pairs(&[pair(0, [1.0, 0.0], [0.3, 0.3]), pair(1, [0.0, 1.0], [2.0, 2.0])]).unwrap();
    let w = window(&[950, 870, 820, 990, 311]);
    let noises = draw_window_noise(2, &w, &mut rng::seeded(2));

    policy.params_mut().zero_grad();
    accumulate_window_gradients(&mut policy, &reference, &batch, &w, &noises, 1.0, &s).unwrap();
    let together = policy.params().clone();

    let mut summed: Option<ParamSet> = None;
    for (i, &t) in w.timesteps.iter().enumerate() {
        policy.params_mut().zero_grad();
        accumulate_window_gradients(&mut policy, &reference, &batch, &window(&[t]), &noises[i..=i], 1.0, &s).unwrap();
        match &mut summed {
            None => summed = Some(policy.params().clone()),
            Some(acc) => acc.merge_grads(policy.params()).unwrap(),
        }
    }
    let summed = summed.unwrap();
    for (a, b) in together.iter().zip(summed.iter()) {
        assert!(a.grad.max_abs_diff(&b.grad) < 1e-12, "{}", a.name);
    }
}

fn fd_relative_error(
    policy: &EpsModel,
    reference: &EpsModel,
    batch: &PreferenceBatch,
    w: &WindowDraw,
    noises: &[PairNoise],
    beta: f64,
    s: &NoiseSchedule,
) -> f64 {
    let mut analytic = policy.clone();
    analytic.params_mut().zero_grad();
    accumulate_window_gradients(&mut analytic, reference, batch, w, noises, beta, s).unwrap();
    let h = 1e-5;
    let mut num_sq = 0.0;
    let mut err_sq = 0.0;
    for pos in 0..policy.params().len() {
        for k in 0..policy.params().entry(pos).value.len() {
            let eval = |delta: f64| {
                let mut m = policy.clone();
                m.params_mut().entry_mut(pos).value.data_mut()[k] += delta;
                window_loss(&m, reference, batch, w, noises, beta, s).unwrap().loss_total
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.params().entry(pos).grad.data()[k];
            num_sq += fd * fd;
            err_sq += (fd - an).powi(2);
        }
    }
    (err_sq / num_sq).sqrt()
}

#[test]
fn window_gradient_matches_finite_differences() {
    let s = sched();
    let policy = EpsModel::new(tiny_arch(), 31).unwrap();
    let reference = EpsModel::new(tiny_arch(), 32).unwrap();
    let batch = PreferenceBatch::from_pairs(&[pair(1, [1.5, -0.2], [-0.4, 0.9])]).unwrap();
    let w = window(&[1000, 900, 850, 801, 120]);
    let noises = draw_window_noise(1, &w, &mut rng::seeded(7));
    let rel = fd_relative_error(&policy, &reference, &batch, &w, &noises, 2.0, &s);
    assert!(rel < 1e-6, "relative error {rel}");
}

#[test]
fn one_step_decreases_loss_at_fixed_draws() {
    let s = sched();
    let mut policy = EpsModel::new(ModelArch::default(), 41).unwrap();
    let reference = EpsModel::new(ModelArch::default(), 42).unwrap();
    let batch = PreferenceBatch::from_pairs(&[pair(4, [-2.0, 0.0], [-1.0, 0.5])]).unwrap();
    let w = draw_window(&ApoSamplerConfig::default(), &mut rng::seeded(3)).unwrap();
    let noises = draw_window_noise(1, &w, &mut rng::seeded(4));
    let before = window_loss(&policy, &reference, &batch, &w, &noises, 1.0, &s).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    apo_window_step_with_noise(&mut policy, &reference, &batch, &w, &noises, 1.0, &s, &mut opt).unwrap();
    let after = window_loss(&policy, &reference, &batch, &w, &noises, 1.0, &s).unwrap();
    assert!(after.loss_total < before.loss_total, "{} -> {}", before.loss_total, after.loss_total);
}

#[test]
fn reference_is_untouched_by_window_steps() {
    let s = sched();
    let mut policy = EpsModel::new(ModelArch::default(), 1).unwrap();
    let reference = policy.clone();
    let frozen = reference.params().to_bytes();
    let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, ..Default::default() });
    let mut sampler = WindowSampler::new(ApoSamplerConfig::default(), TimestepMode::Apo).unwrap();
    let mut r = rng::seeded(9);
    let batch = PreferenceBatch::from_pairs(&[pair(0, [2.0, 0.0], [1.0, 1.0])]).unwrap();
    for _ in 0..5 {
        let w = sampler.next_window(&mut r).unwrap();
        apo_window_step(&mut policy, &reference, &batch, &w, 1.0, &s, &mut opt, &mut r).unwrap();
    }
    assert_eq!(reference.params().to_bytes(), frozen);
    assert!(!policy.params().values_bit_identical(reference.params()));
}

#[test]
fn swapping_roles_negates_margin() {
    let s = sched();
    let policy = EpsModel::new(ModelArch::default(), 51).unwrap();
    let reference = EpsModel::new(ModelArch::default(), 52).unwrap();
    let batch = PreferenceBatch::from_pairs(&[pair(6, [0.0, -2.0], [0.5, -1.0])]).unwrap();
    let w = window(&[880, 200]);
    let noises = draw_window_noise(1, &w, &mut rng::seeded(5));
    let swapped_noise: Vec<_> = noises.iter().map(PairNoise::swapped).collect();
    let a = window_loss(&policy, &reference, &batch, &w, &noises, 1.0, &s).unwrap();
    let b = window_loss(&policy, &reference, &batch.swapped(), &w, &swapped_noise, 1.0, &s).unwrap();
    assert!((a.margin + b.margin).abs() < 1e-12);
    assert!(a.loss_total > 0.0 && a.loss_total.is_finite());
    assert!(b.loss_total > 0.0 && b.loss_total.is_finite());
}

#[test]
fn non_finite_window_is_aborted_without_update() {
    let s = sched();
    let mut policy = EpsModel::new(tiny_arch(), 1).unwrap();
    let reference = EpsModel::new(tiny_arch(), 2).unwrap();
    // a huge β saturates the sigmoid to exactly zero for a negative margin
    let batch = PreferenceBatch::from_pairs(&[pair(0, [50.0, 50.0], [-50.0, 50.0])]).unwrap();
    let w = window(&[0]);
    let noises = draw_window_noise(1, &w, &mut rng::seeded(1));
    let plain = window_loss(&policy, &reference, &batch, &w, &noises, 1.0, &s).unwrap();
    let beta = if plain.margin > 0.0 { -1e6 } else { 1e6 };
    let before = policy.params().clone();
    let mut opt = AdamW::new(AdamWConfig::default());
    let err = apo_window_step_with_noise(&mut policy, &reference, &batch, &w, &noises, beta, &s, &mut opt);
    assert!(matches!(err, Err(ApoError::WindowAborted { timestep: 0, .. })), "{err:?}");
    assert!(policy.params().values_bit_identical(&before));
    assert!(policy.params().iter().all(|e| e.grad.data().iter().all(|&g| g == 0.0)));
    assert_eq!(opt.step_count(), 0);
}

#[test]
fn matched_draws_give_identical_loss_in_either_mode() {
    // The uniform baseline and the trajectory-aware sampler differ only in
    // how window timesteps are produced; the loss path is shared.
    let s = sched();
    let policy = EpsModel::new(ModelArch::default(), 61).unwrap();
    let reference = EpsModel::new(ModelArch::default(), 62).unwrap();
    let batch = PreferenceBatch::from_pairs(&[pair(1, [1.0, 1.0], [0.0, 0.0])]).unwrap();
    let cfg = ApoSamplerConfig {
        shift_set: vec![1.0],
        gamma: 0.0,
        ..Default::default()
    };
    let mut r = rng::seeded(12);
    let apo = draw_window(&cfg, &mut r).unwrap();
    // with s = 1 and γ = 0 every anchor is round(σT), i.e. an unshifted draw
    let uniform = window(&apo.timesteps);
    let noises = draw_window_noise(1, &apo, &mut rng::seeded(13));
    let a = window_loss(&policy, &reference, &batch, &apo, &noises, 1.0, &s).unwrap();
    let b = window_loss(&policy, &reference, &batch, &uniform, &noises, 1.0, &s).unwrap();
    assert_eq!(a.loss_total.to_bits(), b.loss_total.to_bits());
}
