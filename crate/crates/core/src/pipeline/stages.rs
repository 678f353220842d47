use rand::Rng;

use super::{MetricsRow, Pipeline, PipelineError, PipelineState, Stage, StageReport};
use crate::apo::{apo_window_step, ApoError, PairSource, PreferenceBatch, PreferencePair, WindowSampler};
use crate::config::DpoStageConfig;
use crate::diffusion::{
    dm_loss_on_tape, forward_diffuse_rows, guided_predict, sample_reverse, DiffusionError, EpsModel, EpsPredictor,
    GuidanceConfig, NoiseSchedule, Pass,
};
use crate::ndtensor::{AdamW, AdamWConfig, Tape, Tensor, TensorError};
use crate::rng::{self, StreamRng};
use crate::synthworld::{
    rank_pair, sample_clean, AnchorLabel, EvalReport, OfflineRecord, TaskSpec, Verdict,
};

fn is_non_finite_tensor(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

fn is_non_finite_diffusion(e: &DiffusionError) -> bool {
    match e {
        DiffusionError::NonFiniteState { .. } => true,
        DiffusionError::Tensor(t) => is_non_finite_tensor(t),
        _ => false,
    }
}

fn params_finite(model: &EpsModel) -> bool {
    model.params().iter().all(|e| e.value.data().iter().all(|v| v.is_finite()))
}

/// Clean samples with uniformly drawn conditions, plus matching timesteps and noise.
struct CleanBatch {
    conds: Vec<usize>,
    x0: Tensor,
    ts: Vec<usize>,
    eps: Tensor,
}

fn clean_batch(n: usize, task: &TaskSpec, t_max: usize, r: &mut StreamRng) -> CleanBatch {
    let conds: Vec<usize> = (0..n).map(|_| r.random_range(0..task.num_modes)).collect();
    let mut data = Vec::with_capacity(2 * n);
    for &c in &conds {
        data.extend_from_slice(sample_clean(c, task, r).data());
    }
    let ts = (0..n).map(|_| r.random_range(1..=t_max)).collect();
    let eps = Tensor::new(vec![n, 2], rng::normals(r, 2 * n)).expect("2n values");
    CleanBatch {
        conds,
        x0: Tensor::new(vec![n, 2], data).expect("2n values"),
        ts,
        eps,
    }
}

/// Mean over rows of `‖student(x_t) − guided teacher(x_t)‖²` on `n` fresh
/// `(x_t, t, c)` triples built by forward-diffusing clean task samples.
pub fn distill_gap(
    student: &dyn EpsPredictor,
    teacher: &dyn EpsPredictor,
    guidance: &GuidanceConfig,
    task: &TaskSpec,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64, DiffusionError> {
    let mut r = rng::seeded(seed);
    let b = clean_batch(n, task, sched.t_max(), &mut r);
    let x_t = forward_diffuse_rows(&b.x0, &b.ts, &b.eps, sched)?;
    let target = guided_predict(teacher, &x_t, &b.ts, &b.conds, guidance)?.eps;
    let pred = student.predict(&x_t, &b.ts, &b.conds, Pass::Normal)?;
    let gaps = pred.sub(&target)?.row_sq_norms();
    Ok(gaps.iter().sum::<f64>() / n as f64)
}

/// Cosine decay from `base` at the first step to `base / 10` at the last.
pub(super) fn cosine_lr(base: f64, step: usize, steps: usize) -> f64 {
    let progress = (step - 1) as f64 / steps.saturating_sub(1).max(1) as f64;
    base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Bookkeeping shared by every stage: loss logging and periodic evaluation.
struct Logger<'a> {
    pipeline: &'a Pipeline,
    stage: Stage,
    steps: usize,
    guidance: Option<GuidanceConfig>,
    pending_loss: Vec<f64>,
    pending_margin: Vec<f64>,
    report: StageReport,
}

impl<'a> Logger<'a> {
    fn start(
        pipeline: &'a Pipeline,
        stage: Stage,
        steps: usize,
        state: &mut PipelineState,
        guidance: Option<GuidanceConfig>,
    ) -> Result<Self, PipelineError> {
        let mut logger = Self {
            pipeline,
            stage,
            steps,
            guidance,
            pending_loss: Vec::new(),
            pending_margin: Vec::new(),
            report: StageReport::new(stage),
        };
        let eval = logger.eval(0, &state.policy)?;
        state.metrics.push(MetricsRow::new(stage, 0).with_eval(&eval));
        logger.report.evals.push((0, eval));
        Ok(logger)
    }

    fn eval(&self, step: usize, model: &EpsModel) -> Result<EvalReport, PipelineError> {
        self.pipeline
            .evaluate_model(model, self.guidance.as_ref())
            .map_err(|e| match e {
                PipelineError::Diffusion(d) if is_non_finite_diffusion(&d) => PipelineError::NonFinite {
                    stage: self.stage,
                    step,
                    reason: format!("evaluation: {d}"),
                },
                other => other,
            })
    }

    /// Records step `step` (1-based) and emits a metrics row when due.
    fn record(
        &mut self,
        step: usize,
        loss: f64,
        margin: Option<f64>,
        state: &mut PipelineState,
    ) -> Result<(), PipelineError> {
        self.report.updates += 1;
        self.report.losses.push(loss);
        self.pending_loss.push(loss);
        if let Some(m) = margin {
            self.report.margins.push(m);
            self.pending_margin.push(m);
        }
        self.flush(step, state)
    }

    fn flush(&mut self, step: usize, state: &mut PipelineState) -> Result<(), PipelineError> {
        let cfg = self.pipeline.config();
        let last = step == self.steps;
        let eval_due = step % cfg.eval.every == 0 || last;
        if step % cfg.log_every != 0 && !eval_due {
            return Ok(());
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let mut row = MetricsRow {
            loss: mean(&self.pending_loss),
            margin: mean(&self.pending_margin),
            ..MetricsRow::new(self.stage, step)
        };
        self.pending_loss.clear();
        self.pending_margin.clear();
        if eval_due {
            let eval = self.eval(step, &state.policy)?;
            row = row.with_eval(&eval);
            self.report.evals.push((step, eval));
        }
        state.metrics.push(row);
        Ok(())
    }

    fn skip(&mut self, step: usize, state: &mut PipelineState) -> Result<(), PipelineError> {
        self.report.skipped += 1;
        self.flush(step, state)
    }

    fn finish(self) -> StageReport {
        self.report
    }
}

/// A window's preference data plus the model evaluations spent making it.
struct WindowData {
    batch: PreferenceBatch,
    gen_nfe: u64,
}

impl Pipeline {
    fn stream(&self, stage: Stage, what: &str) -> StreamRng {
        rng::stream(self.cfg.seed, &format!("{}.{what}", stage.name()))
    }

    fn gen_seed(&self, stage: Stage, index: u64) -> u64 {
        rng::derive_seed(self.cfg.seed, &format!("{}.gen", stage.name()), index)
    }

    /// Fits the policy to clean task samples with the denoising loss.
    pub fn pretrain(&self, state: &mut PipelineState) -> Result<StageReport, PipelineError> {
        let stage = Stage::Pretrain;
        let p = &self.cfg.stages.pretrain;
        let guidance = self.sampling_guidance(state);
        let mut log = Logger::start(self, stage, p.steps, state, guidance)?;
        let mut r = self.stream(stage, "batches");
        let mut opt = AdamW::new(AdamWConfig {
            lr: p.lr,
            ..AdamWConfig::default()
        });
        let null = state.policy.null_condition();
        for step in 1..=p.steps {
            opt.config.lr = cosine_lr(p.lr, step, p.steps);
            let unconditional = r.random_bool(p.null_prob);
            let mut b = clean_batch(p.batch, &self.cfg.task, self.sched.t_max(), &mut r);
            if unconditional {
                b.conds.iter_mut().for_each(|c| *c = null);
            }
            let fail = |reason: String| PipelineError::NonFinite { stage, step, reason };
            let policy = &mut state.policy;
            policy.params_mut().zero_grad();
            let mut tape = Tape::new();
            let bound = policy.bind(&mut tape, true)?;
            let root = dm_loss_on_tape(&mut tape, policy, &bound, &b.x0, &b.conds, &b.ts, &b.eps, &self.sched)
                .map_err(|e| if is_non_finite_diffusion(&e) { fail(e.to_string()) } else { e.into() })?;
            let loss = tape
                .backward_into(root, policy.params_mut())
                .map_err(|e| if is_non_finite_tensor(&e) { fail(e.to_string()) } else { e.into() })?;
            if !loss.is_finite() {
                return Err(fail("loss".into()));
            }
            opt.step(policy.params_mut());
            log.report.train_nfe += p.batch as u64;
            log.record(step, loss, None, state)?;
        }
        Ok(log.finish())
    }

    /// Shared loop of every preference stage: one window per step, built by
    /// `make_window` from the current policy, then a single windowed update
    /// against the frozen reference.
    fn preference_loop<F>(
        &self,
        stage: Stage,
        cfg: &DpoStageConfig,
        state: &mut PipelineState,
        mut make_window: F,
    ) -> Result<StageReport, PipelineError>
    where
        F: FnMut(usize, &EpsModel) -> Result<Option<WindowData>, PipelineError>,
    {
        let guidance = self.sampling_guidance(state);
        let mut log = Logger::start(self, stage, cfg.steps, state, guidance)?;
        let mut sampler = WindowSampler::new(self.cfg.sampler.clone(), cfg.timestep_mode)?;
        let mut t_rng = self.stream(stage, "timesteps");
        let mut noise_rng = self.stream(stage, "noise");
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        });
        for step in 1..=cfg.steps {
            opt.config.lr = cosine_lr(cfg.lr, step, cfg.steps);
            let Some(data) = make_window(step, &state.policy)? else {
                if !params_finite(&state.policy) {
                    return Err(PipelineError::NonFinite {
                        stage,
                        step,
                        reason: "policy parameters".into(),
                    });
                }
                log.skip(step, state)?;
                continue;
            };
            let window = sampler.next_window(&mut t_rng)?;
            let outcome = apo_window_step(
                &mut state.policy,
                &state.reference,
                &data.batch,
                &window,
                cfg.beta,
                &self.sched,
                &mut opt,
                &mut noise_rng,
            )
            .map_err(|e| match e {
                ApoError::WindowAborted { timestep, reason } => PipelineError::NonFinite {
                    stage,
                    step,
                    reason: format!("timestep {timestep}: {reason}"),
                },
                other => other.into(),
            })?;
            // policy and reference, chosen and rejected, at every window timestep
            log.report.train_nfe += data.gen_nfe + 4 * (window.len() * data.batch.len()) as u64;
            log.record(step, outcome.loss_per_timestep(), Some(outcome.margin), state)?;
        }
        Ok(log.finish())
    }

    /// Two on-policy candidates per pair, ranked by the noisy oracle.
    pub fn online_stage(&self, state: &mut PipelineState) -> Result<StageReport, PipelineError> {
        let stage = Stage::Online;
        let cfg = &self.cfg.stages.online;
        let guidance = self.sampling_guidance(state);
        let mut pick = self.stream(stage, "pairs");
        let mut oracle_rng = self.stream(stage, "oracle");
        let per_window = cfg.pairs_per_window;
        self.preference_loop(stage, cfg, state, |step, policy| {
            let conds: Vec<usize> = (0..per_window)
                .map(|_| pick.random_range(0..self.cfg.task.num_modes))
                .collect();
            let index = 2 * (step - 1) as u64;
            let mut candidates = Vec::with_capacity(2);
            let mut gen_nfe = 0u64;
            for seed in [self.gen_seed(stage, index), self.gen_seed(stage, index + 1)] {
                match sample_reverse(policy, &conds, &self.grid, guidance.as_ref(), &self.sched, seed) {
                    Ok(s) => {
                        gen_nfe += (s.nfe * conds.len()) as u64;
                        candidates.push(s.x0);
                    }
                    Err(e) if is_non_finite_diffusion(&e) => return Ok(None),
                    Err(e) => return Err(e.into()),
                }
            }
            let mut pairs = Vec::with_capacity(per_window);
            for (i, &c) in conds.iter().enumerate() {
                let a = Tensor::from_vec(candidates[0].row(i).to_vec());
                let b = Tensor::from_vec(candidates[1].row(i).to_vec());
                let verdict = rank_pair(a.data(), b.data(), c, &self.cfg.oracle, &self.cfg.task, &mut oracle_rng);
                let (chosen, rejected) = match verdict {
                    Verdict::AChosen => (a, b),
                    Verdict::BChosen => (b, a),
                };
                pairs.push(PreferencePair::new(c, chosen, rejected, PairSource::Online)?);
            }
            Ok(Some(WindowData {
                batch: PreferenceBatch::from_pairs(&pairs)?,
                gen_nfe,
            }))
        })
    }

    /// One labeled anchor plus one on-policy sample per pair. A chosen anchor
    /// makes the generation the rejected side, and the other way round.
    pub fn half_online_stage(
        &self,
        state: &mut PipelineState,
        records: &[OfflineRecord],
    ) -> Result<StageReport, PipelineError> {
        let stage = Stage::HalfOnline;
        let cfg = &self.cfg.stages.half_online;
        if records.is_empty() && cfg.steps > 0 {
            return Err(PipelineError::EmptyData { stage });
        }
        let guidance = self.sampling_guidance(state);
        let mut pick = self.stream(stage, "pairs");
        let per_window = cfg.pairs_per_window;
        self.preference_loop(stage, cfg, state, |step, policy| {
            let picked: Vec<&OfflineRecord> = (0..per_window)
                .map(|_| &records[pick.random_range(0..records.len())])
                .collect();
            let conds: Vec<usize> = picked.iter().map(|r| r.condition).collect();
            let seed = self.gen_seed(stage, (step - 1) as u64);
            let generated = match sample_reverse(policy, &conds, &self.grid, guidance.as_ref(), &self.sched, seed) {
                Ok(s) => s,
                Err(e) if is_non_finite_diffusion(&e) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            let pairs = picked
                .iter()
                .enumerate()
                .map(|(i, rec)| half_online_pair(rec, Tensor::from_vec(generated.x0.row(i).to_vec())))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Some(WindowData {
                batch: PreferenceBatch::from_pairs(&pairs)?,
                gen_nfe: (generated.nfe * conds.len()) as u64,
            }))
        })
    }

    fn stored_pairs_stage(
        &self,
        stage: Stage,
        cfg: &DpoStageConfig,
        state: &mut PipelineState,
        pairs: &[PreferencePair],
    ) -> Result<StageReport, PipelineError> {
        if pairs.is_empty() && cfg.steps > 0 {
            return Err(PipelineError::EmptyData { stage });
        }
        let mut pick = self.stream(stage, "pairs");
        let per_window = cfg.pairs_per_window;
        self.preference_loop(stage, cfg, state, |_, _| {
            let chosen: Vec<PreferencePair> = (0..per_window)
                .map(|_| pairs[pick.random_range(0..pairs.len())].clone())
                .collect();
            Ok(Some(WindowData {
                batch: PreferenceBatch::from_pairs(&chosen)?,
                gen_nfe: 0,
            }))
        })
    }

    /// Stored pairs drawn uniformly; no generation.
    pub fn offline_stage(
        &self,
        state: &mut PipelineState,
        pairs: &[PreferencePair],
    ) -> Result<StageReport, PipelineError> {
        self.stored_pairs_stage(Stage::Offline, &self.cfg.stages.offline, state, pairs)
    }

    /// Regresses a copy of the policy onto the policy's guided prediction.
    /// The policy becomes the frozen teacher and the student takes its place.
    pub fn distill_stage(&self, state: &mut PipelineState) -> Result<StageReport, PipelineError> {
        let stage = Stage::Distill;
        let d = &self.cfg.stages.distill;
        let teacher = state.policy.clone();
        state.distilled = true;
        let mut log = Logger::start(self, stage, d.steps, state, None)?;
        let mut r = self.stream(stage, "batches");
        let mut opt = AdamW::new(AdamWConfig {
            lr: d.lr,
            ..AdamWConfig::default()
        });
        for step in 1..=d.steps {
            let fail = |reason: String| PipelineError::NonFinite { stage, step, reason };
            let b = clean_batch(d.batch, &self.cfg.task, self.sched.t_max(), &mut r);
            let x_t = forward_diffuse_rows(&b.x0, &b.ts, &b.eps, &self.sched)?;
            let target = guided_predict(&teacher, &x_t, &b.ts, &b.conds, &d.guidance)
                .map_err(|e| if is_non_finite_diffusion(&e) { fail(e.to_string()) } else { e.into() })?;
            let student = &mut state.policy;
            student.params_mut().zero_grad();
            let mut tape = Tape::new();
            let loss = distill_loss_on_tape(&mut tape, student, x_t, &b.ts, &b.conds, target.eps)
                .and_then(|root| Ok(tape.backward_into(root, student.params_mut())?))
                .map_err(|e| match e {
                    DistillError::Tensor(t) if is_non_finite_tensor(&t) => fail(t.to_string()),
                    DistillError::Diffusion(d) if is_non_finite_diffusion(&d) => fail(d.to_string()),
                    DistillError::Tensor(t) => t.into(),
                    DistillError::Diffusion(d) => d.into(),
                })?;
            if !loss.is_finite() {
                return Err(fail("loss".into()));
            }
            opt.step(student.params_mut());
            log.report.train_nfe += (target.nfe as u64 + 1) * d.batch as u64;
            log.record(step, loss, None, state)?;
        }
        state.teacher = Some(teacher);
        Ok(log.finish())
    }

    /// A final preference round on the distilled student, which samples
    /// without guidance.
    pub fn distill_aware_stage(
        &self,
        state: &mut PipelineState,
        pairs: &[PreferencePair],
    ) -> Result<StageReport, PipelineError> {
        state.distilled = true;
        self.stored_pairs_stage(Stage::DistillAware, &self.cfg.stages.distill_aware, state, pairs)
    }
}

#[derive(Debug, thiserror::Error)]
enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

fn distill_loss_on_tape(
    tape: &mut Tape,
    student: &EpsModel,
    x_t: Tensor,
    ts: &[usize],
    conds: &[usize],
    target: Tensor,
) -> Result<crate::ndtensor::Var, DistillError> {
    let bound = student.bind(tape, true)?;
    let x = tape.constant(x_t);
    let pred = student.forward_on(tape, &bound, x, ts, conds, Pass::Normal)?;
    let target = tape.constant(target);
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let per_row = tape.row_sum(sq)?;
    Ok(tape.mean(per_row)?)
}

/// Assigns roles from the anchor's label.
pub(super) fn half_online_pair(rec: &OfflineRecord, generated: Tensor) -> Result<PreferencePair, ApoError> {
    let anchor = rec.sample.clone();
    match rec.label {
        AnchorLabel::ChosenAnchor => PreferencePair::new(rec.condition, anchor, generated, PairSource::HalfOnline),
        AnchorLabel::RejectedAnchor => PreferencePair::new(rec.condition, generated, anchor, PairSource::HalfOnline),
    }
}
