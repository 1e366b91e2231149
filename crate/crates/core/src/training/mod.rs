//! Adversarial training of D and G on normal speech and of C on impaired
//! speech through the discriminator-feature distance.

pub mod history;
pub mod keys;
pub mod losses;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{MelSegment, DEFAULT_GL_ITERS};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{Bound, ModelConfig, Mode, Networks, Params};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub use history::{read_history, write_history, HistoryWriter};
pub use losses::{lap1_distance, loss_discriminator, loss_generator};

/// Losses above this (or non-finite) abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Proposed,
    /// Discriminator without the pooled input skip.
    NoSd,
    /// Controller step updates C and G together against `L_C + L_G`.
    JointCg,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Proposed, Ablation::NoSd, Ablation::JointCg];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Proposed => "proposed",
            Ablation::NoSd => "no_sd",
            Ablation::JointCg => "joint_cg",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "ablation must be one of proposed, no_sd, joint_cg; got {s:?}"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    pub lr_gc: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub ablation: Ablation,
    pub gl_iters: usize,
    pub seed: u64,
    /// Let `L_G` gradients reach the controller during its update.
    pub gan_grad_into_controller: bool,
    /// Record elapsed seconds in the history instead of 0.
    pub log_wall_time: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr_gc: 2e-4,
            lr_d: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            batch_size: 64,
            iters: 50_000,
            ablation: Ablation::Proposed,
            gl_iters: DEFAULT_GL_ITERS,
            seed: 0,
            gan_grad_into_controller: false,
            log_wall_time: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, lr) in [("lr_gc", self.lr_gc), ("lr_d", self.lr_d)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {lr}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Model configuration with the ablation applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablation == Ablation::NoSd {
            m.input_skip = false;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based.
    pub iteration: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_c: f64,
    pub wall_time: f64,
}

/// Segment pools of the normal corpus `T` and the impaired corpus `S`.
#[derive(Clone, Debug)]
pub struct CorpusHandle {
    pub normal: Vec<MelSegment>,
    pub impaired: Vec<MelSegment>,
}

impl CorpusHandle {
    pub fn new(normal: Vec<MelSegment>, impaired: Vec<MelSegment>) -> Result<Self> {
        if normal.is_empty() {
            return Err(Error::Config("normal corpus has no segments".into()));
        }
        if impaired.is_empty() {
            return Err(Error::Config("impaired corpus has no segments".into()));
        }
        let frames = normal[0].frames;
        if normal.iter().chain(&impaired).any(|s| s.frames != frames) {
            return Err(Error::Shape("corpus segments differ in length".into()));
        }
        Ok(Self { normal, impaired })
    }

    pub fn seg_frames(&self) -> usize {
        self.normal[0].frames
    }

    /// Uniform draw with replacement from `pool`.
    pub fn sample<'a, R: Rng + ?Sized>(
        pool: &'a [MelSegment],
        n: usize,
        rng: &mut R,
    ) -> Vec<&'a MelSegment> {
        (0..n).map(|_| &pool[rng.gen_range(0..pool.len())]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
    Controller,
}

/// Observes the networks immediately around each optimizer application.
pub trait StepHook {
    fn before_update(&mut self, _phase: Phase, _nets: &Networks) {}
    fn after_update(&mut self, _phase: Phase, _nets: &Networks) {}
}

pub struct NoHook;

impl StepHook for NoHook {}

/// Outcome of one [`Trainer::train_step`].
#[derive(Clone, Debug)]
pub struct StepReport {
    pub record: LossRecord,
    /// Fingerprint of the batch scored as real in the discriminator loss.
    pub real_fingerprint: u64,
}

/// Networks, optimizers and the sampling/dropout stream of one run.
pub struct Trainer {
    pub nets: Networks,
    cfg: TrainingConfig,
    opt_d: Adam,
    opt_g: Adam,
    /// Controller parameters, followed by generator parameters under `JointCg`.
    opt_c: Adam,
    rng: ChaCha8Rng,
    iteration: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = Networks::new(cfg.effective_model(), cfg.seed)?;
        Ok(Self::from_networks(nets, cfg))
    }

    pub fn from_networks(nets: Networks, cfg: TrainingConfig) -> Self {
        let adam = |lr| Adam::new(lr, cfg.adam_beta1, cfg.adam_beta2);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(4);
        Self {
            opt_d: adam(cfg.lr_d),
            opt_g: adam(cfg.lr_gc),
            opt_c: adam(cfg.lr_gc),
            nets,
            cfg,
            rng,
            iteration: 0,
            started: Instant::now(),
        }
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Optimizer applications so far for D, G and C.
    pub fn update_counts(&self) -> [u64; 3] {
        [self.opt_d.steps(), self.opt_g.steps(), self.opt_c.steps()]
    }

    /// Draws a batch from each pool and runs [`train_step`](Self::train_step).
    pub fn step_sampled(
        &mut self,
        corpus: &CorpusHandle,
        hook: &mut dyn StepHook,
    ) -> Result<StepReport> {
        let n = self.cfg.batch_size;
        let normal = CorpusHandle::sample(&corpus.normal, n, &mut self.rng);
        let impaired = CorpusHandle::sample(&corpus.impaired, n, &mut self.rng);
        self.train_step(&normal, &impaired, hook)
    }

    /// One iteration: a discriminator update on `L_D`, a generator update
    /// on `L_G`, then a controller update on `L_C` with G and D frozen
    /// (G joins the last update under `JointCg`).
    pub fn train_step(
        &mut self,
        normal: &[&MelSegment],
        impaired: &[&MelSegment],
        hook: &mut dyn StepHook,
    ) -> Result<StepReport> {
        let real = MelSegment::batch_tensor(normal)?;
        let source = MelSegment::batch_tensor(impaired)?;
        let iteration = self.iteration + 1;
        let cond = self.conditions(&source)?;

        let (loss_d, real_fingerprint) = self.discriminator_step(&real, &cond, iteration, hook)?;
        let loss_g = self.generator_step(&cond, iteration, hook)?;
        let loss_c = self.controller_step(&source, iteration, hook)?;

        self.iteration = iteration;
        let wall_time = if self.cfg.log_wall_time {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        Ok(StepReport {
            record: LossRecord {
                iteration,
                loss_d,
                loss_g,
                loss_c,
                wall_time,
            },
            real_fingerprint,
        })
    }

    /// `project(C(x^s))` in evaluation mode, detached from C.
    fn conditions(&self, source: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.nets.controller.params.bind(&mut g, false);
        let x = g.constant(source.clone());
        let c = self.nets.controller.forward(&mut g, &p, x, Mode::Eval)?;
        let c = g.project_unit_ball(c)?;
        Ok(g.value(c).clone())
    }

    fn discriminator_step(
        &mut self,
        real: &Tensor,
        cond: &Tensor,
        iteration: usize,
        hook: &mut dyn StepHook,
    ) -> Result<(f64, u64)> {
        self.nets.discriminator.power_iteration(1);
        let nets = &self.nets;
        let mut g = Graph::new();
        let pd = nets.discriminator.params.bind(&mut g, true);
        let pg = nets.generator.params.bind(&mut g, false);
        let c = g.constant(cond.clone());
        let fake = nets.generator.forward(&mut g, &pg, c)?;
        let x_real = g.constant(real.clone());
        let d_real = nets
            .discriminator
            .forward_segments(&mut g, &pd, x_real, Mode::Train(&mut self.rng))?;
        let d_fake = nets
            .discriminator
            .forward_segments(&mut g, &pd, fake, Mode::Train(&mut self.rng))?;
        let loss = losses::discriminator_loss_graph(&mut g, d_real.score, d_fake.score)?;
        let value = guard(&g, loss, iteration, "loss_d")?;
        let grads = gradients(&g, loss, &pd);
        hook.before_update(Phase::Discriminator, &self.nets);
        apply(&mut self.opt_d, &mut [&mut self.nets.discriminator.params], grads)?;
        hook.after_update(Phase::Discriminator, &self.nets);
        Ok((value, real.fingerprint()))
    }

    fn generator_step(
        &mut self,
        cond: &Tensor,
        iteration: usize,
        hook: &mut dyn StepHook,
    ) -> Result<f64> {
        let nets = &self.nets;
        let mut g = Graph::new();
        let pg = nets.generator.params.bind(&mut g, true);
        let pd = nets.discriminator.params.bind(&mut g, false);
        let c = g.constant(cond.clone());
        let fake = nets.generator.forward(&mut g, &pg, c)?;
        let d_fake = nets
            .discriminator
            .forward_segments(&mut g, &pd, fake, Mode::Train(&mut self.rng))?;
        let loss = losses::generator_loss_graph(&mut g, d_fake.score);
        let value = guard(&g, loss, iteration, "loss_g")?;
        let grads = gradients(&g, loss, &pg);
        hook.before_update(Phase::Generator, &self.nets);
        apply(&mut self.opt_g, &mut [&mut self.nets.generator.params], grads)?;
        hook.after_update(Phase::Generator, &self.nets);
        Ok(value)
    }

    fn controller_step(
        &mut self,
        source: &Tensor,
        iteration: usize,
        hook: &mut dyn StepHook,
    ) -> Result<f64> {
        let joint = self.cfg.ablation == Ablation::JointCg;
        let with_gan = joint || self.cfg.gan_grad_into_controller;
        let nets = &self.nets;
        let mut g = Graph::new();
        let pc = nets.controller.params.bind(&mut g, true);
        let pg = nets.generator.params.bind(&mut g, joint);
        let pd = nets.discriminator.params.bind(&mut g, false);
        let x = g.constant(source.clone());
        let c = nets
            .controller
            .forward(&mut g, &pc, x, Mode::Train(&mut self.rng))?;
        let c = g.project_unit_ball(c)?;
        let fake = nets.generator.forward(&mut g, &pg, c)?;
        let d_fake = nets
            .discriminator
            .forward_segments(&mut g, &pd, fake, Mode::Eval)?;
        let d_real = nets
            .discriminator
            .forward_segments(&mut g, &pd, x, Mode::Eval)?;
        let loss_c = losses::lap1_graph(&mut g, &d_fake.layers, &d_real.layers)?;
        let value = guard(&g, loss_c, iteration, "loss_c")?;
        let total = if with_gan {
            // The per-element mean in L_C is the summed L1 distance divided by
            // the layer size; rescale by the first layer's size so the
            // distance is not swamped by L_G in the combined objective.
            let n = g.value(x).shape()[0];
            let first_layer = g.value(d_fake.layers[0]).len() / n;
            let scaled = g.scale(loss_c, first_layer as f64);
            let lg = losses::generator_loss_graph(&mut g, d_fake.score);
            guard(&g, lg, iteration, "loss_g")?;
            g.add(scaled, lg)?
        } else {
            loss_c
        };
        let mut grads = gradients(&g, total, &pc);
        if joint {
            grads.extend(gradients(&g, total, &pg));
        }
        hook.before_update(Phase::Controller, &self.nets);
        if joint {
            apply(
                &mut self.opt_c,
                &mut [&mut self.nets.controller.params, &mut self.nets.generator.params],
                grads,
            )?;
        } else {
            apply(&mut self.opt_c, &mut [&mut self.nets.controller.params], grads)?;
        }
        hook.after_update(Phase::Controller, &self.nets);
        Ok(value)
    }
}

fn guard(g: &Graph, loss: Var, iteration: usize, name: &'static str) -> Result<f64> {
    let v = g.value(loss).item();
    if !v.is_finite() || v > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            iteration,
            loss: name,
            value: v,
        });
    }
    Ok(v)
}

/// Gradients of `loss` for each bound parameter, zeros where unreachable.
fn gradients(g: &Graph, loss: Var, p: &Bound) -> Vec<Tensor> {
    let grads = g.backward(loss);
    p.vars()
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
        })
        .collect()
}

fn apply(opt: &mut Adam, sets: &mut [&mut Params], grads: Vec<Tensor>) -> Result<()> {
    let mut params: Vec<&mut Tensor> = sets
        .iter_mut()
        .flat_map(|p| p.tensors_mut().iter_mut())
        .collect();
    opt.step(&mut params, &grads)
}

/// Result of [`train`].
pub struct TrainOutcome {
    pub networks: Networks,
    pub history: Vec<LossRecord>,
}

/// Runs `cfg.iters` sampled iterations, handing every record (and the
/// trainer, for checkpointing) to `on_record`.
pub fn train(
    corpus: &CorpusHandle,
    cfg: &TrainingConfig,
    mut on_record: impl FnMut(&Trainer, &LossRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    if corpus.normal.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "normal corpus has {} segments, fewer than batch_size {}",
            corpus.normal.len(),
            cfg.batch_size
        )));
    }
    if corpus.seg_frames() != cfg.model.seg_frames {
        return Err(Error::Config(format!(
            "corpus segments have {} frames but seg_frames is {}",
            corpus.seg_frames(),
            cfg.model.seg_frames
        )));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut history = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let report = trainer.step_sampled(corpus, &mut NoHook)?;
        on_record(&trainer, &report.record)?;
        history.push(report.record);
    }
    Ok(TrainOutcome {
        networks: trainer.nets,
        history,
    })
}

/// `mean_batch Lap1(D(G(project(C(x)))), D(x))` with every network in
/// evaluation mode.
pub fn loss_controller(batch: &[&MelSegment], nets: &Networks) -> Result<f64> {
    let mut g = Graph::new();
    let pc = nets.controller.params.bind(&mut g, false);
    let pg = nets.generator.params.bind(&mut g, false);
    let pd = nets.discriminator.params.bind(&mut g, false);
    let x = g.constant(MelSegment::batch_tensor(batch)?);
    let c = nets.controller.forward(&mut g, &pc, x, Mode::Eval)?;
    let c = g.project_unit_ball(c)?;
    let fake = nets.generator.forward(&mut g, &pg, c)?;
    let d_fake = nets.discriminator.forward_segments(&mut g, &pd, fake, Mode::Eval)?;
    let d_real = nets.discriminator.forward_segments(&mut g, &pd, x, Mode::Eval)?;
    let l = losses::lap1_graph(&mut g, &d_fake.layers, &d_real.layers)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{compute_deltas, N_MELS};

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            model: ModelConfig {
                seg_frames: 8,
                cond_dim: 6,
                widths: vec![3, 4],
                kernel: 3,
                ..ModelConfig::default()
            },
            batch_size: 3,
            iters: 4,
            ..TrainingConfig::default()
        }
    }

    fn pool(seed: u64, n: usize, offset: f64) -> Vec<MelSegment> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                MelSegment::new(
                    8,
                    (0..8 * N_MELS)
                        .map(|_| (offset + rng.gen_range(-1.0..1.0f64)).clamp(-3.0, 3.0))
                        .collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn corpus() -> CorpusHandle {
        CorpusHandle::new(pool(1, 6, 0.5), pool(2, 3, -0.5)).unwrap()
    }

    #[test]
    fn ablation_parses_and_prints() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!(matches!("nosd".parse::<Ablation>(), Err(Error::Config(_))));
        let mut cfg = tiny_config();
        cfg.ablation = Ablation::NoSd;
        assert!(!cfg.effective_model().input_skip);
    }

    #[test]
    fn records_are_numbered_and_nonnegative() {
        let out = train(&corpus(), &tiny_config(), |_, _| Ok(())).unwrap();
        assert_eq!(out.history.len(), 4);
        for (i, r) in out.history.iter().enumerate() {
            assert_eq!(r.iteration, i + 1);
            assert!(r.loss_d >= 0.0 && r.loss_g >= 0.0 && r.loss_c >= 0.0);
            assert_eq!(r.wall_time, 0.0);
        }
    }

    #[test]
    fn each_optimizer_steps_once_per_iteration() {
        for ablation in Ablation::ALL {
            let mut cfg = tiny_config();
            cfg.ablation = ablation;
            let mut t = Trainer::new(cfg).unwrap();
            let c = corpus();
            for k in 1..=3 {
                t.step_sampled(&c, &mut NoHook).unwrap();
                assert_eq!(t.update_counts(), [k; 3]);
            }
        }
    }

    #[test]
    fn zero_learning_rates_freeze_everything() {
        let mut cfg = tiny_config();
        cfg.lr_d = 0.0;
        cfg.lr_gc = 0.0;
        let mut t = Trainer::new(cfg).unwrap();
        let before = (
            t.nets.generator.params.clone(),
            t.nets.discriminator.params.clone(),
            t.nets.controller.params.clone(),
        );
        let r = t.step_sampled(&corpus(), &mut NoHook).unwrap();
        assert!(r.record.loss_d.is_finite());
        assert_eq!(t.nets.generator.params, before.0);
        assert_eq!(t.nets.discriminator.params, before.1);
        assert_eq!(t.nets.controller.params, before.2);
    }

    #[test]
    fn single_element_controller_loss_equals_direct_distance() {
        let nets = Networks::new(tiny_config().model, 3).unwrap();
        let x = &pool(5, 1, 0.0)[0];
        let via_loss = loss_controller(&[x], &nets).unwrap();
        let c = crate::models::project_unit_ball(&nets.controller.encode(x).unwrap()).unwrap();
        let fake = nets.generator.generate(&c).unwrap();
        let a = nets.discriminator.respond(&compute_deltas(&fake)).unwrap();
        let b = nets.discriminator.respond(&compute_deltas(x)).unwrap();
        let direct = lap1_distance(&a, &b).unwrap();
        assert!((via_loss - direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn corpus_validation() {
        assert!(matches!(
            CorpusHandle::new(Vec::new(), pool(1, 1, 0.0)),
            Err(Error::Config(_))
        ));
        let mut cfg = tiny_config();
        cfg.batch_size = 10;
        assert!(matches!(train(&corpus(), &cfg, |_, _| Ok(())), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_guard_trips_on_huge_loss() {
        let mut cfg = tiny_config();
        cfg.model.spectral_norm = false;
        let nets = Networks {
            discriminator: {
                let mut d = crate::models::Discriminator::new(
                    &cfg.model,
                    &mut ChaCha8Rng::seed_from_u64(0),
                );
                for p in d.params.tensors_mut() {
                    p.data_mut().iter_mut().for_each(|v| *v = 1e4);
                }
                d
            },
            ..Networks::new(cfg.model.clone(), 0).unwrap()
        };
        let mut t = Trainer::from_networks(nets, cfg);
        let err = t.step_sampled(&corpus(), &mut NoHook).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 1, loss: "loss_d", .. }), "{err}");
    }
}
