//! Bilevel optimization engine: inner adaptation, the meta-objective and
//! its exact (second-order) or first-order gradient, the meta-training
//! loop, adversarial pre-training, and the fine-tuning baseline.

use crate::backbone::{self, ModelConfig, ParamVars};
use crate::episodes::{sample_scene_batch, Pair, SceneDataset, Task, TaskMode};
use crate::error::{Error, Result};
use crate::losses::{
    composite_var, feasible_ms_scales, lsgan_discriminator_var, lsgan_generator_var, LossWeights,
};
use crate::types::ParamSet;
use metascene_tape::{all_finite, Tape, Var};
use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Meta-learning hyperparameters. `alpha`/`beta` default to 1e-4.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner (adaptation) step size.
    pub alpha: f64,
    /// Outer (meta) step size.
    pub beta: f64,
    /// Tasks (scenes) per meta-iteration.
    pub n_tasks: usize,
    /// Shots: pairs in each of D_tr and D_val.
    pub k: usize,
    pub inner_steps: usize,
    /// Differentiate through the inner update. Off = first-order
    /// approximation (faster, not the exact objective gradient).
    pub second_order: bool,
    pub iterations: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub mode: TaskMode,
    /// Use adaptive-moment outer updates instead of the plain step.
    pub outer_adam: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            beta: 1e-4,
            n_tasks: 5,
            k: 10,
            inner_steps: 1,
            second_order: true,
            iterations: 500,
            seed: 0,
            weights: LossWeights::default(),
            mode: TaskMode::Prediction,
            outer_adam: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        // alpha = 0 is allowed as a degenerate diagnostic: the inner
        // update becomes the identity.
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::validation(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::validation(format!("beta must be finite and positive, got {}", self.beta)));
        }
        if self.n_tasks == 0 || self.k == 0 || self.inner_steps == 0 {
            return Err(Error::validation("n_tasks, k and inner_steps must be at least 1"));
        }
        self.weights.validate()
    }
}

/// Result of adapting parameters on one task's training pairs.
#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub adapted_params: ParamSet,
    pub train_loss_before: f64,
    pub train_loss_after: f64,
    pub gradient_norm: f64,
}

/// A differentiable per-task loss: the sum over pairs of a per-pair loss,
/// built on the given tape against the given parameter vars. Implemented
/// by the real predictor and by analytic toy models in tests.
pub trait TaskLossModel: Sync {
    fn pairs_loss(&self, tape: &Tape, vars: &ParamVars, pairs: &[Pair]) -> Result<Var>;
}

/// The future-frame predictor under the composite loss.
pub struct PredictorModel {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub mode: TaskMode,
}

impl PredictorModel {
    fn pair_loss(&self, tape: &Tape, vars: &ParamVars, pair: &Pair) -> Result<Var> {
        let (_, time, c, h, w) = pair.x.dims();
        let scales = feasible_ms_scales(h, w, 5);
        let pred = match self.mode {
            TaskMode::Prediction => {
                if time != self.model.t {
                    return Err(Error::shape("pair clip length", self.model.t, time));
                }
                if c != self.model.frame_channels {
                    return Err(Error::shape("pair channels", self.model.frame_channels, c));
                }
                let frames: Vec<Var> = (0..time).map(|k| tape.leaf(pair.x.frame(k).into_dyn())).collect();
                let st = backbone::initial_state(&self.model, 1, h, w);
                let st = (tape.leaf(st.hidden.into_dyn()), tape.leaf(st.cell.into_dyn()));
                // State is reset per pair: pairs are i.i.d. windows.
                backbone::predict_forward(tape, &self.model, vars, &frames, st).0
            }
            TaskMode::Reconstruction => {
                let frame = tape.leaf(pair.x.frame(0).into_dyn());
                backbone::reconstruct_forward(tape, &self.model, vars, frame)
            }
        };
        let target = tape.leaf(pair.y.data().clone().into_dyn());
        composite_var(tape, pred, target, &self.weights, scales)
    }
}

impl TaskLossModel for PredictorModel {
    fn pairs_loss(&self, tape: &Tape, vars: &ParamVars, pairs: &[Pair]) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::validation("task loss needs at least one pair"));
        }
        let mut acc = tape.constant(0.0);
        for pair in pairs {
            acc = tape.add(acc, self.pair_loss(tape, vars, pair)?);
        }
        Ok(acc)
    }
}

/// Evaluate the summed per-task loss at fixed parameters.
pub fn task_loss(model: &dyn TaskLossModel, params: &ParamSet, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::validation("task loss needs at least one pair"));
    }
    let tape = Tape::new();
    let vars = ParamVars::leaves(&tape, params);
    let loss = model.pairs_loss(&tape, &vars, pairs)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::Numeric {
            context: "task loss".into(),
            grad_norm: None,
        });
    }
    Ok(v)
}

fn grad_values(tape: &Tape, grads: &[Var]) -> Vec<ArrayD<f64>> {
    grads.iter().map(|&g| (*tape.value(g)).clone()).collect()
}

fn values_norm(values: &[ArrayD<f64>]) -> f64 {
    values
        .iter()
        .flat_map(|a| a.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Apply `inner_steps` gradient steps on the training pairs:
/// theta' = theta - alpha * grad(task_loss). The input is not modified.
pub fn inner_update(
    model: &dyn TaskLossModel,
    params: &ParamSet,
    train_pairs: &[Pair],
    alpha: f64,
    inner_steps: usize,
) -> Result<AdaptResult> {
    if inner_steps == 0 {
        return Err(Error::validation("inner_steps must be at least 1"));
    }
    if train_pairs.is_empty() {
        return Err(Error::validation("inner update needs at least one pair"));
    }
    let mut current = params.clone();
    let mut loss_before = 0.0;
    let mut first_norm = 0.0;
    for step in 0..inner_steps {
        let tape = Tape::new();
        let vars = ParamVars::leaves(&tape, &current);
        let loss = model.pairs_loss(&tape, &vars, train_pairs)?;
        let grads = tape.grad(loss, &vars.vars());
        let gvals = grad_values(&tape, &grads);
        let norm = values_norm(&gvals);
        if !norm.is_finite() {
            return Err(Error::Numeric {
                context: "inner update gradient".into(),
                grad_norm: Some(norm),
            });
        }
        if step == 0 {
            loss_before = tape.scalar(loss);
            first_norm = norm;
        }
        let gset = current.with_values(gvals)?;
        current = current.sub_scaled(&gset, alpha)?;
    }
    let train_loss_after = task_loss(model, &current, train_pairs)?;
    Ok(AdaptResult {
        adapted_params: current,
        train_loss_before: loss_before,
        train_loss_after,
        gradient_norm: first_norm,
    })
}

/// A materialized task: disjoint train/val pair sets.
pub struct EpisodePairs {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
}

fn single_task_meta_grad(
    model: &dyn TaskLossModel,
    params: &ParamSet,
    episode: &EpisodePairs,
    cfg: &MetaConfig,
) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let tape = Tape::new();
    let origin = ParamVars::leaves(&tape, params);
    let mut current = origin.rebind(origin.vars());
    for _ in 0..cfg.inner_steps {
        let train_loss = model.pairs_loss(&tape, &current, &episode.train)?;
        let mut grads = tape.grad(train_loss, &current.vars());
        if !cfg.second_order {
            // First-order approximation: stop gradients through the
            // inner step so theta' is treated as constant in theta.
            grads = grads.into_iter().map(|g| tape.detach(g)).collect();
        }
        let stepped: Vec<Var> = current
            .vars()
            .iter()
            .zip(grads)
            .map(|(&p, g)| tape.sub(p, tape.scale(g, cfg.alpha)))
            .collect();
        current = current.rebind(stepped);
    }
    let val_loss = model.pairs_loss(&tape, &current, &episode.val)?;
    let loss_value = tape.scalar(val_loss);
    if !loss_value.is_finite() {
        return Err(Error::Numeric {
            context: "validation loss in meta-objective".into(),
            grad_norm: None,
        });
    }
    let meta_grads = tape.grad(val_loss, &origin.vars());
    let values = grad_values(&tape, &meta_grads);
    if values.iter().any(|a| !all_finite(a)) {
        return Err(Error::Numeric {
            context: "meta-gradient".into(),
            grad_norm: Some(values_norm(&values)),
        });
    }
    Ok((loss_value, values))
}

/// The meta-objective over a batch of tasks: the summed post-adaptation
/// validation loss, and its gradient with respect to the unadapted
/// parameters. Per-task work runs in parallel; the reduction sums in
/// task order, so the result is deterministic.
pub fn meta_objective(
    model: &dyn TaskLossModel,
    params: &ParamSet,
    episodes: &[EpisodePairs],
    cfg: &MetaConfig,
) -> Result<(f64, Vec<f64>, ParamSet)> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::validation("meta-objective needs at least one task"));
    }
    let per_task: Vec<(f64, Vec<ArrayD<f64>>)> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            single_task_meta_grad(model, params, ep, cfg).map_err(|e| match e {
                Error::Numeric { context, grad_norm } => Error::Numeric {
                    context: format!("task {i}: {context}"),
                    grad_norm,
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let mut total = vec![];
    let mut task_losses = Vec::with_capacity(per_task.len());
    let mut loss_sum = 0.0;
    for (loss, grads) in per_task {
        loss_sum += loss;
        task_losses.push(loss);
        if total.is_empty() {
            total = grads;
        } else {
            for (acc, g) in total.iter_mut().zip(grads) {
                *acc += &g;
            }
        }
    }
    Ok((loss_sum, task_losses, params.with_values(total)?))
}

/// One per-iteration record of the meta-training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub meta_loss: f64,
    pub task_losses: Vec<f64>,
    pub grad_norm: f64,
    pub scenes: Vec<String>,
    pub wall_ms: u64,
}

/// Adam optimizer state over a flat list of parameter arrays.
pub struct AdamState {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<ArrayD<f64>> = params.iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update step; returns the new parameters.
    pub fn step(&mut self, params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        params.check_same_structure(grads, "adam update")?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let values = params
            .iter()
            .zip(grads.iter())
            .enumerate()
            .map(|(i, ((_, p), (_, g)))| {
                self.m[i] = &self.m[i] * self.beta1 + &(g * (1.0 - self.beta1));
                self.v[i] = &self.v[i] * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
                let mhat = &self.m[i] / bc1;
                let vhat = &self.v[i] / bc2;
                p - &(mhat / (vhat.mapv(f64::sqrt) + self.eps) * lr)
            })
            .collect();
        params.with_values(values)
    }
}

fn materialize_task(task: &Task, scenes: &[SceneDataset]) -> Result<EpisodePairs> {
    let scene = scenes
        .iter()
        .find(|s| s.scene_id == task.scene_id)
        .ok_or_else(|| Error::validation(format!("scene {} not found", task.scene_id)))?;
    let (train, val) = task.materialize(scene)?;
    Ok(EpisodePairs { train, val })
}

/// Algorithm: loop over meta-iterations, each sampling N scenes, building
/// one task per scene, adapting per task and applying the outer update
/// theta <- theta - beta * sum of task meta-gradients. Emits one record
/// per iteration through `log`, together with the parameters after that
/// iteration's update so callers can write periodic checkpoints. On
/// numeric divergence, returns a numeric error naming the last good
/// iteration (the caller holds checkpoints).
pub fn meta_train(
    model: &dyn TaskLossModel,
    init_params: &ParamSet,
    scenes: &[SceneDataset],
    model_t: usize,
    cfg: &MetaConfig,
    log: &mut dyn FnMut(&IterationRecord, &ParamSet),
) -> Result<ParamSet> {
    cfg.validate()?;
    let mut theta = init_params.clone();
    let mut adam = cfg.outer_adam.then(|| AdamState::new(&theta));
    let mut seed_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for iteration in 0..cfg.iterations {
        let started = std::time::Instant::now();
        let tasks = sample_scene_batch(scenes, cfg.n_tasks, cfg.k, model_t, cfg.mode, seed_rng.gen())?;
        let episodes: Vec<EpisodePairs> = tasks
            .iter()
            .map(|t| materialize_task(t, scenes))
            .collect::<Result<_>>()?;
        let (meta_loss, task_losses, grad) =
            meta_objective(model, &theta, &episodes, cfg).map_err(|e| match e {
                Error::Numeric { context, grad_norm } => Error::Numeric {
                    context: format!(
                        "iteration {iteration}: {context}; last good parameters are from iteration {}",
                        iteration.saturating_sub(1)
                    ),
                    grad_norm,
                },
                other => other,
            })?;
        theta = match &mut adam {
            Some(a) => a.step(&theta, &grad, cfg.beta)?,
            None => theta.sub_scaled(&grad, cfg.beta)?,
        };
        log(
            &IterationRecord {
                iteration,
                meta_loss,
                task_losses,
                grad_norm: grad.l2_norm(),
                scenes: tasks.iter().map(|t| t.scene_id.clone()).collect(),
                wall_ms: started.elapsed().as_millis() as u64,
            },
            &theta,
        );
    }
    Ok(theta)
}

/// Pre-training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Weight of the LSGAN generator term added to the composite loss;
    /// 0 disables adversarial training entirely.
    pub adversarial_weight: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub mode: TaskMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-4,
            batch: 4,
            adversarial_weight: 0.05,
            seed: 0,
            weights: LossWeights::default(),
            mode: TaskMode::Prediction,
        }
    }
}

/// One pre-training log record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub gen_loss: f64,
    pub disc_loss: Option<f64>,
}

fn sample_pretrain_pairs(
    scenes: &[SceneDataset],
    t: usize,
    mode: TaskMode,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Pair>> {
    use crate::episodes::{materialize_pairs, window_video, WindowPair};
    let mut pairs = Vec::with_capacity(batch);
    for _ in 0..batch {
        // Uniform over scenes, then over that scene's usable videos.
        let scene = &scenes[rng.gen_range(0..scenes.len())];
        let usable: Vec<&crate::episodes::Video> = scene
            .videos
            .iter()
            .filter(|v| v.len() >= t + 1)
            .collect();
        if usable.is_empty() {
            return Err(Error::validation(format!(
                "scene {} has no video with at least {} frames",
                scene.scene_id,
                t + 1
            )));
        }
        let video = usable[rng.gen_range(0..usable.len())];
        let wp = match mode {
            TaskMode::Prediction => {
                let windows = window_video(video, t)?;
                windows[rng.gen_range(0..windows.len())]
            }
            TaskMode::Reconstruction => {
                let j = rng.gen_range(0..video.len());
                WindowPair { start: j, target: j }
            }
        };
        pairs.extend(materialize_pairs(video, &[wp], t, mode)?);
    }
    Ok(pairs)
}

/// Standard (non-meta) pre-training of the generator on normal videos,
/// alternating with LSGAN discriminator updates. Returns the generator
/// and discriminator parameter sets.
pub fn pretrain(
    scenes: &[SceneDataset],
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    log: &mut dyn FnMut(&PretrainRecord),
) -> Result<(ParamSet, ParamSet)> {
    if scenes.is_empty() {
        return Err(Error::validation("pre-training needs at least one scene"));
    }
    cfg.weights.validate()?;
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::validation("pretrain lr must be finite and positive"));
    }
    let mut gen = backbone::init_generator(model_cfg, cfg.seed);
    let mut disc = backbone::init_discriminator(model_cfg, cfg.seed.wrapping_add(1));
    let mut gen_adam = AdamState::new(&gen);
    let mut disc_adam = AdamState::new(&disc);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let model = PredictorModel {
        model: model_cfg.clone(),
        weights: cfg.weights.clone(),
        mode: cfg.mode,
    };
    let adversarial = cfg.adversarial_weight > 0.0;

    for step in 0..cfg.steps {
        let pairs = sample_pretrain_pairs(scenes, model_cfg.t, cfg.mode, cfg.batch, &mut rng)?;

        // Generator step: composite loss plus (optionally) the LSGAN
        // generator term through a frozen discriminator.
        let tape = Tape::new();
        let gvars = ParamVars::leaves(&tape, &gen);
        let mut loss = model.pairs_loss(&tape, &gvars, &pairs)?;
        let mut fakes = Vec::new();
        if adversarial {
            let dvars = ParamVars::leaves(&tape, &disc);
            for pair in &pairs {
                let pred = self_prediction(&tape, &model, &gvars, pair)?;
                fakes.push((*tape.value(pred)).clone());
                let logits = backbone::discriminator_forward(&tape, model_cfg, &dvars, pred);
                let adv = lsgan_generator_var(&tape, logits);
                loss = tape.add(loss, tape.scale(adv, cfg.adversarial_weight));
            }
        }
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::Numeric {
                context: format!(
                    "pre-training diverged at step {step}; last good parameters are from step {}",
                    step.saturating_sub(1)
                ),
                grad_norm: None,
            });
        }
        let grads = tape.grad(loss, &gvars.vars());
        let gvals = grad_values(&tape, &grads);
        gen = gen_adam.step(&gen, &gen.with_values(gvals)?, cfg.lr)?;

        // Discriminator step on real targets vs detached predictions.
        let disc_loss = if adversarial {
            let tape = Tape::new();
            let dvars = ParamVars::leaves(&tape, &disc);
            let mut dl = tape.constant(0.0);
            for (pair, fake) in pairs.iter().zip(&fakes) {
                let real = tape.leaf(pair.y.data().clone().into_dyn());
                let fake = tape.leaf(fake.clone());
                let real_logits = backbone::discriminator_forward(&tape, model_cfg, &dvars, real);
                let fake_logits = backbone::discriminator_forward(&tape, model_cfg, &dvars, fake);
                dl = tape.add(dl, lsgan_discriminator_var(&tape, real_logits, fake_logits));
            }
            dl = tape.scale(dl, 1.0 / pairs.len() as f64);
            let dval = tape.scalar(dl);
            let grads = tape.grad(dl, &dvars.vars());
            let dvals = grad_values(&tape, &grads);
            disc = disc_adam.step(&disc, &disc.with_values(dvals)?, cfg.lr)?;
            Some(dval)
        } else {
            None
        };

        log(&PretrainRecord {
            step,
            gen_loss: loss_value,
            disc_loss,
        });
    }
    Ok((gen, disc))
}

fn self_prediction(tape: &Tape, model: &PredictorModel, vars: &ParamVars, pair: &Pair) -> Result<Var> {
    let (_, time, _, h, w) = pair.x.dims();
    Ok(match model.mode {
        TaskMode::Prediction => {
            let frames: Vec<Var> = (0..time).map(|k| tape.leaf(pair.x.frame(k).into_dyn())).collect();
            let st = backbone::initial_state(&model.model, 1, h, w);
            let st = (tape.leaf(st.hidden.into_dyn()), tape.leaf(st.cell.into_dyn()));
            backbone::predict_forward(tape, &model.model, vars, &frames, st).0
        }
        TaskMode::Reconstruction => {
            let frame = tape.leaf(pair.x.frame(0).into_dyn());
            backbone::reconstruct_forward(tape, &model.model, vars, frame)
        }
    })
}

/// Meta-test adaptation: one application of the inner update on the
/// adaptation pairs.
pub fn adapt(
    model: &dyn TaskLossModel,
    params: &ParamSet,
    adapt_pairs: &[Pair],
    alpha: f64,
    inner_steps: usize,
) -> Result<ParamSet> {
    Ok(inner_update(model, params, adapt_pairs, alpha, inner_steps)?.adapted_params)
}

/// The standard fine-tuning baseline: plain gradient descent on the
/// composite loss over the adaptation pairs. Returns the parameters and
/// the per-step training losses (length `steps`).
pub fn finetune_baseline(
    model: &dyn TaskLossModel,
    params: &ParamSet,
    adapt_pairs: &[Pair],
    steps: usize,
    lr: f64,
) -> Result<(ParamSet, Vec<f64>)> {
    let mut current = params.clone();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let result = inner_update(model, &current, adapt_pairs, lr, 1)?;
        losses.push(result.train_loss_before);
        current = result.adapted_params;
    }
    Ok((current, losses))
}
