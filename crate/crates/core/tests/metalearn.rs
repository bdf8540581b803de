//! Bilevel engine contracts: analytic scalar oracles, finite-difference
//! oracles through the full pipeline, additivity, first/second-order
//! consistency, reproducibility, and training dynamics.

use metascene::backbone::{init_generator, ModelConfig};
use metascene::episodes::{Pair, SceneDataset, TaskMode, Video};
use metascene::losses::{composite_loss, LossWeights};
use metascene::metalearn::{
    adapt, finetune_baseline, inner_update, meta_objective, meta_train, pretrain, task_loss,
    EpisodePairs, MetaConfig, PredictorModel, PretrainConfig, TaskLossModel,
};
use metascene::{ClipTensor, FrameTensor, ParamSet};
use metascene_tape::{Tape, Var};
use ndarray::{Array3, Array4, Array5, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

// ---------------------------------------------------------------------------
// Toy models and fixtures
// ---------------------------------------------------------------------------

/// Loss = sum over pairs of (theta - y_j)^2 with a single scalar parameter.
struct ScalarModel;

fn scalar_params(theta: f64) -> ParamSet {
    ParamSet::new(
        "scalar",
        "none",
        vec![("theta".to_string(), ArrayD::from_elem(IxDyn(&[]), theta))],
    )
}

fn scalar_pair(y: f64) -> Pair {
    Pair {
        x: ClipTensor::new(Array5::from_elem((1, 1, 1, 1, 1), 0.0)).unwrap(),
        y: FrameTensor::new(Array4::from_elem((1, 1, 1, 1), y)).unwrap(),
    }
}

impl TaskLossModel for ScalarModel {
    fn pairs_loss(
        &self,
        tape: &Tape,
        vars: &metascene::backbone::ParamVars,
        pairs: &[Pair],
    ) -> metascene::Result<Var> {
        let theta = vars.get("theta");
        let mut acc = tape.constant(0.0);
        for p in pairs {
            let y = tape.constant(p.y.data()[[0, 0, 0, 0]]);
            let d = tape.sub(theta, y);
            acc = tape.add(acc, tape.mul(d, d));
        }
        Ok(acc)
    }
}

/// Model that always predicts a fixed frame, ignoring its parameters.
struct ConstModel {
    output: Array4<f64>,
    weights: LossWeights,
}

impl TaskLossModel for ConstModel {
    fn pairs_loss(
        &self,
        tape: &Tape,
        _vars: &metascene::backbone::ParamVars,
        pairs: &[Pair],
    ) -> metascene::Result<Var> {
        let mut acc = tape.constant(0.0);
        for p in pairs {
            let pred = tape.leaf(self.output.clone().into_dyn());
            let target = tape.leaf(p.y.data().clone().into_dyn());
            let l = metascene::losses::composite_var(tape, pred, target, &self.weights, 1)?;
            acc = tape.add(acc, l);
        }
        Ok(acc)
    }
}

fn tiny_model() -> (ModelConfig, PredictorModel) {
    let cfg = ModelConfig {
        frame_channels: 1,
        frame_size: 16,
        t: 2,
        unet_depth: 1,
        unet_base: 2,
        lstm_hidden: 2,
        disc_blocks: 2,
        disc_base: 2,
    };
    let model = PredictorModel {
        model: cfg.clone(),
        weights: LossWeights::default(),
        mode: TaskMode::Prediction,
    };
    (cfg, model)
}

fn random_pairs(seed: u64, n: usize, t: usize, size: usize) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Pair {
            x: ClipTensor::new(Array5::from_shape_fn((1, t, 1, size, size), |_| {
                rng.gen_range(-0.9..0.9)
            }))
            .unwrap(),
            y: FrameTensor::new(Array4::from_shape_fn((1, 1, size, size), |_| {
                rng.gen_range(-0.9..0.9)
            }))
            .unwrap(),
        })
        .collect()
}

/// Scenes whose 1x1 frames each hold one scalar value, for the scripted
/// scalar-model meta-training oracle.
fn scalar_scene(id: &str, values: &[f64]) -> SceneDataset {
    let frames = values
        .iter()
        .map(|&v| Arc::new(Array3::from_elem((1, 1, 1), v)))
        .collect();
    SceneDataset {
        scene_id: id.to_string(),
        videos: vec![Video::new("v0", frames, None).unwrap()],
    }
}

// ---------------------------------------------------------------------------
// task_loss
// ---------------------------------------------------------------------------

#[test]
fn task_loss_zero_for_perfect_model() {
    let params = scalar_params(0.7);
    let pairs = vec![scalar_pair(0.7)];
    assert_eq!(task_loss(&ScalarModel, &params, &pairs).unwrap(), 0.0);
}

#[test]
fn task_loss_sums_not_averages() {
    let (cfg, model) = tiny_model();
    let params = init_generator(&cfg, 1);
    let pair = random_pairs(2, 1, cfg.t, 16);
    let single = task_loss(&model, &params, &pair).unwrap();
    let doubled = vec![pair[0].clone(), pair[0].clone()];
    let twice = task_loss(&model, &params, &doubled).unwrap();
    assert!((twice - 2.0 * single).abs() < 1e-12 * single.abs().max(1.0));
    assert!(single > 0.0);
}

#[test]
fn task_loss_matches_hand_summed_components() {
    // A stub model with a constant prediction must reproduce the
    // array-level composite loss summed over pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let output = Array4::from_shape_fn((1, 1, 16, 16), |_| rng.gen_range(-0.5..0.5));
    let weights = LossWeights {
        lambda1: 1.0,
        lambda2: 0.5,
        lambda3 : 0.25,
    };
    let model = ConstModel {
        output: output.clone(),
        weights: weights.clone(),
    };
    let pairs = random_pairs(4, 3, 1, 16);
    let got = task_loss(&model, &scalar_params(0.0), &pairs).unwrap();
    let pred = FrameTensor::new(output).unwrap();
    let expect: f64 = pairs
        .iter()
        .map(|p| composite_loss(&pred, &p.y, &weights, 1).unwrap())
        .sum();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
}

#[test]
fn task_loss_rejects_empty_pairs() {
    assert!(task_loss(&ScalarModel, &scalar_params(0.0), &[]).is_err());
}

// ---------------------------------------------------------------------------
// inner_update / adapt / finetune
// ---------------------------------------------------------------------------

#[test]
fn inner_update_is_identity_at_a_minimum() {
    let params = scalar_params(0.3);
    let pairs = vec![scalar_pair(0.3)];
    let r = inner_update(&ScalarModel, &params, &pairs, 0.1, 1).unwrap();
    assert_eq!(r.adapted_params.max_abs_diff(&params), 0.0);
    assert_eq!(r.gradient_norm, 0.0);
}

#[test]
fn inner_update_scalar_closed_form() {
    // L = (theta - 0)^2 behaves as theta^2; with L = 1/2 theta^2 scaled by
    // the pair convention: our pair loss is (theta - y)^2, so grad = 2theta.
    // Choose alpha = 0.05 so theta' = 1 - 0.05 * 2 = 0.9.
    let params = scalar_params(1.0);
    let pairs = vec![scalar_pair(0.0)];
    let r = inner_update(&ScalarModel, &params, &pairs, 0.05, 1).unwrap();
    let theta = r.adapted_params.get("theta").unwrap()[[]];
    assert!((theta - 0.9).abs() < 1e-15);
    assert!((r.train_loss_before - 1.0).abs() < 1e-15);
    assert!(r.train_loss_after < r.train_loss_before);
    // Input untouched.
    assert_eq!(params.get("theta").unwrap()[[]], 1.0);
}

#[test]
fn inner_update_matches_finite_difference_gradient() {
    let (cfg, model) = tiny_model();
    let params = init_generator(&cfg, 5);
    let pairs = random_pairs(6, 2, cfg.t, 16);
    let alpha = 1e-2;
    let r = inner_update(&model, &params, &pairs, alpha, 1).unwrap();

    // Subsampled central finite differences of the task loss.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eps = 1e-5;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let len = params.get(name).unwrap().len();
        for _ in 0..4.min(len) {
            let idx = rng.gen_range(0..len);
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= eps;
            let fd = (task_loss(&model, &plus, &pairs).unwrap()
                - task_loss(&model, &minus, &pairs).unwrap())
                / (2.0 * eps);
            let expect = params.get(name).unwrap().as_slice().unwrap()[idx] - alpha * fd;
            let got = r.adapted_params.get(name).unwrap().as_slice().unwrap()[idx];
            let denom = expect.abs().max(1e-6);
            assert!(
                (got - expect).abs() / denom < 1e-3,
                "{name}[{idx}]: {got} vs {expect}"
            );
        }
    }
}

#[test]
fn adapt_zero_loss_is_identity_and_k_matters() {
    let params = scalar_params(0.2);
    let same = adapt(&ScalarModel, &params, &[scalar_pair(0.2)], 0.1, 1).unwrap();
    assert_eq!(same.max_abs_diff(&params), 0.0);

    let (cfg, model) = tiny_model();
    let params = init_generator(&cfg, 8);
    let p10 = random_pairs(9, 10, cfg.t, 16);
    let a1 = adapt(&model, &params, &p10[..1], 1e-3, 1).unwrap();
    let a10 = adapt(&model, &params, &p10, 1e-3, 1).unwrap();
    assert!(a1.same_structure(&params));
    assert!(a10.same_structure(&params));
    assert!(a1.max_abs_diff(&a10) > 0.0);
}

#[test]
fn finetune_baseline_contracts() {
    let (cfg, model) = tiny_model();
    let params = init_generator(&cfg, 10);
    let pairs = random_pairs(11, 3, cfg.t, 16);

    // steps = 0: unchanged.
    let (same, losses) = finetune_baseline(&model, &params, &pairs, 0, 1e-3).unwrap();
    assert_eq!(same.max_abs_diff(&params), 0.0);
    assert!(losses.is_empty());

    // steps = 1 at lr alpha equals inner_update.
    let (one, _) = finetune_baseline(&model, &params, &pairs, 1, 1e-3).unwrap();
    let inner = inner_update(&model, &params, &pairs, 1e-3, 1).unwrap();
    assert_eq!(one.max_abs_diff(&inner.adapted_params), 0.0);

    // 50 steps: descent in at least 90% of steps.
    let (_, losses) = finetune_baseline(&model, &params, &pairs, 50, 1e-3).unwrap();
    assert_eq!(losses.len(), 50);
    let descents = losses.windows(2).filter(|w| w[1] <= w[0] + 1e-12).count();
    assert!(descents as f64 >= 0.9 * 49.0, "only {descents}/49 descending");
}

// ---------------------------------------------------------------------------
// meta_objective
// ---------------------------------------------------------------------------

fn meta_cfg(alpha: f64, second_order: bool) -> MetaConfig {
    MetaConfig {
        alpha,
        beta: 1e-4,
        n_tasks: 1,
        k: 1,
        inner_steps: 1,
        second_order,
        iterations: 1,
        seed: 0,
        weights: LossWeights::default(),
        mode: TaskMode::Prediction,
        outer_adam: false,
    }
}

#[test]
fn meta_objective_scalar_closed_form() {
    // Train loss (theta-a)^2, val loss (theta-b)^2 with theta=0, a=1, b=0,
    // alpha=0.25: theta' = 0 - 0.25 * 2(0-1) = 0.5; val loss = 0.25;
    // meta-gradient = 2 theta' (1 - 2 alpha) = 0.5.
    let params = scalar_params(0.0);
    let ep = EpisodePairs {
        train: vec![scalar_pair(1.0)],
        val: vec![scalar_pair(0.0)],
    };
    let (loss, task_losses, grad) =
        meta_objective(&ScalarModel, &params, &[ep], &meta_cfg(0.25, true)).unwrap();
    assert!((loss - 0.25).abs() < 1e-15);
    assert_eq!(task_losses.len(), 1);
    let g = grad.get("theta").unwrap()[[]];
    assert!((g - 0.5).abs() < 1e-12, "meta-gradient {g}");

    // First-order approximation drops the (1 - 2 alpha) factor: grad = 1.0.
    let ep = EpisodePairs {
        train: vec![scalar_pair(1.0)],
        val: vec![scalar_pair(0.0)],
    };
    let (_, _, grad_fo) =
        meta_objective(&ScalarModel, &params, &[ep], &meta_cfg(0.25, false)).unwrap();
    let g = grad_fo.get("theta").unwrap()[[]];
    assert!((g - 1.0).abs() < 1e-12, "first-order gradient {g}");
}

#[test]
fn degenerate_alpha_gives_plain_validation_gradient() {
    // alpha = 0 makes the inner update the identity, so the meta-gradient
    // is the plain validation gradient at theta: 2(theta - b) = 0.6.
    let params = scalar_params(0.3);
    let ep = EpisodePairs {
        train: vec![scalar_pair(1.0)],
        val: vec![scalar_pair(0.0)],
    };
    let (_, _, grad) = meta_objective(&ScalarModel, &params, &[ep], &meta_cfg(0.0, true)).unwrap();
    let g = grad.get("theta").unwrap()[[]];
    assert!((g - 0.6).abs() < 1e-12, "{g}");
}

#[test]
fn meta_gradient_matches_finite_difference_through_pipeline() {
    let (cfg, model) = tiny_model();
    let params = init_generator(&cfg, 13);
    let ep = EpisodePairs {
        train: random_pairs(14, 1, cfg.t, 16),
        val: random_pairs(15, 1, cfg.t, 16),
    };
    let mcfg = meta_cfg(1e-2, true);
    let (_, _, grad) = meta_objective(&model, &params, &[ep], &mcfg).unwrap();

    // Objective value re-running the whole inner update at perturbed theta.
    let objective = |p: &ParamSet| -> f64 {
        let train = random_pairs(14, 1, cfg.t, 16);
        let val = random_pairs(15, 1, cfg.t, 16);
        let adapted = inner_update(&model, p, &train, mcfg.alpha, 1).unwrap().adapted_params;
        task_loss(&model, &adapted, &val).unwrap()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let eps = 1e-5;
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut checked = 0;
    for name in &names {
        let len = params.get(name).unwrap().len();
        for _ in 0..3.min(len) {
            let idx = rng.gen_range(0..len);
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= eps;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            let a = grad.get(name).unwrap().as_slice().unwrap()[idx];
            checked += 1;
            // Absolute agreement below finite-difference noise counts.
            if (a - fd).abs() < 1e-7 {
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            assert!(rel < 1e-3, "{name}[{idx}]: analytic {a:.4e} fd {fd:.4e}");
        }
    }
    assert!(checked > 5, "finite-difference oracle barely exercised");
}

#[test]
fn meta_objective_is_additive_over_tasks() {
    let (cfg, model) = tiny_model();
    let params = init_generator(&cfg, 17);
    let eps: Vec<EpisodePairs> = (0..3)
        .map(|i| EpisodePairs {
            train: random_pairs(100 + i, 2, cfg.t, 16),
            val: random_pairs(200 + i, 2, cfg.t, 16),
        })
        .collect();
    let mcfg = meta_cfg(1e-3, true);
    let (joint_loss, task_losses, joint_grad) =
        meta_objective(&model, &params, &eps, &mcfg).unwrap();

    let mut sum_loss = 0.0;
    let mut sum_grad: Option<ParamSet> = None;
    for i in 0..3 {
        let ep = EpisodePairs {
            train: random_pairs(100 + i, 2, cfg.t, 16),
            val: random_pairs(200 + i, 2, cfg.t, 16),
        };
        let (l, _, g) = meta_objective(&model, &params, &[ep], &mcfg).unwrap();
        assert!((l - task_losses[i as usize]).abs() < 1e-12);
        sum_loss += l;
        sum_grad = Some(match sum_grad {
            None => g,
            Some(acc) => acc.sub_scaled(&g, -1.0).unwrap(),
        });
    }
    assert!((joint_loss - sum_loss).abs() < 1e-12);
    assert!(joint_grad.max_abs_diff(&sum_grad.unwrap()) < 1e-12);
}

#[test]
fn first_and_second_order_converge_as_alpha_shrinks() {
    let (cfg, model) = tiny_model();
    let params = init_generator(&cfg, 19);
    let make_ep = || EpisodePairs {
        train: random_pairs(20, 1, cfg.t, 16),
        val: random_pairs(21, 1, cfg.t, 16),
    };
    let (_, _, g2) = meta_objective(&model, &params, &[make_ep()], &meta_cfg(1e-6, true)).unwrap();
    let (_, _, g1) = meta_objective(&model, &params, &[make_ep()], &meta_cfg(1e-6, false)).unwrap();
    let diff = g1.max_abs_diff(&g2);
    let scale = g2.l2_norm() / (g2.num_scalars() as f64).sqrt();
    assert!(diff / scale < 1e-2, "rel diff {}", diff / scale);

    // And they genuinely differ at a large alpha.
    let (_, _, g2) = meta_objective(&model, &params, &[make_ep()], &meta_cfg(0.05, true)).unwrap();
    let (_, _, g1) = meta_objective(&model, &params, &[make_ep()], &meta_cfg(0.05, false)).unwrap();
    assert!(g1.max_abs_diff(&g2) / scale > 1e-4);
}

// ---------------------------------------------------------------------------
// meta_train
// ---------------------------------------------------------------------------

#[test]
fn meta_train_zero_iterations_is_identity() {
    let params = scalar_params(0.4);
    let scenes = vec![scalar_scene("a", &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])];
    let cfg = MetaConfig {
        iterations: 0,
        n_tasks: 1,
        k: 1,
        ..meta_cfg(0.1, true)
    };
    let mut records = Vec::new();
    let out = meta_train(&ScalarModel, &params, &scenes, 1, &cfg, &mut |r, _| {
        records.push(r.clone())
    })
    .unwrap();
    assert_eq!(out.max_abs_diff(&params), 0.0);
    assert!(records.is_empty());
}

#[test]
fn meta_train_matches_scripted_scalar_loop() {
    // Independently scripted closed-form updates for the scalar model.
    let scenes: Vec<SceneDataset> = (0..4)
        .map(|i| {
            let base = 0.1 * (i as f64 + 1.0);
            let vals: Vec<f64> = (0..8).map(|j| base + 0.01 * j as f64).collect();
            scalar_scene(&format!("s{i}"), &vals)
        })
        .collect();
    let cfg = MetaConfig {
        alpha: 0.05,
        beta: 0.1,
        n_tasks: 2,
        k: 2,
        inner_steps: 1,
        second_order: true,
        iterations: 20,
        seed: 77,
        weights: LossWeights::default(),
        mode: TaskMode::Prediction,
        outer_adam: false,
    };
    let t = 1;
    let mut records = Vec::new();
    let out = meta_train(&ScalarModel, &scalar_params(0.9), &scenes, t, &cfg, &mut |r, _| {
        records.push(r.clone())
    })
    .unwrap();
    assert_eq!(records.len(), 20);

    // Scripted loop: same sampling stream, closed-form math.
    use metascene::episodes::sample_scene_batch;
    let mut theta = 0.9f64;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for record in &records {
        let tasks =
            sample_scene_batch(&scenes, cfg.n_tasks, cfg.k, t, cfg.mode, seed_rng.gen()).unwrap();
        let mut meta_loss = 0.0;
        let mut meta_grad = 0.0;
        for task in &tasks {
            let scene = scenes.iter().find(|s| s.scene_id == task.scene_id).unwrap();
            let video = &scene.videos[task.video_index];
            let y_of = |idx: usize| video.frames[idx][[0, 0, 0]];
            // Inner step on the K train targets.
            let g_tr: f64 = task.train_pairs.iter().map(|p| 2.0 * (theta - y_of(p.target))).sum();
            let theta_p = theta - cfg.alpha * g_tr;
            let dtheta_p = 1.0 - 2.0 * cfg.alpha * cfg.k as f64;
            meta_loss += task
                .val_pairs
                .iter()
                .map(|p| (theta_p - y_of(p.target)).powi(2))
                .sum::<f64>();
            meta_grad += task
                .val_pairs
                .iter()
                .map(|p| 2.0 * (theta_p - y_of(p.target)) * dtheta_p)
                .sum::<f64>();
        }
        assert!(
            (record.meta_loss - meta_loss).abs() < 1e-12,
            "iteration {}: {} vs scripted {}",
            record.iteration,
            record.meta_loss,
            meta_loss
        );
        theta -= cfg.beta * meta_grad;
    }
    let got = out.get("theta").unwrap()[[]];
    assert!((got - theta).abs() < 1e-12, "{got} vs scripted {theta}");

    // Dynamics: meta-loss decreased over training.
    assert!(records.last().unwrap().meta_loss < records[0].meta_loss);
}

#[test]
fn meta_train_is_reproducible() {
    let scenes: Vec<SceneDataset> = (0..4)
        .map(|i| scalar_scene(&format!("s{i}"), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]))
        .collect();
    let cfg = MetaConfig {
        alpha: 0.03,
        beta: 0.05,
        n_tasks: 2,
        k: 2,
        iterations: 30,
        seed: 5,
        ..meta_cfg(0.03, true)
    };
    let run = || {
        let mut losses = Vec::new();
        let out = meta_train(&ScalarModel, &scalar_params(0.5), &scenes, 1, &cfg, &mut |r, _| {
            losses.push(r.meta_loss)
        })
        .unwrap();
        (out, losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a.max_abs_diff(&b), 0.0);
    for (x, y) in la.iter().zip(&lb) {
        assert!((x - y).abs() < 1e-9);
    }
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

fn pretrain_scene(seed: u64, len: usize) -> SceneDataset {
    use metascene::synth::{render_video, SynthSceneSpec};
    let spec = SynthSceneSpec {
        scene_id: format!("p{seed}"),
        seed,
        resolution: 16,
        video_len: len,
        train_videos: 1,
        test_videos: 0,
        sprite_size: 2,
        injectors: vec![],
    };
    let r = render_video(&spec, 0, false).unwrap();
    let frames = r
        .frames
        .iter()
        .map(|f| {
            let mut a = Array3::zeros((1, 16, 16));
            a.index_axis_mut(ndarray::Axis(0), 0).assign(f);
            Arc::new(a)
        })
        .collect();
    SceneDataset {
        scene_id: spec.scene_id.clone(),
        videos: vec![Video::new("v0", frames, None).unwrap()],
    }
}

fn pretrain_model_cfg() -> ModelConfig {
    ModelConfig {
        frame_channels: 1,
        frame_size: 16,
        t: 1,
        unet_depth: 1,
        unet_base: 4,
        lstm_hidden: 4,
        disc_blocks: 2,
        disc_base: 4,
    }
}

#[test]
fn pretrain_zero_steps_returns_seeded_init() {
    let cfg = pretrain_model_cfg();
    let pcfg = PretrainConfig {
        steps: 0,
        seed: 9,
        ..PretrainConfig::default()
    };
    let scenes = vec![pretrain_scene(1, 10)];
    let mut n = 0;
    let (gen, disc) = pretrain(&scenes, &cfg, &pcfg, &mut |_| n += 1).unwrap();
    assert_eq!(n, 0);
    assert_eq!(gen.max_abs_diff(&init_generator(&cfg, 9)), 0.0);
    assert_eq!(gen.config_hash(), cfg.hash());
    assert_eq!(disc.config_hash(), cfg.hash());
}

#[test]
fn pretrain_overfits_one_video_and_logs_every_step() {
    let cfg = ModelConfig {
        unet_depth: 2,
        unet_base: 8,
        lstm_hidden: 8,
        ..pretrain_model_cfg()
    };
    let scenes = vec![pretrain_scene(2, 30)];
    let pcfg = PretrainConfig {
        steps: 500,
        lr: 5e-3,
        batch: 4,
        adversarial_weight: 0.0,
        seed: 3,
        weights: LossWeights::default(),
        mode: TaskMode::Prediction,
    };
    let mut records = Vec::new();
    let (gen, _) = pretrain(&scenes, &cfg, &pcfg, &mut |r| records.push(r.clone())).unwrap();
    assert_eq!(records.len(), 500);

    // Composite loss on every window of the video falls below 0.1.
    use metascene::episodes::{materialize_pairs, window_video};
    let video = &scenes[0].videos[0];
    let windows = window_video(video, cfg.t).unwrap();
    let pairs = materialize_pairs(video, &windows, cfg.t, TaskMode::Prediction).unwrap();
    let model = PredictorModel {
        model: cfg.clone(),
        weights: LossWeights::default(),
        mode: TaskMode::Prediction,
    };
    let per_pair = task_loss(&model, &gen, &pairs).unwrap() / pairs.len() as f64;
    assert!(per_pair < 0.1, "per-window composite loss {per_pair}");
}

#[test]
fn adversarial_pretraining_separates_real_from_fake() {
    let cfg = pretrain_model_cfg();
    let scenes = vec![pretrain_scene(4, 30), pretrain_scene(5, 30)];
    let pcfg = PretrainConfig {
        steps: 120,
        lr: 1e-3,
        batch: 2,
        adversarial_weight: 0.05,
        seed: 6,
        weights: LossWeights::default(),
        mode: TaskMode::Prediction,
    };
    let (gen, disc) = pretrain(&scenes, &cfg, &pcfg, &mut |_| {}).unwrap();

    use metascene::backbone::{discriminate, initial_state, predict_next_frame};
    use metascene::episodes::{materialize_pairs, window_video};
    let video = &scenes[0].videos[0];
    let windows = window_video(video, cfg.t).unwrap();
    let pairs = materialize_pairs(video, &windows[..10], cfg.t, TaskMode::Prediction).unwrap();
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut real_score = 0.0;
    let mut fake_score = 0.0;
    let mut n = 0.0;
    for pair in &pairs {
        let state = initial_state(&cfg, 1, 16, 16);
        let (pred, _) = predict_next_frame(&cfg, &gen, &pair.x, &state).unwrap();
        for &l in discriminate(&cfg, &disc, &pred).unwrap().iter() {
            fake_score += sigmoid(l);
            n += 1.0;
        }
        for &l in discriminate(&cfg, &disc, &pair.y).unwrap().iter() {
            real_score += sigmoid(l);
        }
    }
    assert!(
        real_score / n > fake_score / n,
        "real {} vs fake {}",
        real_score / n,
        fake_score / n
    );
}

#[test]
fn adaptation_reduces_held_out_loss_after_pretraining() {
    // Pre-train on two scenes, then one inner step on a third scene's
    // prefix must reduce prediction loss on that scene's later frames.
    let cfg = pretrain_model_cfg();
    let train_scenes = vec![pretrain_scene(10, 30), pretrain_scene(11, 30)];
    let pcfg = PretrainConfig {
        steps: 200,
        lr: 1e-3,
        batch: 2,
        adversarial_weight: 0.0,
        seed: 12,
        weights: LossWeights::default(),
        mode: TaskMode::Prediction,
    };
    let (gen, _) = pretrain(&train_scenes, &cfg, &pcfg, &mut |_| {}).unwrap();

    let target = pretrain_scene(99, 40);
    use metascene::episodes::{adaptation_set_from_prefix, materialize_pairs, WindowPair};
    let video = &target.videos[0];
    let set = adaptation_set_from_prefix(video, 5, cfg.t).unwrap();
    let adapt_pairs = materialize_pairs(video, &set.adapt_pairs, cfg.t, TaskMode::Prediction).unwrap();
    let model = PredictorModel {
        model: cfg.clone(),
        weights: LossWeights::default(),
        mode: TaskMode::Prediction,
    };
    let theta_p = adapt(&model, &gen, &adapt_pairs, 5e-3, 1).unwrap();

    let held_out: Vec<WindowPair> = (set.eval_start..video.len())
        .map(|target| WindowPair { start: target - cfg.t, target })
        .collect();
    let eval_pairs = materialize_pairs(video, &held_out, cfg.t, TaskMode::Prediction).unwrap();
    let before = task_loss(&model, &gen, &eval_pairs).unwrap();
    let after = task_loss(&model, &theta_p, &eval_pairs).unwrap();
    assert!(after < before, "adaptation did not help: {after} vs {before}");
}
