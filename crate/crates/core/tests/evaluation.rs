//! Scoring and AUC contracts: min-max arithmetic, tie conventions, the
//! pairwise AUC oracle, and scene-level evaluation plumbing.

use metascene::backbone::{init_generator, ModelConfig};
use metascene::episodes::Video;
use metascene::evaluation::{
    evaluate_scene, min_max_normalize, pooled_auc, roc_auc, score_video, score_video_with,
    write_score_csv, AnomalyScoreSeries, ScoreMode,
};
use metascene::synth::{default_specs, render_corpus};
use metascene::{ClipTensor, Error, FrameTensor};
use ndarray::{Array3, Array4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn video_of_values(values: &[f64], labels: Option<Vec<u8>>) -> Video {
    let frames = values
        .iter()
        .map(|&v| Arc::new(Array3::from_elem((1, 4, 4), v.clamp(-1.0, 1.0))))
        .collect();
    Video::new("v", frames, labels).unwrap()
}

#[test]
fn min_max_arithmetic_and_tie_convention() {
    // PSNRs [10, 20, 30] normalize to [0, 0.5, 1], so scores are [1, .5, 0].
    let norm = min_max_normalize(&[10.0, 20.0, 30.0]).unwrap();
    let scores: Vec<f64> = norm.iter().map(|v| 1.0 - v).collect();
    assert_eq!(scores, vec![1.0, 0.5, 0.0]);

    // Constant input: all 0.5.
    assert_eq!(min_max_normalize(&[7.0; 5]).unwrap(), vec![0.5; 5]);

    assert!(min_max_normalize(&[1.0, f64::NAN]).is_err());
}

#[test]
fn perfect_predictor_scores_all_half() {
    // Prediction = target everywhere gives capped, constant PSNR.
    let video = video_of_values(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], None);
    let predict = |clip: &ClipTensor| -> metascene::Result<FrameTensor> {
        // The next frame equals the last input plus the known step 0.1.
        let last = clip.frame(clip.dims().1 - 1) + 0.1;
        FrameTensor::new(last)
    };
    let s = score_video_with(&predict, &video, 1, 0, ScoreMode::Psnr).unwrap();
    assert_eq!(s.scores, vec![0.5; 5]);
    assert_eq!(s.frame_offset, 1);
}

#[test]
fn stub_predictor_matches_hand_computed_pipeline() {
    // A stub that always predicts zeros on a 10-frame fixture.
    let values: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let video = video_of_values(&values, None);
    let predict = |_: &ClipTensor| FrameTensor::new(Array4::zeros((1, 1, 4, 4)));
    let t = 2;
    let s = score_video_with(&predict, &video, t, 0, ScoreMode::Psnr).unwrap();
    assert_eq!(s.scores.len(), 10 - t);

    // Hand pipeline: PSNR of zeros vs constant target c is
    // -10 log10(((c/2)^2)) since the [-1,1] difference is remapped by /2.
    let psnrs: Vec<f64> = (t..10)
        .map(|i| {
            let c: f64 = values[i];
            -10.0 * ((c / 2.0).powi(2)).max(1e-10).log10()
        })
        .collect();
    let lo = psnrs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = psnrs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (got, p) in s.scores.iter().zip(&psnrs) {
        let expect = 1.0 - (p - lo) / (hi - lo);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    // Length contract across start indices.
    for start in 0..5 {
        let s = score_video_with(&predict, &video, t, start, ScoreMode::Psnr).unwrap();
        assert_eq!(s.scores.len(), 10 - start - t);
    }

    // Too short.
    let short = video_of_values(&values[..2], None);
    assert!(score_video_with(&predict, &short, 2, 0, ScoreMode::Psnr).is_err());
}

#[test]
fn mse_mode_ranks_like_inverse_psnr() {
    let values: Vec<f64> = vec![0.0, 0.3, -0.2, 0.7, 0.5, -0.6, 0.1];
    let video = video_of_values(&values, None);
    let predict = |_: &ClipTensor| FrameTensor::new(Array4::zeros((1, 1, 4, 4)));
    let p = score_video_with(&predict, &video, 1, 0, ScoreMode::Psnr).unwrap();
    let m = score_video_with(&predict, &video, 1, 0, ScoreMode::Mse).unwrap();
    // Same ordering of frames by anomaly.
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        idx
    };
    assert_eq!(rank(&p.scores), rank(&m.scores));
}

#[test]
fn roc_auc_trivial_cases() {
    assert_eq!(roc_auc(&[0.1, 0.9, 0.8, 0.2], &[0, 1, 1, 0]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
    assert_eq!(roc_auc(&[0.4; 6], &[0, 1, 0, 1, 0, 1]).unwrap(), 0.5);
    assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::Validation(_))));
    assert!(matches!(roc_auc(&[0.1], &[1, 0]), Err(Error::Shape { .. })));
    assert!(roc_auc(&[], &[]).is_err());
}

#[test]
fn roc_auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for trial in 0..5 {
        let n = 200;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                // Quantized scores force plenty of ties.
                (rng.gen_range(0.0..1.0_f64) * 10.0).round() / 10.0
            })
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let fast = roc_auc(&scores, &labels).unwrap();

        // O(n^2) pairwise statistic.
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        let brute = num / den;
        assert!((fast - brute).abs() < 1e-12, "trial {trial}: {fast} vs {brute}");
    }
}

#[test]
fn roc_auc_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scores: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut labels: Vec<u8> = (0..100).map(|_| rng.gen_range(0..2) as u8).collect();
    labels[0] = 0;
    labels[1] = 1;
    let base = roc_auc(&scores, &labels).unwrap();

    // Invariant under strictly increasing transforms.
    let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + s.powi(3)).collect();
    assert!((roc_auc(&warped, &labels).unwrap() - base).abs() < 1e-12);

    // Complement rule for tie-free scores (random f64s are distinct).
    let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
    let comp = roc_auc(&scores, &flipped).unwrap();
    assert!((base + comp - 1.0).abs() < 1e-12);
}

#[test]
fn oracle_scorer_gives_perfect_scene_auc() {
    // Score = label pooled across videos must give AUC 1.0.
    let series = vec![
        AnomalyScoreSeries {
            video_id: "a".into(),
            frame_offset: 0,
            scores: vec![0.0, 1.0, 1.0, 0.0],
            labels: Some(vec![0, 1, 1, 0]),
        },
        AnomalyScoreSeries {
            video_id: "b".into(),
            frame_offset: 0,
            scores: vec![1.0, 0.0],
            labels: Some(vec![1, 0]),
        },
    ];
    assert_eq!(pooled_auc(&series).unwrap(), 1.0);
}

#[test]
fn per_video_normalization_is_local() {
    // Scores of one video are unaffected by other videos.
    let predict = |_: &ClipTensor| FrameTensor::new(Array4::zeros((1, 1, 4, 4)));
    let a = video_of_values(&[0.0, 0.1, 0.5, 0.9, 0.2], None);
    let s1 = score_video_with(&predict, &a, 1, 0, ScoreMode::Psnr).unwrap();
    // "Editing another video" = scoring it; recompute a afterwards.
    let b = video_of_values(&[0.9, 0.8, 0.1, 0.0, 0.3], None);
    let _ = score_video_with(&predict, &b, 1, 0, ScoreMode::Psnr).unwrap();
    let s2 = score_video_with(&predict, &a, 1, 0, ScoreMode::Psnr).unwrap();
    assert_eq!(s1.scores, s2.scores);
}

fn tiny_eval_model() -> ModelConfig {
    ModelConfig {
        frame_channels: 1,
        frame_size: 16,
        t: 1,
        unet_depth: 1,
        unet_base: 2,
        lstm_hidden: 2,
        disc_blocks: 2,
        disc_base: 2,
    }
}

#[test]
fn evaluate_scene_is_deterministic_with_identity_adaptation() {
    let cfg = tiny_eval_model();
    let params = init_generator(&cfg, 3);
    let mut specs = default_specs(1, 5, 16, 40);
    specs[0].sprite_size = 2;
    let scenes = render_corpus(&specs, 1).unwrap();
    let identity = |p: &metascene::ParamSet, _: &[metascene::episodes::Pair]| Ok(p.clone());
    let a = evaluate_scene(&cfg, &params, &scenes[0], 3, &identity, ScoreMode::Psnr).unwrap();
    let b = evaluate_scene(&cfg, &params, &scenes[0], 3, &identity, ScoreMode::Psnr).unwrap();
    assert_eq!(a.auc, b.auc);
    assert_eq!(a.n_frames, b.n_frames);
    assert!(a.n_anomalous > 0);
    assert!((0.0..=1.0).contains(&a.auc));
    // Adaptation video scored past its prefix only: K + t onward.
    assert_eq!(a.series[0].frame_offset, 3 + cfg.t);
}

#[test]
fn evaluate_scene_requires_labels() {
    let cfg = tiny_eval_model();
    let params = init_generator(&cfg, 3);
    let video = video_of_values_16(&[0.0; 30]);
    let scene = metascene::episodes::SceneDataset {
        scene_id: "s".into(),
        videos: vec![video],
    };
    let identity = |p: &metascene::ParamSet, _: &[metascene::episodes::Pair]| Ok(p.clone());
    assert!(matches!(
        evaluate_scene(&cfg, &params, &scene, 3, &identity, ScoreMode::Psnr),
        Err(Error::Validation(_))
    ));
}

fn video_of_values_16(values: &[f64]) -> Video {
    let frames = values
        .iter()
        .map(|&v| Arc::new(Array3::from_elem((1, 16, 16), v)))
        .collect();
    Video::new("v", frames, None).unwrap()
}

#[test]
fn score_video_with_real_backbone_has_contracted_shape() {
    let cfg = tiny_eval_model();
    let params = init_generator(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let values: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let video = video_of_values_16(&values);
    let s = score_video(&cfg, &params, &video, 4, ScoreMode::Psnr).unwrap();
    assert_eq!(s.scores.len(), 20 - 4 - cfg.t);
    assert!(s.scores.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn csv_dump_round_trips_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    let series = vec![AnomalyScoreSeries {
        video_id: "v0".into(),
        frame_offset: 5,
        scores: vec![0.25, 0.75],
        labels: Some(vec![0, 1]),
    }];
    write_score_csv(&path, &series).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "video_id,frame_idx,score,label");
    assert_eq!(lines[1], "v0,5,0.25,0");
    assert_eq!(lines[2], "v0,6,0.75,1");
}
