//! Frame-level anomaly scoring (prediction PSNR, per-video min-max
//! normalization) and ROC-AUC computation.

use crate::backbone::{self, ModelConfig};
use crate::episodes::{adaptation_set_from_prefix, materialize_pairs, Pair, SceneDataset, TaskMode, Video};
use crate::error::{Error, Result};
use crate::losses::psnr;
use crate::types::{ClipTensor, FrameTensor, ParamSet};
use ndarray::Array5;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// What raw signal the anomaly score is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// 1 - min-max normalized PSNR (the future-frame-prediction convention).
    Psnr,
    /// Min-max normalized mean squared error.
    Mse,
}

/// Per-frame anomaly scores of one video, aligned with labels when known.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalyScoreSeries {
    pub video_id: String,
    /// Index of the first evaluated (target) frame.
    pub frame_offset: usize,
    /// Higher = more anomalous; normalized to [0, 1] within the video.
    pub scores: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

/// Min-max normalize to [0, 1]. A constant series maps to all 0.5 (the
/// declared tie convention: no evidence orders the frames).
pub fn min_max_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("scores must be finite before normalization"));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !((max - min).abs() > 1e-12) {
        return Ok(vec![0.5; values.len()]);
    }
    Ok(values.iter().map(|v| (v - min) / (max - min)).collect())
}

/// Scoring core over an arbitrary next-frame predictor, for oracle tests
/// and stub models. `start_index` is the first input frame; targets run
/// from `start_index + t` to the end of the video.
pub fn score_video_with(
    predict: &dyn Fn(&ClipTensor) -> Result<FrameTensor>,
    video: &Video,
    t: usize,
    start_index: usize,
    mode: ScoreMode,
) -> Result<AnomalyScoreSeries> {
    let f = video.len();
    if t == 0 {
        return Err(Error::validation("t must be at least 1"));
    }
    if f < start_index + t + 1 {
        return Err(Error::validation(format!(
            "video {} has {f} frames; scoring from input index {start_index} with t={t} needs at least {}",
            video.video_id,
            start_index + t + 1
        )));
    }
    let first_target = start_index + t;
    let mut raw = Vec::with_capacity(f - first_target);
    for target in first_target..f {
        let pairs = materialize_pairs(
            video,
            &[crate::episodes::WindowPair { start: target - t, target }],
            t,
            TaskMode::Prediction,
        )?;
        let pred = predict(&pairs[0].x)?;
        let v = match mode {
            ScoreMode::Psnr => psnr(&pred, &pairs[0].y)?,
            ScoreMode::Mse => {
                let d = pred.data() - pairs[0].y.data();
                d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64
            }
        };
        raw.push(v);
    }
    let norm = min_max_normalize(&raw)?;
    let scores = match mode {
        // High PSNR = well predicted = normal.
        ScoreMode::Psnr => norm.iter().map(|v| 1.0 - v).collect(),
        ScoreMode::Mse => norm,
    };
    let labels = video.labels.as_ref().map(|l| l[first_target..].to_vec());
    Ok(AnomalyScoreSeries {
        video_id: video.video_id.clone(),
        frame_offset: first_target,
        scores,
        labels,
    })
}

/// Score a video with the prediction backbone: for every target frame,
/// predict it from the preceding t frames (state zeroed per window),
/// convert prediction quality to a normalized anomaly score.
pub fn score_video(
    model: &ModelConfig,
    params: &ParamSet,
    video: &Video,
    start_index: usize,
    mode: ScoreMode,
) -> Result<AnomalyScoreSeries> {
    let predict = |clip: &ClipTensor| -> Result<FrameTensor> {
        let (n, _, _, h, w) = clip.dims();
        let state = backbone::initial_state(model, n, h, w);
        Ok(backbone::predict_next_frame(model, params, clip, &state)?.0)
    };
    score_video_with(&predict, video, model.t, start_index, mode)
}

/// Area under the ROC curve via the rank statistic
/// `P(score+ > score-) + 0.5 P(score+ = score-)`, with tie correction.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("scores vs labels", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::validation("roc_auc needs at least one sample"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("roc_auc scores must be finite"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::validation("labels must be 0 or 1"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::validation(
            "roc_auc is undefined when only one class is present",
        ));
    }
    // Average ranks with midranks for ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Pool multiple per-video series into a single AUC.
pub fn pooled_auc(series: &[AnomalyScoreSeries]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in series {
        let l = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::validation(format!("video {} has no labels", s.video_id)))?;
        if l.len() != s.scores.len() {
            return Err(Error::shape(
                format!("labels of video {}", s.video_id),
                s.scores.len(),
                l.len(),
            ));
        }
        scores.extend_from_slice(&s.scores);
        labels.extend_from_slice(l);
    }
    roc_auc(&scores, &labels)
}

/// Per-scene evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEvaluation {
    pub scene_id: String,
    pub auc: f64,
    pub n_frames: usize,
    pub n_anomalous: usize,
    pub series: Vec<AnomalyScoreSeries>,
}

/// Evaluate one scene: adapt on the first labeled video's K-window prefix
/// via `adapt_fn` (identity for the pre-trained baseline), then score that
/// video's remaining frames and every other labeled video in full, pooling
/// into one scene AUC.
pub fn evaluate_scene(
    model: &ModelConfig,
    params: &ParamSet,
    scene: &SceneDataset,
    k: usize,
    adapt_fn: &dyn Fn(&ParamSet, &[Pair]) -> Result<ParamSet>,
    mode: ScoreMode,
) -> Result<SceneEvaluation> {
    let labeled: Vec<&Video> = scene.videos.iter().filter(|v| v.labels.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::validation(format!(
            "scene {} has no labeled videos to evaluate",
            scene.scene_id
        )));
    }
    let first = labeled[0];
    let set = adaptation_set_from_prefix(first, k, model.t)?;
    let adapt_pairs = materialize_pairs(first, &set.adapt_pairs, model.t, TaskMode::Prediction)?;
    let adapted = adapt_fn(params, &adapt_pairs)?;
    params.check_same_structure(&adapted, "adapted parameters")?;

    let mut series = Vec::new();
    // The adaptation video is scored only past its adaptation prefix.
    series.push(score_video(model, &adapted, first, k, mode)?);
    for video in labeled.iter().skip(1) {
        series.push(score_video(model, &adapted, video, 0, mode)?);
    }
    let auc = pooled_auc(&series)?;
    let n_frames = series.iter().map(|s| s.scores.len()).sum();
    let n_anomalous = series
        .iter()
        .flat_map(|s| s.labels.as_ref().unwrap().iter())
        .filter(|&&l| l == 1)
        .count();
    Ok(SceneEvaluation {
        scene_id: scene.scene_id.clone(),
        auc,
        n_frames,
        n_anomalous,
        series,
    })
}

/// One row of the comparison report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub k: usize,
    pub scene: String,
    pub auc: f64,
    pub n_frames: usize,
    pub config_hash: String,
}

/// Dump per-frame scores as `video_id,frame_idx,score,label` CSV.
pub fn write_score_csv(path: &Path, series: &[AnomalyScoreSeries]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "video_id,frame_idx,score,label")?;
    for s in series {
        for (i, score) in s.scores.iter().enumerate() {
            let label = s
                .labels
                .as_ref()
                .map(|l| l[i].to_string())
                .unwrap_or_default();
            writeln!(f, "{},{},{},{}", s.video_id, s.frame_offset + i, score, label)?;
        }
    }
    Ok(())
}

/// Helper for tests and stubs: a clip tensor from raw frames.
pub fn clip_from_frames(frames: &[crate::episodes::Frame]) -> Result<ClipTensor> {
    if frames.is_empty() {
        return Err(Error::validation("clip needs at least one frame"));
    }
    let (c, h, w) = frames[0].dim();
    let mut data = Array5::zeros((1, frames.len(), c, h, w));
    for (k, f) in frames.iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(1), k)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(f.as_ref());
    }
    ClipTensor::new(data)
}
