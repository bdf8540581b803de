//! Scene/video data model and episodic task construction: overlapping
//! (t+1)-frame windows, K-shot train/val splits per scene, meta-test
//! adaptation prefixes, and the on-disk dataset loader.
//!
//! Sampling operates purely on frame indices; pixels are only touched when
//! a task is materialized into tensors.

use crate::error::{Error, Result};
use crate::types::{ClipTensor, FrameTensor};
use ndarray::{Array3, Array4, Array5};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// One preprocessed frame, `(channel, height, width)`, values in `[-1, 1]`.
pub type Frame = Arc<Array3<f64>>;

/// A single video: frames in capture order, optional per-frame anomaly
/// labels aligned 1:1 with the frames.
#[derive(Debug, Clone)]
pub struct Video {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub labels: Option<Vec<u8>>,
    /// Informational only.
    pub fps: Option<f64>,
}

impl Video {
    pub fn new(video_id: impl Into<String>, frames: Vec<Frame>, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != frames.len() {
                return Err(Error::shape("labels per frame", frames.len(), l.len()));
            }
            if l.iter().any(|&x| x > 1) {
                return Err(Error::validation("labels must be 0 or 1"));
            }
        }
        if let Some(first) = frames.first() {
            let dim = first.dim();
            if frames.iter().any(|f| f.dim() != dim) {
                return Err(Error::validation("all frames in a video must share one spatial size"));
            }
        }
        Ok(Self {
            video_id: video_id.into(),
            frames,
            labels,
            fps: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A camera scene: an ordered list of videos sharing one viewpoint.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub scene_id: String,
    pub videos: Vec<Video>,
}

/// Prediction tasks map t frames to the following frame; reconstruction
/// tasks map a frame to itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Prediction,
    Reconstruction,
}

/// An (x, y) pair identified by frame indices within one video: x is
/// frames `start..start+t`, y is frame `start + t` (for reconstruction,
/// t = 0 and y = x = frame `start`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPair {
    pub start: usize,
    pub target: usize,
}

/// A K-shot episodic task: disjoint train/val window sets drawn from a
/// single video of one scene.
#[derive(Debug, Clone)]
pub struct Task {
    pub scene_id: String,
    pub video_index: usize,
    pub mode: TaskMode,
    pub t: usize,
    pub train_pairs: Vec<WindowPair>,
    pub val_pairs: Vec<WindowPair>,
}

/// A materialized (x, y) pair: a batch-1 clip and its batch-1 target.
#[derive(Debug, Clone)]
pub struct Pair {
    pub x: ClipTensor,
    pub y: FrameTensor,
}

/// Split a video into all overlapping windows: pair `j` uses frames
/// `j..j+t` as input and frame `j+t` as target, for `j` in `0..F-t`.
pub fn window_video(video: &Video, t: usize) -> Result<Vec<WindowPair>> {
    let f = video.len();
    if t == 0 {
        return Err(Error::validation("window length t must be at least 1"));
    }
    if f < t + 1 {
        return Err(Error::validation(format!(
            "video {} has {f} frames, needs at least t+1 = {}",
            video.video_id,
            t + 1
        )));
    }
    Ok((0..f - t).map(|j| WindowPair { start: j, target: j + t }).collect())
}

fn pair_pool(video: &Video, t: usize, mode: TaskMode) -> Result<Vec<WindowPair>> {
    match mode {
        TaskMode::Prediction => window_video(video, t),
        TaskMode::Reconstruction => {
            if video.is_empty() {
                return Err(Error::validation(format!("video {} has no frames", video.video_id)));
            }
            Ok((0..video.len()).map(|j| WindowPair { start: j, target: j }).collect())
        }
    }
}

fn required_frames(k: usize, t: usize, mode: TaskMode) -> usize {
    match mode {
        TaskMode::Prediction => 2 * k + t,
        TaskMode::Reconstruction => 2 * k,
    }
}

/// Sample one K-shot task from a scene: a uniformly chosen eligible video,
/// then K train and K val pairs drawn without replacement (disjoint by
/// construction). Deterministic given `rng_seed`.
pub fn sample_task(
    scene: &SceneDataset,
    k: usize,
    t: usize,
    mode: TaskMode,
    rng_seed: u64,
) -> Result<Task> {
    if k == 0 {
        return Err(Error::validation("K must be at least 1"));
    }
    let need = required_frames(k, t, mode);
    let eligible: Vec<usize> = scene
        .videos
        .iter()
        .enumerate()
        .filter(|(_, v)| v.len() >= need)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::validation(format!(
            "scene {}: no video has the required minimum of {need} frames for K={k}, t={t}",
            scene.scene_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let video_index = eligible[rng.gen_range(0..eligible.len())];
    let pool = pair_pool(&scene.videos[video_index], t, mode)?;
    let picks = rand::seq::index::sample(&mut rng, pool.len(), 2 * k);
    let train_pairs = picks.iter().take(k).map(|i| pool[i]).collect();
    let val_pairs = picks.iter().skip(k).map(|i| pool[i]).collect();
    Ok(Task {
        scene_id: scene.scene_id.clone(),
        video_index,
        mode,
        t: if mode == TaskMode::Prediction { t } else { 0 },
        train_pairs,
        val_pairs,
    })
}

/// Sample N tasks from N distinct scenes chosen uniformly without
/// replacement.
pub fn sample_scene_batch(
    scenes: &[SceneDataset],
    n: usize,
    k: usize,
    t: usize,
    mode: TaskMode,
    rng_seed: u64,
) -> Result<Vec<Task>> {
    if n == 0 {
        return Err(Error::validation("N must be at least 1"));
    }
    if n > scenes.len() {
        return Err(Error::validation(format!(
            "cannot sample N={n} distinct scenes from {} available",
            scenes.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let chosen = rand::seq::index::sample(&mut rng, scenes.len(), n);
    chosen
        .iter()
        .map(|i| sample_task(&scenes[i], k, t, mode, rng.gen()))
        .collect()
}

/// Meta-test split of one video: the first K windows for adaptation, and
/// every later frame (index `K+t` onward, zero-based) as an evaluation
/// target, with labels when present. No adaptation frame is ever an
/// evaluation target.
pub struct AdaptationSet {
    pub adapt_pairs: Vec<WindowPair>,
    /// Zero-based index of the first evaluation target frame (= K + t).
    pub eval_start: usize,
    /// Labels for frames `eval_start..F`, when the video is labeled.
    pub eval_labels: Option<Vec<u8>>,
}

pub fn adaptation_set_from_prefix(video: &Video, k: usize, t: usize) -> Result<AdaptationSet> {
    let f = video.len();
    if k == 0 || t == 0 {
        return Err(Error::validation("K and t must be at least 1"));
    }
    if f < k + t + 1 {
        return Err(Error::validation(format!(
            "video {} has {f} frames, adaptation with K={k}, t={t} needs at least {}",
            video.video_id,
            k + t + 1
        )));
    }
    let adapt_pairs = (0..k).map(|j| WindowPair { start: j, target: j + t }).collect();
    let eval_start = k + t;
    let eval_labels = video.labels.as_ref().map(|l| l[eval_start..].to_vec());
    Ok(AdaptationSet {
        adapt_pairs,
        eval_start,
        eval_labels,
    })
}

fn stack_clip(video: &Video, start: usize, t: usize) -> Result<ClipTensor> {
    let (c, h, w) = video.frames[start].dim();
    let mut data = Array5::zeros((1, t, c, h, w));
    for (step, frame) in video.frames[start..start + t].iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(1), step)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(frame);
    }
    ClipTensor::new(data)
}

fn frame_tensor(video: &Video, idx: usize) -> Result<FrameTensor> {
    let (c, h, w) = video.frames[idx].dim();
    let mut data = Array4::zeros((1, c, h, w));
    data.index_axis_mut(ndarray::Axis(0), 0).assign(&video.frames[idx]);
    FrameTensor::new(data)
}

/// Materialize index pairs of one video into tensors. Reconstruction
/// pairs become length-1 clips whose target is the input frame.
pub fn materialize_pairs(
    video: &Video,
    pairs: &[WindowPair],
    t: usize,
    mode: TaskMode,
) -> Result<Vec<Pair>> {
    pairs
        .iter()
        .map(|p| {
            let (clip_t, clip_start) = match mode {
                TaskMode::Prediction => (t, p.start),
                TaskMode::Reconstruction => (1, p.start),
            };
            if p.target >= video.len() || clip_start + clip_t > video.len() {
                return Err(Error::validation(format!(
                    "window pair ({}, {}) out of range for video {} of length {}",
                    p.start,
                    p.target,
                    video.video_id,
                    video.len()
                )));
            }
            Ok(Pair {
                x: stack_clip(video, clip_start, clip_t)?,
                y: frame_tensor(video, p.target)?,
            })
        })
        .collect()
}

impl Task {
    /// Materialize this task's train and val pairs against its scene.
    pub fn materialize(&self, scene: &SceneDataset) -> Result<(Vec<Pair>, Vec<Pair>)> {
        if scene.scene_id != self.scene_id {
            return Err(Error::validation(format!(
                "task belongs to scene {}, got scene {}",
                self.scene_id, scene.scene_id
            )));
        }
        let video = scene.videos.get(self.video_index).ok_or_else(|| {
            Error::validation(format!(
                "task references video index {} of scene {} ({} videos)",
                self.video_index,
                self.scene_id,
                scene.videos.len()
            ))
        })?;
        let t = if self.mode == TaskMode::Prediction { self.t } else { 1 };
        Ok((
            materialize_pairs(video, &self.train_pairs, t, self.mode)?,
            materialize_pairs(video, &self.val_pairs, t, self.mode)?,
        ))
    }
}

// ---------------------------------------------------------------------------
// On-disk loading and preprocessing
// ---------------------------------------------------------------------------

/// Decode an image file, convert to the requested channel count (3 =
/// RGB with grayscale replicated, 1 = luminance), resize to
/// `size x size`, and map pixel values linearly to `[-1, 1]`.
pub fn load_frame(path: &Path, size: usize, channels: usize) -> Result<Frame> {
    if channels != 1 && channels != 3 {
        return Err(Error::validation(format!("unsupported channel count {channels}")));
    }
    let img = image::open(path)
        .map_err(|e| Error::validation(format!("decoding {}: {e}", path.display())))?;
    let rgb = image::imageops::resize(
        &img.to_rgb8(),
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut arr = Array3::zeros((channels, size, size));
    for (x, y, px) in rgb.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        let to_unit = |v: u8| v as f64 / 255.0 * 2.0 - 1.0;
        if channels == 3 {
            for c in 0..3 {
                arr[[c, y, x]] = to_unit(px.0[c]);
            }
        } else {
            let lum = 0.299 * px.0[0] as f64 + 0.587 * px.0[1] as f64 + 0.114 * px.0[2] as f64;
            arr[[0, y, x]] = lum / 255.0 * 2.0 - 1.0;
        }
    }
    Ok(Arc::new(arr))
}

fn read_labels(path: &Path, n_frames: usize) -> Result<Vec<u8>> {
    let text = std::fs::read_to_string(path)?;
    let labels: Vec<u8> = text
        .lines()
        .map(|l| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::validation(format!(
                "{}: label lines must be 0 or 1, got {other:?}",
                path.display()
            ))),
        })
        .collect::<Result<_>>()?;
    if labels.len() != n_frames {
        return Err(Error::shape(
            format!("label lines in {}", path.display()),
            n_frames,
            labels.len(),
        ));
    }
    Ok(labels)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn load_video_dir(dir: &Path, size: usize, channels: usize) -> Result<Video> {
    let mut frame_paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("frame_") && n.ends_with(".png"))
                    .unwrap_or(false)
        })
        .collect();
    frame_paths.sort();
    if frame_paths.is_empty() {
        return Err(Error::validation(format!(
            "video directory {} contains no frame_*.png files",
            dir.display()
        )));
    }
    let frames: Vec<Frame> = frame_paths
        .iter()
        .map(|p| load_frame(p, size, channels))
        .collect::<Result<_>>()?;
    let labels_path = dir.join("labels.txt");
    let labels = if labels_path.exists() {
        Some(read_labels(&labels_path, frames.len())?)
    } else {
        None
    };
    let video_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("video")
        .to_string();
    Video::new(video_id, frames, labels)
}

#[derive(Debug, Deserialize)]
struct ManifestVideo {
    video_id: String,
    dir: String,
}

#[derive(Debug, Deserialize)]
struct ManifestScene {
    scene_id: String,
    videos: Vec<ManifestVideo>,
}

#[derive(Debug, Deserialize)]
struct Manifest {
    scenes: Vec<ManifestScene>,
}

/// Load a dataset root. Layout: `root/<scene_id>/<video_id>/frame_%06d.png`
/// with optional per-video `labels.txt` (one 0/1 line per frame). If
/// `root/manifest.json` exists it overrides directory discovery with an
/// explicit scene/video list (paths relative to the root).
pub fn load_dataset(root: &Path, size: usize, channels: usize) -> Result<Vec<SceneDataset>> {
    if !root.is_dir() {
        return Err(Error::validation(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("manifest.json: {e}")))?;
        return manifest
            .scenes
            .into_iter()
            .map(|s| {
                let videos = s
                    .videos
                    .into_iter()
                    .map(|v| {
                        let mut video = load_video_dir(&root.join(&v.dir), size, channels)?;
                        video.video_id = v.video_id;
                        Ok(video)
                    })
                    .collect::<Result<_>>()?;
                Ok(SceneDataset {
                    scene_id: s.scene_id,
                    videos,
                })
            })
            .collect();
    }
    let mut scenes = Vec::new();
    for scene_dir in sorted_subdirs(root)? {
        let videos = sorted_subdirs(&scene_dir)?
            .iter()
            .map(|d| load_video_dir(d, size, channels))
            .collect::<Result<Vec<_>>>()?;
        if videos.is_empty() {
            continue;
        }
        scenes.push(SceneDataset {
            scene_id: scene_dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("scene")
                .to_string(),
            videos,
        });
    }
    if scenes.is_empty() {
        return Err(Error::validation(format!(
            "dataset root {} contains no scene directories",
            root.display()
        )));
    }
    Ok(scenes)
}
