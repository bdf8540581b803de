//! Deterministic synthetic video corpus: per-scene scrolling backgrounds
//! with a bouncing sprite, plus labeled anomaly injectors for test videos.
//!
//! The scene identity (background texture, scroll velocity, sprite look
//! and speed) is latent: it cannot be recovered from a single frame, so a
//! model must adapt to a new scene before it can predict frame t+1 well.

use crate::episodes::{SceneDataset, Video};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

/// Anomaly injectors available for test videos.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InjectorKind {
    /// Multiply the sprite's velocity while active.
    VelocityMultiplier { factor: f64 },
    /// Add a second, differently shaped sprite while active.
    NovelSprite,
}

/// A labeled anomaly interval: frames `onset..onset+duration` are active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Injector {
    pub kind: InjectorKind,
    pub onset: usize,
    pub duration: usize,
}

impl Injector {
    pub fn active(&self, frame: usize) -> bool {
        frame >= self.onset && frame < self.onset + self.duration
    }
}

/// Specification of one synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSceneSpec {
    pub scene_id: String,
    pub seed: u64,
    pub resolution: usize,
    pub video_len: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub sprite_size: usize,
    /// Applied to every test video; train videos are always normal.
    pub injectors: Vec<Injector>,
}

impl SynthSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::validation("resolution must be at least 16"));
        }
        if self.video_len < 2 {
            return Err(Error::validation("video_len must be at least 2"));
        }
        if self.sprite_size < 2 || self.sprite_size * 3 > self.resolution {
            return Err(Error::validation("sprite_size must fit the frame"));
        }
        for inj in &self.injectors {
            if inj.duration == 0 {
                return Err(Error::validation("injector duration must be positive"));
            }
            if inj.onset + inj.duration > self.video_len {
                return Err(Error::validation(format!(
                    "injector interval {}..{} exceeds video length {}",
                    inj.onset,
                    inj.onset + inj.duration,
                    self.video_len
                )));
            }
        }
        Ok(())
    }
}

/// Latent dynamics of one scene, drawn once from the scene seed.
struct SceneLatent {
    /// Background intensity field, indexed modulo its size.
    texture: Array2<f64>,
    /// Background scroll in pixels per frame.
    scroll: (i64, i64),
    /// Sprite speed in pixels per frame (direction varies per video).
    sprite_speed: f64,
    sprite_value: f64,
}

impl SceneLatent {
    fn from_seed(seed: u64, resolution: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = resolution;
        // Smooth texture: a few random sinusoids, normalized to [-0.8, 0.2]
        // so the bright sprite always stands out.
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.gen_range(1.0..3.0_f64).round(),
                    rng.gen_range(1.0..3.0_f64).round(),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.4..1.0),
                )
            })
            .collect();
        let mut texture = Array2::zeros((n, n));
        for y in 0..n {
            for x in 0..n {
                let mut v = 0.0;
                for &(fx, fy, phase, amp) in &waves {
                    v += amp
                        * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) / n as f64 + phase)
                            .sin();
                }
                texture[[y, x]] = v;
            }
        }
        let max = texture.iter().fold(f64::MIN, |a, &b| a.max(b));
        let min = texture.iter().fold(f64::MAX, |a, &b| a.min(b));
        texture.map_inplace(|v| *v = (*v - min) / (max - min) - 0.8);

        let mut axis_vel = || -> i64 {
            let v = rng.gen_range(1..=3i64);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        };
        let scroll = (axis_vel(), axis_vel());
        let sprite_speed = rng.gen_range(1.0..2.5);
        let sprite_value = rng.gen_range(0.7..1.0);
        Self {
            texture,
            scroll,
            sprite_speed,
            sprite_value,
        }
    }
}

fn draw_square(frame: &mut Array2<f64>, cx: f64, cy: f64, size: usize, value: f64) {
    let n = frame.dim().0 as i64;
    let half = size as i64 / 2;
    let (cx, cy) = (cx.round() as i64, cy.round() as i64);
    for dy in -half..=half {
        for dx in -half..=half {
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && y >= 0 && x < n && y < n {
                frame[[y as usize, x as usize]] = value;
            }
        }
    }
}

fn draw_cross(frame: &mut Array2<f64>, cx: f64, cy: f64, size: usize, value: f64) {
    let n = frame.dim().0 as i64;
    let half = size as i64 / 2;
    let (cx, cy) = (cx.round() as i64, cy.round() as i64);
    for d in -half..=half {
        for (x, y) in [(cx + d, cy), (cx, cy + d)] {
            if x >= 0 && y >= 0 && x < n && y < n {
                frame[[y as usize, x as usize]] = value;
            }
        }
    }
}

struct Bouncer {
    pos: (f64, f64),
    vel: (f64, f64),
    lo: f64,
    hi: f64,
}

impl Bouncer {
    fn step(&mut self, scale: f64) {
        for axis in 0..2 {
            let (p, v) = match axis {
                0 => (&mut self.pos.0, &mut self.vel.0),
                _ => (&mut self.pos.1, &mut self.vel.1),
            };
            *p += *v * scale;
            if *p < self.lo {
                *p = 2.0 * self.lo - *p;
                *v = -*v;
            }
            if *p > self.hi {
                *p = 2.0 * self.hi - *p;
                *v = -*v;
            }
        }
    }
}

/// Rendered video: grayscale frames in [-1, 1] plus per-frame labels.
pub struct RenderedVideo {
    pub frames: Vec<Array2<f64>>,
    pub labels: Vec<u8>,
}

/// Render one video of a scene. `video_seed` varies the sprite's start
/// position and heading; the scene latent fixes everything else.
/// Injectors are only applied when `with_anomalies` is set.
pub fn render_video(
    spec: &SynthSceneSpec,
    video_seed: u64,
    with_anomalies: bool,
) -> Result<RenderedVideo> {
    spec.validate()?;
    let latent = SceneLatent::from_seed(spec.seed, spec.resolution);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ video_seed.rotate_left(17));
    let n = spec.resolution;
    let margin = spec.sprite_size as f64;
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut sprite = Bouncer {
        pos: (
            rng.gen_range(margin..n as f64 - margin),
            rng.gen_range(margin..n as f64 - margin),
        ),
        vel: (
            latent.sprite_speed * heading.cos(),
            latent.sprite_speed * heading.sin(),
        ),
        lo: margin,
        hi: n as f64 - margin,
    };
    let novel_heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut novel = Bouncer {
        pos: (
            rng.gen_range(margin..n as f64 - margin),
            rng.gen_range(margin..n as f64 - margin),
        ),
        vel: (
            2.0 * latent.sprite_speed * novel_heading.cos(),
            2.0 * latent.sprite_speed * novel_heading.sin(),
        ),
        lo: margin,
        hi: n as f64 - margin,
    };

    let injectors: &[Injector] = if with_anomalies { &spec.injectors } else { &[] };
    let mut frames = Vec::with_capacity(spec.video_len);
    let mut labels = Vec::with_capacity(spec.video_len);
    for k in 0..spec.video_len {
        let mut frame = Array2::zeros((n, n));
        let ni = n as i64;
        for y in 0..n {
            for x in 0..n {
                let sx = (x as i64 + k as i64 * latent.scroll.0).rem_euclid(ni) as usize;
                let sy = (y as i64 + k as i64 * latent.scroll.1).rem_euclid(ni) as usize;
                frame[[y, x]] = latent.texture[[sy, sx]];
            }
        }
        draw_square(&mut frame, sprite.pos.0, sprite.pos.1, spec.sprite_size, latent.sprite_value);
        let mut label = 0u8;
        let mut speed_scale = 1.0;
        for inj in injectors {
            if !inj.active(k) {
                continue;
            }
            label = 1;
            match inj.kind {
                InjectorKind::VelocityMultiplier { factor } => speed_scale *= factor,
                InjectorKind::NovelSprite => {
                    // Same brightness as the resident sprite: the novelty
                    // is the shape and the extra motion, not a stark
                    // intensity outlier.
                    draw_cross(
                        &mut frame,
                        novel.pos.0,
                        novel.pos.1,
                        spec.sprite_size,
                        latent.sprite_value,
                    );
                    novel.step(1.0);
                }
            }
        }
        frames.push(frame);
        labels.push(label);
        sprite.step(speed_scale);
    }
    Ok(RenderedVideo { frames, labels })
}

fn frame_to_png_bytes(frame: &Array2<f64>) -> Vec<u8> {
    let n = frame.dim().0;
    let mut img = image::GrayImage::new(n as u32, n as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = frame[[y as usize, x as usize]].clamp(-1.0, 1.0);
        px.0[0] = ((v + 1.0) / 2.0 * 255.0).round() as u8;
    }
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(img.as_raw(), n as u32, n as u32, image::ExtendedColorType::L8)
        .expect("in-memory png encode");
    bytes
}

use image::ImageEncoder;

fn write_video(dir: &Path, video: &RenderedVideo, write_labels: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in video.frames.iter().enumerate() {
        let path = dir.join(format!("frame_{i:06}.png"));
        std::fs::write(&path, frame_to_png_bytes(frame))?;
    }
    if write_labels {
        let mut text = String::with_capacity(video.labels.len() * 2);
        for &l in &video.labels {
            text.push(if l == 1 { '1' } else { '0' });
            text.push('\n');
        }
        std::fs::write(dir.join("labels.txt"), text)?;
    }
    Ok(())
}

/// Render a full corpus to `root` in the dataset directory layout: per
/// scene, `train_%02d` videos (normal, unlabeled) and `test_%02d` videos
/// (injectors applied, labels.txt written). Deterministic given the specs.
pub fn generate_synthetic_corpus(specs: &[SynthSceneSpec], root: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    for spec in specs {
        spec.validate()?;
        if !seen.insert(spec.scene_id.clone()) {
            return Err(Error::validation(format!(
                "duplicate scene id {}",
                spec.scene_id
            )));
        }
    }
    for spec in specs {
        let scene_dir = root.join(&spec.scene_id);
        for v in 0..spec.train_videos {
            let video = render_video(spec, v as u64, false)?;
            write_video(&scene_dir.join(format!("train_{v:02}")), &video, false)?;
        }
        for v in 0..spec.test_videos {
            let video = render_video(spec, 1000 + v as u64, true)?;
            write_video(&scene_dir.join(format!("test_{v:02}")), &video, true)?;
        }
    }
    Ok(())
}

/// Render a corpus directly to in-memory scenes (no PNG round trip),
/// matching `generate_synthetic_corpus` up to 8-bit quantization.
pub fn render_corpus(specs: &[SynthSceneSpec], channels: usize) -> Result<Vec<SceneDataset>> {
    specs
        .iter()
        .map(|spec| {
            let mut videos = Vec::new();
            for v in 0..spec.train_videos {
                let r = render_video(spec, v as u64, false)?;
                videos.push(to_video(format!("train_{v:02}"), r, false, channels)?);
            }
            for v in 0..spec.test_videos {
                let r = render_video(spec, 1000 + v as u64, true)?;
                videos.push(to_video(format!("test_{v:02}"), r, true, channels)?);
            }
            Ok(SceneDataset {
                scene_id: spec.scene_id.clone(),
                videos,
            })
        })
        .collect()
}

fn to_video(id: String, r: RenderedVideo, labeled: bool, channels: usize) -> Result<Video> {
    let frames = r
        .frames
        .iter()
        .map(|f| {
            let (h, w) = f.dim();
            let mut arr = Array3::zeros((channels, h, w));
            for c in 0..channels {
                arr.index_axis_mut(ndarray::Axis(0), c).assign(f);
            }
            Arc::new(arr)
        })
        .collect();
    Video::new(id, frames, if labeled { Some(r.labels) } else { None })
}

/// Default desk-scale corpus: `n_scenes` scenes with staggered anomaly
/// intervals, alternating both injector kinds across scenes.
pub fn default_specs(n_scenes: usize, base_seed: u64, resolution: usize, video_len: usize) -> Vec<SynthSceneSpec> {
    (0..n_scenes)
        .map(|i| {
            let onset = video_len / 2;
            let duration = video_len / 4;
            let kind = if i % 2 == 0 {
                InjectorKind::VelocityMultiplier { factor: 2.0 }
            } else {
                InjectorKind::NovelSprite
            };
            SynthSceneSpec {
                scene_id: format!("scene_{i:02}"),
                seed: base_seed.wrapping_add(i as u64 * 7919),
                resolution,
                video_len,
                train_videos: 2,
                test_videos: 1,
                sprite_size: resolution / 8,
                injectors: vec![Injector { kind, onset, duration }],
            }
        })
        .collect()
}
