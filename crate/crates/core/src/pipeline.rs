//! Experiment orchestration: pretrain -> meta-train -> adapt -> evaluate,
//! artifact layout under the output directory, and report assembly.

use crate::backbone::ModelConfig;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::episodes::{self, Pair, SceneDataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_scene, pooled_auc, score_video, EvalRecord, SceneEvaluation, ScoreMode,
};
use crate::metalearn::{self, PredictorModel};
use crate::types::ParamSet;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Exclusive hold on an output directory; created at stage start, removed
/// on drop. A second invocation sharing the directory fails fast.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::validation(format!(
                "output directory is locked by another invocation ({} exists)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

pub fn pretrain_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    out_path(cfg, "pretrain.ckpt")
}

pub fn metatrain_checkpoint_path(cfg: &RunConfig) -> PathBuf {
    out_path(cfg, "metatrain.ckpt")
}

pub fn results_path(cfg: &RunConfig) -> PathBuf {
    out_path(cfg, "results.jsonl")
}

fn load_scenes(cfg: &RunConfig, ids: &[String], what: &str) -> Result<Vec<SceneDataset>> {
    let root = cfg.resolved_dataset_root();
    let all = episodes::load_dataset(&root, cfg.frame_size, cfg.frame_channels)?;
    if ids.is_empty() {
        return Err(Error::validation(format!("{what} scene list is empty")));
    }
    ids.iter()
        .map(|id| {
            all.iter()
                .find(|s| &s.scene_id == id)
                .cloned()
                .ok_or_else(|| {
                    Error::validation(format!("scene {id:?} not found under {}", root.display()))
                })
        })
        .collect()
}

/// Restrict scenes to their normal-only (unlabeled) videos: training
/// stages model normality and must never see annotated anomaly footage.
fn normal_videos_only(scenes: Vec<SceneDataset>) -> Result<Vec<SceneDataset>> {
    scenes
        .into_iter()
        .map(|mut s| {
            s.videos.retain(|v| v.labels.is_none());
            if s.videos.is_empty() {
                return Err(Error::validation(format!(
                    "scene {} has no unlabeled training videos",
                    s.scene_id
                )));
            }
            Ok(s)
        })
        .collect()
}

fn jsonl_append(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value).expect("serializable record"))?;
    Ok(())
}

/// Stage 1: adversarial pre-training on the meta-train scenes. Writes
/// `pretrain.ckpt` and `pretrain_log.jsonl`.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(Path::new(&cfg.out_dir))?;
    let scenes = normal_videos_only(load_scenes(cfg, &cfg.train_scenes, "train")?)?;
    let model_cfg = cfg.model_config();
    let log_path = out_path(cfg, "pretrain_log.jsonl");
    let _ = std::fs::remove_file(&log_path);
    let mut log = |r: &metalearn::PretrainRecord| {
        let _ = jsonl_append(&log_path, r);
    };
    let (gen, disc) = metalearn::pretrain(&scenes, &model_cfg, &cfg.pretrain_config(), &mut log)?;
    let path = pretrain_checkpoint_path(cfg);
    Checkpoint {
        config: model_cfg,
        seed: cfg.seed,
        generator: gen,
        discriminator: Some(disc),
    }
    .save(&path)?;
    Ok(path)
}

/// Stage 2: meta-training from the pre-trained checkpoint. Writes
/// `metatrain.ckpt`, periodic `metatrain_latest.ckpt`, and
/// `metatrain_log.jsonl`. With zero iterations the output checkpoint
/// carries the pre-trained parameters unchanged.
pub fn run_metatrain(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(Path::new(&cfg.out_dir))?;
    let init = load_generator_checkpoint(&pretrain_checkpoint_path(cfg), &cfg.model_config())?;
    let scenes = normal_videos_only(load_scenes(cfg, &cfg.train_scenes, "train")?)?;
    let model_cfg = cfg.model_config();
    let model = PredictorModel {
        model: model_cfg.clone(),
        weights: cfg.weights(),
        mode: cfg.mode,
    };
    let log_path = out_path(cfg, "metatrain_log.jsonl");
    let _ = std::fs::remove_file(&log_path);
    let latest = out_path(cfg, "metatrain_latest.ckpt");
    let cadence = cfg.checkpoint_every.max(1);
    let seed = cfg.seed;
    let snapshot_cfg = model_cfg.clone();
    let mut log = |r: &metalearn::IterationRecord, theta: &ParamSet| {
        let _ = jsonl_append(&log_path, r);
        if (r.iteration + 1) % cadence == 0 {
            let _ = Checkpoint {
                config: snapshot_cfg.clone(),
                seed,
                generator: theta.clone(),
                discriminator: None,
            }
            .save(&latest);
        }
    };
    let theta = metalearn::meta_train(&model, &init, &scenes, model_cfg.t, &cfg.meta_config(), &mut log)?;
    let path = metatrain_checkpoint_path(cfg);
    Checkpoint {
        config: model_cfg,
        seed: cfg.seed,
        generator: theta,
        discriminator: None,
    }
    .save(&path)?;
    Ok(path)
}

fn load_generator_checkpoint(path: &Path, expect: &ModelConfig) -> Result<ParamSet> {
    if !path.exists() {
        return Err(Error::validation(format!(
            "missing checkpoint {}; run the earlier stage first",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(path)?;
    if &ckpt.config != expect {
        return Err(Error::validation(format!(
            "checkpoint {} was trained with a different model config",
            path.display()
        )));
    }
    Ok(ckpt.generator)
}

/// Evaluation methods of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    PreTrained,
    FineTuned,
    Ours,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::PreTrained => "Pre-trained",
            Method::FineTuned => "Fine-tuned",
            Method::Ours => "Ours",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "pre-trained" | "pretrained" => Ok(Method::PreTrained),
            "fine-tuned" | "finetuned" => Ok(Method::FineTuned),
            "ours" => Ok(Method::Ours),
            _ => Err(Error::validation(format!("unknown method {s:?}"))),
        }
    }
}

/// Evaluate a scene without any adaptation: every labeled video scored in
/// full. Independent of K by construction.
pub fn evaluate_scene_pretrained(
    model: &ModelConfig,
    params: &ParamSet,
    scene: &SceneDataset,
    mode: ScoreMode,
) -> Result<SceneEvaluation> {
    let labeled: Vec<&episodes::Video> = scene.videos.iter().filter(|v| v.labels.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::validation(format!(
            "scene {} has no labeled videos to evaluate",
            scene.scene_id
        )));
    }
    let series: Vec<_> = labeled
        .iter()
        .map(|v| score_video(model, params, v, 0, mode))
        .collect::<Result<_>>()?;
    let auc = pooled_auc(&series)?;
    Ok(SceneEvaluation {
        scene_id: scene.scene_id.clone(),
        auc,
        n_frames: series.iter().map(|s| s.scores.len()).sum(),
        n_anomalous: series
            .iter()
            .flat_map(|s| s.labels.as_ref().unwrap().iter())
            .filter(|&&l| l == 1)
            .count(),
        series,
    })
}

/// Evaluate every (method, K) cell over the meta-test scenes using
/// already-loaded parameter sets.
pub fn experiment_grid(
    model_cfg: &ModelConfig,
    cfg: &RunConfig,
    pre: &ParamSet,
    meta: Option<&ParamSet>,
    scenes: &[SceneDataset],
    k_values: &[usize],
    methods: &[Method],
) -> Result<Vec<EvalRecord>> {
    let predictor = PredictorModel {
        model: model_cfg.clone(),
        weights: cfg.weights(),
        mode: cfg.mode,
    };
    let mut records = Vec::new();
    for &method in methods {
        for &k in k_values {
            for scene in scenes {
                let eval = match method {
                    Method::PreTrained => {
                        evaluate_scene_pretrained(model_cfg, pre, scene, cfg.score_mode)?
                    }
                    Method::FineTuned => {
                        let adapt_fn = |p: &ParamSet, pairs: &[Pair]| {
                            metalearn::finetune_baseline(
                                &predictor,
                                p,
                                pairs,
                                cfg.finetune_steps,
                                cfg.finetune_lr,
                            )
                            .map(|(params, _)| params)
                        };
                        evaluate_scene(model_cfg, pre, scene, k, &adapt_fn, cfg.score_mode)?
                    }
                    Method::Ours => {
                        let theta = meta.ok_or_else(|| {
                            Error::validation(format!(
                                "missing checkpoint {}; meta-train before evaluating Ours",
                                metatrain_checkpoint_path(cfg).display()
                            ))
                        })?;
                        let adapt_fn = |p: &ParamSet, pairs: &[Pair]| {
                            metalearn::adapt(&predictor, p, pairs, cfg.alpha, cfg.inner_steps)
                        };
                        evaluate_scene(model_cfg, theta, scene, k, &adapt_fn, cfg.score_mode)?
                    }
                };
                records.push(EvalRecord {
                    method: method.name().to_string(),
                    k,
                    scene: eval.scene_id.clone(),
                    auc: eval.auc,
                    n_frames: eval.n_frames,
                    config_hash: cfg.hash(),
                });
            }
        }
    }
    Ok(records)
}

/// Stage 3: the full evaluation grid over checkpoints on disk. Appends to
/// `results.jsonl`.
pub fn run_experiment_grid(
    cfg: &RunConfig,
    k_values: &[usize],
    methods: &[Method],
) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(Path::new(&cfg.out_dir))?;
    let model_cfg = cfg.model_config();
    let pre = load_generator_checkpoint(&pretrain_checkpoint_path(cfg), &model_cfg)?;
    let meta = if methods.contains(&Method::Ours) {
        Some(load_generator_checkpoint(&metatrain_checkpoint_path(cfg), &model_cfg)?)
    } else {
        None
    };
    let scenes = load_scenes(cfg, &cfg.test_scenes, "test")?;
    let records = experiment_grid(&model_cfg, cfg, &pre, meta.as_ref(), &scenes, k_values, methods)?;
    let path = results_path(cfg);
    for r in &records {
        jsonl_append(&path, r)?;
    }
    Ok(records)
}

/// Adapt to one held-out scene and write the adapted checkpoint.
pub fn run_adapt(cfg: &RunConfig, scene_id: &str, k: usize) -> Result<PathBuf> {
    cfg.validate()?;
    let _lock = OutDirLock::acquire(Path::new(&cfg.out_dir))?;
    let model_cfg = cfg.model_config();
    let theta = load_generator_checkpoint(&metatrain_checkpoint_path(cfg), &model_cfg)?;
    let scenes = load_scenes(cfg, &[scene_id.to_string()], "adapt")?;
    let scene = &scenes[0];
    let video = scene
        .videos
        .first()
        .ok_or_else(|| Error::validation(format!("scene {scene_id} has no videos")))?;
    let set = episodes::adaptation_set_from_prefix(video, k, model_cfg.t)?;
    let pairs = episodes::materialize_pairs(video, &set.adapt_pairs, model_cfg.t, cfg.mode)?;
    let predictor = PredictorModel {
        model: model_cfg.clone(),
        weights: cfg.weights(),
        mode: cfg.mode,
    };
    let adapted = metalearn::adapt(&predictor, &theta, &pairs, cfg.alpha, cfg.inner_steps)?;
    let path = out_path(cfg, &format!("adapted_{scene_id}_k{k}.ckpt"));
    Checkpoint {
        config: model_cfg,
        seed: cfg.seed,
        generator: adapted,
        discriminator: None,
    }
    .save(&path)?;
    Ok(path)
}

/// Merge result records into the comparison table. Every record must
/// carry the same config hash; mixing runs is refused.
pub fn render_report(records: &[EvalRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::validation("no result records to report"));
    }
    let hash = &records[0].config_hash;
    if let Some(bad) = records.iter().find(|r| &r.config_hash != hash) {
        return Err(Error::validation(format!(
            "refusing to merge results with mismatched config hashes {} vs {}",
            hash, bad.config_hash
        )));
    }
    let mut ks: Vec<usize> = records.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut methods: Vec<&str> = records.iter().map(|r| r.method.as_str()).collect();
    methods.sort_by_key(|m| match *m {
        "Pre-trained" => 0,
        "Fine-tuned" => 1,
        _ => 2,
    });
    methods.dedup();

    let mut out = String::new();
    out.push_str(&format!("config {hash}\n"));
    out.push_str("method       ");
    for k in &ks {
        out.push_str(&format!("  K={k:<7}"));
    }
    out.push('\n');
    for m in &methods {
        out.push_str(&format!("{m:<13}"));
        for k in &ks {
            let cells: Vec<f64> = records
                .iter()
                .filter(|r| r.method == *m && r.k == *k)
                .map(|r| r.auc)
                .collect();
            if cells.is_empty() {
                out.push_str("         -");
            } else {
                let mean = cells.iter().sum::<f64>() / cells.len() as f64;
                out.push_str(&format!("  {mean:<8.4}"));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Read `results.jsonl` and write `report.txt`.
pub fn run_report(cfg: &RunConfig) -> Result<PathBuf> {
    let path = results_path(cfg);
    if !path.exists() {
        return Err(Error::validation(format!(
            "missing results file {}; run eval first",
            path.display()
        )));
    }
    let text = std::fs::read_to_string(&path)?;
    let records: Vec<EvalRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::validation(format!("results.jsonl: {e}"))))
        .collect::<Result<_>>()?;
    let report = render_report(&records)?;
    let out = out_path(cfg, "report.txt");
    std::fs::write(&out, report)?;
    Ok(out)
}

/// Generate the default synthetic corpus under `out`: `scenes` scenes,
/// each with normal training videos and one labeled test video.
pub fn run_synth_gen(
    scenes: usize,
    out: &Path,
    seed: u64,
    resolution: usize,
    frames: usize,
) -> Result<()> {
    if scenes == 0 {
        return Err(Error::validation("need at least one scene"));
    }
    let specs = crate::synth::default_specs(scenes, seed, resolution, frames);
    crate::synth::generate_synthetic_corpus(&specs, out)
}
