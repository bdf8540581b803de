//! Configuration format, orchestration stages, lock file, experiment grid,
//! and end-to-end determinism.

use metascene::checkpoint::Checkpoint;
use metascene::config::RunConfig;
use metascene::error::Error;
use metascene::pipeline::{
    self, render_report, run_experiment_grid, run_metatrain, run_pretrain, Method, OutDirLock,
};
use metascene::synth;
use std::path::Path;
use std::process::Command;

// ---------------------------------------------------------------- config

#[test]
fn config_round_trips_through_text() {
    let mut cfg = RunConfig::default();
    cfg.train_scenes = vec!["scene_00".into(), "scene_01".into()];
    cfg.test_scenes = vec!["scene_02".into()];
    cfg.alpha = 5e-3;
    cfg.k_grid = vec![1, 2, 10];
    cfg.second_order = false;
    let text = cfg.to_text();
    let back = RunConfig::parse(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_text(), text);
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn config_rejects_unknown_key() {
    let err = RunConfig::parse("frobnicate = 3\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(err.to_string().contains("frobnicate"));
}

#[test]
fn config_rejects_duplicate_key() {
    let err = RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
    assert!(err.to_string().contains("duplicate"), "{err}");
}

#[test]
fn config_rejects_overlapping_scene_splits() {
    let err = RunConfig::parse("train_scenes = a,b\ntest_scenes = b,c\n").unwrap_err();
    assert!(err.to_string().contains('b'), "{err}");
}

#[test]
fn config_hash_changes_with_values() {
    let a = RunConfig::default();
    let mut b = RunConfig::default();
    b.seed = 1;
    assert_ne!(a.hash(), b.hash());
}

#[test]
fn config_env_var_overrides_dataset_root() {
    // Set and unset within one test to avoid cross-test interference.
    let cfg = RunConfig::default();
    std::env::set_var(metascene::config::DATASET_ROOT_ENV, "/tmp/elsewhere");
    let resolved = cfg.resolved_dataset_root();
    std::env::remove_var(metascene::config::DATASET_ROOT_ENV);
    assert_eq!(resolved, Path::new("/tmp/elsewhere"));
    assert_eq!(cfg.resolved_dataset_root(), Path::new("data"));
}

// ------------------------------------------------------------------ lock

#[test]
fn out_dir_lock_excludes_second_holder_until_released() {
    let dir = tempfile::tempdir().unwrap();
    let lock = OutDirLock::acquire(dir.path()).unwrap();
    let second = OutDirLock::acquire(dir.path());
    match second {
        Err(e) => assert!(e.to_string().contains("locked"), "{e}"),
        Ok(_) => panic!("second lock acquisition must fail"),
    }
    drop(lock);
    OutDirLock::acquire(dir.path()).unwrap();
}

// ------------------------------------------------------------- synth-gen

#[test]
fn synth_gen_writes_scene_directories_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    pipeline::run_synth_gen(3, dir.path(), 0, 16, 24).unwrap();
    for i in 0..3 {
        let scene = dir.path().join(format!("scene_{i:02}"));
        assert!(scene.join("train_00").join("frame_000000.png").exists());
        assert!(scene.join("train_01").is_dir());
        assert!(!scene.join("train_00").join("labels.txt").exists());
        let labels = std::fs::read_to_string(scene.join("test_00").join("labels.txt")).unwrap();
        let labels: Vec<u8> = labels.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(labels.len(), 24);
        assert!(labels.iter().any(|&l| l == 1));
        assert!(labels.iter().any(|&l| l == 0));
    }
}

// ------------------------------------------------ stage plumbing helpers

/// A deliberately tiny setting so the full pipeline runs in seconds.
fn tiny_run_config(dataset_root: &Path, out_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset_root = dataset_root.to_string_lossy().into_owned();
    cfg.out_dir = out_dir.to_string_lossy().into_owned();
    cfg.train_scenes = vec!["scene_00".into(), "scene_01".into()];
    cfg.test_scenes = vec!["scene_02".into()];
    cfg.frame_size = 16;
    cfg.frame_channels = 1;
    cfg.t = 2;
    cfg.unet_depth = 1;
    cfg.unet_base = 2;
    cfg.lstm_hidden = 2;
    cfg.disc_blocks = 1;
    cfg.disc_base = 2;
    cfg.alpha = 1e-3;
    cfg.beta = 1e-3;
    cfg.n_tasks = 1;
    cfg.k = 2;
    cfg.inner_steps = 1;
    cfg.iterations = 2;
    cfg.pretrain_steps = 3;
    cfg.pretrain_batch = 2;
    cfg.finetune_steps = 2;
    cfg.finetune_lr = 1e-3;
    cfg.checkpoint_every = 1;
    cfg.k_grid = vec![1, 2];
    cfg.validate().unwrap();
    cfg
}

fn tiny_dataset(root: &Path) {
    let specs = synth::default_specs(3, 0, 16, 30);
    synth::generate_synthetic_corpus(&specs, root).unwrap();
}

#[test]
fn stages_write_checkpoints_and_zero_iterations_is_identity() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let mut cfg = tiny_run_config(data.path(), out.path());
    cfg.iterations = 0;

    let pre_path = run_pretrain(&cfg).unwrap();
    let pre = Checkpoint::load(&pre_path).unwrap();
    assert!(pre.discriminator.is_some());
    assert!(out.path().join("pretrain_log.jsonl").exists());

    let meta_path = run_metatrain(&cfg).unwrap();
    let meta = Checkpoint::load(&meta_path).unwrap();
    assert_eq!(meta.config, pre.config);
    assert_eq!(
        pre.generator.max_abs_diff(&meta.generator),
        0.0,
        "zero meta-iterations must leave the pre-trained parameters unchanged"
    );
}

#[test]
fn metatrain_without_pretrain_names_the_missing_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let cfg = tiny_run_config(data.path(), out.path());
    let err = run_metatrain(&cfg).unwrap_err();
    assert!(err.to_string().contains("pretrain.ckpt"), "{err}");
}

#[test]
fn eval_without_metatrain_names_the_missing_checkpoint() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let cfg = tiny_run_config(data.path(), out.path());
    run_pretrain(&cfg).unwrap();
    let err = run_experiment_grid(&cfg, &[1], &[Method::Ours]).unwrap_err();
    assert!(err.to_string().contains("metatrain.ckpt"), "{err}");
}

#[test]
fn grid_covers_every_method_k_cell_and_pretrained_is_constant_in_k() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let cfg = tiny_run_config(data.path(), out.path());
    run_pretrain(&cfg).unwrap();
    run_metatrain(&cfg).unwrap();
    let methods = [Method::PreTrained, Method::FineTuned, Method::Ours];
    let k_values = [1, 2, 3];
    let records = run_experiment_grid(&cfg, &k_values, &methods).unwrap();
    // 3 methods x 3 K x 1 test scene.
    assert_eq!(records.len(), 9);
    for m in &methods {
        for k in &k_values {
            assert_eq!(
                records
                    .iter()
                    .filter(|r| r.method == m.name() && r.k == *k)
                    .count(),
                1
            );
        }
    }
    let pre: Vec<f64> = records
        .iter()
        .filter(|r| r.method == "Pre-trained")
        .map(|r| r.auc)
        .collect();
    assert_eq!(pre.len(), 3);
    assert!(pre.iter().all(|&a| a == pre[0]), "Pre-trained must not depend on K: {pre:?}");
    assert!(out.path().join("results.jsonl").exists());
    // Periodic checkpointing left the rolling snapshot behind.
    assert!(out.path().join("metatrain_latest.ckpt").exists());
}

#[test]
fn report_refuses_mismatched_config_hashes() {
    use metascene::evaluation::EvalRecord;
    let rec = |hash: &str| EvalRecord {
        method: "Ours".into(),
        k: 1,
        scene: "s".into(),
        auc: 0.5,
        n_frames: 10,
        config_hash: hash.into(),
    };
    let err = render_report(&[rec("aaaa"), rec("bbbb")]).unwrap_err();
    assert!(err.to_string().contains("mismatched config hashes"), "{err}");
    let ok = render_report(&[rec("aaaa"), rec("aaaa")]).unwrap();
    assert!(ok.contains("Ours"));
    assert!(ok.contains("aaaa"));
}

#[test]
fn full_pipeline_report_is_byte_identical_across_runs() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let run = || {
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(data.path(), out.path());
        run_pretrain(&cfg).unwrap();
        run_metatrain(&cfg).unwrap();
        run_experiment_grid(&cfg, &cfg.k_grid, &[Method::PreTrained, Method::FineTuned, Method::Ours])
            .unwrap();
        let report = pipeline::run_report(&cfg).unwrap();
        let results = std::fs::read(out.path().join("results.jsonl")).unwrap();
        (std::fs::read(report).unwrap(), results)
    };
    let (report_a, results_a) = run();
    let (report_b, results_b) = run();
    assert_eq!(results_a, results_b, "results.jsonl must be deterministic");
    assert_eq!(report_a, report_b, "report.txt must be deterministic");
    assert!(!report_a.is_empty());
}

// ------------------------------------------------------------------- CLI

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metascene"))
}

#[test]
fn cli_unknown_config_key_exits_2() {
    let out = bin().args(["pretrain", "--set", "nope=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn cli_missing_checkpoint_exits_1() {
    let data = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    tiny_dataset(data.path());
    let cfg = tiny_run_config(data.path(), out_dir.path());
    let cfg_path = out_dir.path().join("run.cfg");
    std::fs::write(&cfg_path, cfg.to_text()).unwrap();
    let out = bin()
        .args(["eval", "--config", cfg_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretrain.ckpt"));
}

#[test]
fn cli_synth_gen_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "synth-gen",
            "--scenes",
            "2",
            "--out",
            dir.path().to_str().unwrap(),
            "--resolution",
            "16",
            "--frames",
            "20",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("scene_00").join("test_00").join("labels.txt").exists());
    assert!(dir.path().join("scene_01").join("train_01").is_dir());
}
