//! End-to-end tests spawning the real `hmil` binary: exit codes, artifact
//! layout, collision safety, and byte-level determinism.

use hmil_cli::run::RunManifest;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmil"))
        .args(args)
        .output()
        .expect("spawn hmil")
}

fn stdout_map(out: &Output) -> HashMap<String, String> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const GEN_SMOKE: &str = "profile=micro\nn_slides=10\ngrid_w=32\ngrid_h=32\npatch_px=8\n";

const TRAIN_SMOKE: &str = "arch=baseline\nembed_dim=8\nheads=2\npatch_px=8\n\
sampler=global\nbag_patches=16\nepochs=2\nlr=1e-3\nbatch_size=2\n";

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn gen_dataset(root: &Path) -> PathBuf {
    let cfg = root.join("gen.kv");
    write(&cfg, GEN_SMOKE);
    let data = root.join("data");
    let out = hmil(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    assert_code(&out, 0);
    data
}

#[test]
fn generate_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.kv");
    write(&cfg, GEN_SMOKE);
    let run = |out_name: &str, seed: &str| {
        let out = hmil(&[
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(out_name).to_str().unwrap(),
            "--seed",
            seed,
        ]);
        assert_code(&out, 0);
        let kv = stdout_map(&out);
        assert!(Path::new(&kv["manifest"]).exists());
        kv["dataset_sha256"].clone()
    };
    let a = run("a", "7");
    let b = run("b", "7");
    let c = run("c", "8");
    assert_eq!(a, b, "same seed must produce the same dataset");
    assert_ne!(a, c, "different seed must change the dataset");
}

#[test]
fn generate_missing_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.kv");
    write(&cfg, "profile=micro\n");
    let out = hmil(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("`n_slides`"), "stderr: {err}");
}

#[test]
fn train_evaluate_pipeline_with_collisions_and_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path());
    let cfg = dir.path().join("train.kv");
    write(&cfg, TRAIN_SMOKE);
    let runs = dir.path().join("runs");

    // train once: exit 0, artifacts listed on stdout and hashed in run.manifest
    let t0 = std::time::Instant::now();
    let out = hmil(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert_code(&out, 0);
    assert!(t0.elapsed().as_secs() < 60, "smoke train exceeded 60 s");
    let kv = stdout_map(&out);
    let run_dir = PathBuf::from(&kv["run_dir"]);
    let checkpoint = PathBuf::from(&kv["checkpoint"]);
    assert!(checkpoint.exists());
    assert!(PathBuf::from(&kv["metrics"]).exists());
    let manifest = RunManifest::load(&run_dir).unwrap();
    manifest.verify(&run_dir).unwrap();
    assert_eq!(manifest.seed, 5);
    assert_eq!(manifest.artifacts.len(), 4);

    // rerun with the same config+seed: collision, nothing overwritten
    let out = hmil(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert_code(&out, 5);
    manifest.verify(&run_dir).unwrap();

    // evaluate with the top pass and heatmaps
    let eval_out = dir.path().join("eval");
    let out = hmil(&[
        "evaluate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        eval_out.to_str().unwrap(),
        "--top",
        "--heatmaps",
    ]);
    assert_code(&out, 0);
    let ekv = stdout_map(&out);
    let report = std::fs::read_to_string(&ekv["report"]).unwrap();
    assert!(report.starts_with("slide_id,label,prob_all,prob_top,n_high,n_low\n"));
    let n_slides: usize = ekv["n_slides"].parse().unwrap();
    assert_eq!(report.lines().count(), n_slides + 1);
    let pgms = std::fs::read_dir(&ekv["heatmap_dir"])
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().map(|x| x == "pgm") == Some(true)
        })
        .count();
    assert_eq!(pgms, n_slides, "one .pgm per slide");
    let _auc: f64 = ekv["auc_all"].parse().unwrap();
    let _auc_top: f64 = ekv["auc_top"].parse().unwrap();

    // determinism: a second evaluation writes byte-identical report.csv
    let eval_out2 = dir.path().join("eval2");
    let out = hmil(&[
        "evaluate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "test",
        "--out",
        eval_out2.to_str().unwrap(),
        "--top",
    ]);
    assert_code(&out, 0);
    let report2 = std::fs::read_to_string(eval_out2.join("report.csv")).unwrap();
    assert_eq!(report, report2);

    // a config that disagrees with the checkpoint: exit 6
    let wrong = dir.path().join("wrong.kv");
    write(
        &wrong,
        "arch=baseline\nembed_dim=16\nheads=2\npatch_px=8\n",
    );
    let out = hmil(&[
        "evaluate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        wrong.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("eval3").to_str().unwrap(),
    ]);
    assert_code(&out, 6);

    // bad split name: exit 2
    let out = hmil(&[
        "evaluate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "holdout",
        "--out",
        dir.path().join("eval4").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}

#[test]
fn seed_sweep_writes_summary_whose_mean_checks_out() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path());
    let cfg = dir.path().join("train.kv");
    write(&cfg, TRAIN_SMOKE);
    let runs = dir.path().join("runs");
    let out = hmil(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        runs.to_str().unwrap(),
        "--seeds",
        "1,2",
    ]);
    assert_code(&out, 0);
    let kv = stdout_map(&out);
    let summary = std::fs::read_to_string(&kv["summary"]).unwrap();
    let mut per_seed = Vec::new();
    let mut mean_row = None;
    for line in summary.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        match cells[0] {
            "mean" => mean_row = Some(cells[3].parse::<f64>().unwrap()),
            "sd" | "best" => {}
            _ => per_seed.push(cells[3].parse::<f64>().unwrap()),
        }
    }
    assert_eq!(per_seed.len(), 2);
    let hand = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let mean = mean_row.expect("summary has a mean row");
    assert!((mean - hand).abs() < 1e-11, "mean {mean} vs hand {hand}");
}

#[test]
fn runaway_training_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(dir.path());
    let cfg = dir.path().join("explode.kv");
    write(
        &cfg,
        "arch=baseline\nembed_dim=8\nheads=2\npatch_px=8\n\
         sampler=global\nbag_patches=16\nepochs=2\nlr=1e160\nweight_decay=0\n",
    );
    let out = hmil(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("runs").to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_code(&out, 4);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epoch"), "stderr should give step context: {err}");
}

#[test]
fn coverage_full_grid_roi_is_certain_for_every_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cov.kv");
    write(
        &cfg,
        "grid_w=16\ngrid_h=16\nroi_x=0\nroi_y=0\nroi_w=16\nroi_h=16\n\
         global_n=16\nhier_s=2\nhier_levels=2\nhier_patches_per_leaf=4\n\
         hier_children_per_level=2\nhier_n_top=1\n",
    );
    let out = hmil(&[
        "coverage",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("cov").to_str().unwrap(),
        "--trials",
        "300",
    ]);
    assert_code(&out, 0);
    let kv = stdout_map(&out);
    let csv = std::fs::read_to_string(&kv["coverage"]).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let p: f64 = cells[2].parse().unwrap();
        assert_eq!(p, 1.0, "strategy {} should always hit a full-grid ROI", cells[0]);
        rows += 1;
    }
    assert_eq!(rows, 3); // global, global_closed_form, hierarchical
}

#[test]
fn coverage_stderr_shrinks_with_trials() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cov.kv");
    write(
        &cfg,
        "grid_w=16\ngrid_h=16\nroi_x=9\nroi_y=4\nroi_w=1\nroi_h=1\nglobal_n=32\n",
    );
    let run = |trials: &str, out_name: &str| -> f64 {
        let out = hmil(&[
            "coverage",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.path().join(out_name).to_str().unwrap(),
            "--trials",
            trials,
        ]);
        assert_code(&out, 0);
        let csv = std::fs::read_to_string(stdout_map(&out)["coverage"].clone()).unwrap();
        let row = csv.lines().nth(1).unwrap();
        row.split(',').nth(3).unwrap().parse().unwrap()
    };
    let se_small = run("400", "a");
    let se_big = run("6400", "b");
    let ratio = se_small / se_big;
    assert!(
        (3.0..5.0).contains(&ratio),
        "stderr should shrink ~4x for 16x the trials, got {ratio}"
    );
}
