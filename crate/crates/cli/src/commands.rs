//! The four subcommands. Each prints `key=value` lines on stdout naming the
//! files it wrote; human-readable errors go to stderr via `main`.

use crate::config::{coverage_config, gen_config, model_config, train_config, Config};
use crate::errors::CliError;
use crate::run::{dataset_sha256, file_sha256, run_id, sha256_hex, unix_now, RunManifest};
use hmil_core::eval::{
    auc, evaluate_slides, export_heatmap, extremity_stat, infer_full, load_split,
    write_report_csv,
};
use hmil_core::model::{ModelConfig, ParamSet};
use hmil_core::sampling::{estimate_roi_coverage, global_coverage_closed_form, Mask};
use hmil_core::synthwsi::{generate_dataset, load_manifest, SlideGrid, Split};
use hmil_core::tensor::checkpoint::{load_checkpoint, save_checkpoint};
use hmil_core::train::{train, write_metrics_csv};
use hmil_core::Tensor;
use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

/// Parallelism cap from `HMIL_THREADS` (default 1). Only independent
/// same-sweep seeds run concurrently; each run is single-threaded.
pub fn hmil_threads() -> usize {
    std::env::var("HMIL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn cmd_generate(config: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let kv = Config::load(config)?;
    let gcfg = gen_config(&kv)?;
    fs::create_dir_all(out).map_err(|e| CliError::io("create_dir", out, e))?;
    let (_, infos) = generate_dataset(&gcfg, seed, out)?;
    let hash = dataset_sha256(out)?;
    println!("dataset_dir={}", out.display());
    println!("manifest={}", out.join("manifest.csv").display());
    println!("n_slides={}", infos.len());
    println!("dataset_sha256={hash}");
    Ok(())
}

/// Everything one finished training run reports back to the sweep driver.
struct SeedResult {
    seed: u64,
    run_id: String,
    best_epoch: usize,
    best_val_auc: f64,
    stdout: Vec<String>,
}

fn train_one(
    cfg_text: &str,
    cfg_path: &Path,
    dataset_hash: &str,
    train_slides: &[SlideGrid],
    val_slides: &[SlideGrid],
    out_root: &Path,
    seed: u64,
) -> Result<SeedResult, CliError> {
    let id = run_id(cfg_text.as_bytes(), seed);
    let dir = out_root.join(&id);
    if dir.exists() {
        return Err(CliError::Collision(dir.display().to_string()));
    }
    let kv = Config::parse(cfg_path, cfg_text)?;
    let (mcfg, tcfg) = train_config(&kv, seed)?;

    let started = unix_now();
    let outcome = train(train_slides, val_slides, &mcfg, &tcfg)?;

    fs::create_dir_all(out_root).map_err(|e| CliError::io("create_dir", out_root, e))?;
    match fs::create_dir(&dir) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            return Err(CliError::Collision(dir.display().to_string()));
        }
        Err(e) => return Err(CliError::io("create_dir", &dir, e)),
    }

    let entries = |ps: &ParamSet| -> Vec<(String, Tensor)> {
        ps.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    };
    save_checkpoint(&dir.join("checkpoint.hmil"), &entries(&outcome.best_params))?;
    save_checkpoint(&dir.join("final.hmil"), &entries(&outcome.final_params))?;
    write_metrics_csv(&outcome.history, &dir.join("metrics.csv"))?;
    let cfg_copy = dir.join("config.kv");
    fs::write(&cfg_copy, cfg_text).map_err(|e| CliError::io("write", &cfg_copy, e))?;

    let mut manifest = RunManifest {
        run_id: id.clone(),
        command: "train".into(),
        seed,
        started_unix: started,
        finished_unix: unix_now(),
        config_sha256: sha256_hex(cfg_text.as_bytes()),
        dataset_sha256: dataset_hash.to_string(),
        checkpoint_sha256: file_sha256(&dir.join("checkpoint.hmil"))?,
        artifacts: Default::default(),
    };
    for (name, rel) in [
        ("checkpoint", "checkpoint.hmil"),
        ("final", "final.hmil"),
        ("metrics", "metrics.csv"),
        ("config", "config.kv"),
    ] {
        manifest.add_artifact(&dir, name, rel)?;
    }
    manifest.write(&dir)?;

    let h = &outcome.history;
    let stdout = vec![
        format!("run_dir={}", dir.display()),
        format!("checkpoint={}", dir.join("checkpoint.hmil").display()),
        format!("metrics={}", dir.join("metrics.csv").display()),
        format!("seed={seed}"),
        format!("best_epoch={}", h.best_epoch),
        format!("best_val_auc={:.12e}", h.best_val_auc),
        format!("train_secs={:.1}", h.wall_secs),
    ];
    Ok(SeedResult {
        seed,
        run_id: id,
        best_epoch: h.best_epoch,
        best_val_auc: h.best_val_auc,
        stdout,
    })
}

pub fn cmd_train(config: &Path, data: &Path, out: &Path, seeds: &[u64]) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds given".into()));
    }
    let cfg_text =
        fs::read_to_string(config).map_err(|e| CliError::io("read", config, e))?;
    {
        // validate the config once up front so a sweep fails before training
        let kv = Config::parse(config, &cfg_text)?;
        train_config(&kv, seeds[0])?;
    }
    let manifest = load_manifest(data)?;
    let dataset_hash = dataset_sha256(data)?;
    let train_slides = load_split(&manifest, data, Split::Train)?;
    let val_slides = load_split(&manifest, data, Split::Val)?;
    if train_slides.is_empty() || val_slides.is_empty() {
        return Err(CliError::Config(format!(
            "dataset {} needs non-empty train and val splits (got {} train, {} val)",
            data.display(),
            train_slides.len(),
            val_slides.len()
        )));
    }

    let results = run_seeds(
        seeds,
        hmil_threads(),
        &cfg_text,
        config,
        &dataset_hash,
        &train_slides,
        &val_slides,
        out,
    );
    let mut ok = Vec::with_capacity(seeds.len());
    for r in results {
        ok.push(r?);
    }
    for r in &ok {
        for line in &r.stdout {
            println!("{line}");
        }
    }

    if seeds.len() > 1 {
        let sweep_tag = &sha256_hex(cfg_text.as_bytes())[..16];
        let summary_path = out.join(format!("summary-{sweep_tag}.csv"));
        if summary_path.exists() {
            return Err(CliError::Collision(summary_path.display().to_string()));
        }
        let aucs: Vec<f64> = ok.iter().map(|r| r.best_val_auc).collect();
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        let var = aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>()
            / (aucs.len() - 1) as f64;
        let best = aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut csv = String::from("seed,run_id,best_epoch,best_val_auc\n");
        for r in &ok {
            csv.push_str(&format!(
                "{},{},{},{:.12e}\n",
                r.seed, r.run_id, r.best_epoch, r.best_val_auc
            ));
        }
        csv.push_str(&format!("mean,,,{mean:.12e}\n"));
        csv.push_str(&format!("sd,,,{:.12e}\n", var.sqrt()));
        csv.push_str(&format!("best,,,{best:.12e}\n"));
        fs::write(&summary_path, csv).map_err(|e| CliError::io("write", &summary_path, e))?;
        println!("summary={}", summary_path.display());
    }
    Ok(())
}

/// Runs one training per seed, at most `threads` at a time, and returns the
/// results in the seeds' input order.
#[allow(clippy::too_many_arguments)]
fn run_seeds(
    seeds: &[u64],
    threads: usize,
    cfg_text: &str,
    cfg_path: &Path,
    dataset_hash: &str,
    train_slides: &[SlideGrid],
    val_slides: &[SlideGrid],
    out: &Path,
) -> Vec<Result<SeedResult, CliError>> {
    if threads <= 1 || seeds.len() <= 1 {
        return seeds
            .iter()
            .map(|&s| {
                train_one(
                    cfg_text,
                    cfg_path,
                    dataset_hash,
                    train_slides,
                    val_slides,
                    out,
                    s,
                )
            })
            .collect();
    }
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<Result<SeedResult, CliError>>>> =
        seeds.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.min(seeds.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= seeds.len() {
                    break;
                }
                let r = train_one(
                    cfg_text,
                    cfg_path,
                    dataset_hash,
                    train_slides,
                    val_slides,
                    out,
                    seeds[i],
                );
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker finished"))
        .collect()
}

/// Rebuilds a ParamSet from checkpoint entries, verifying the parameter names
/// and shapes against what the model config would create.
fn rebuild_params(
    cfg: &ModelConfig,
    entries: Vec<(String, Tensor)>,
) -> Result<ParamSet, CliError> {
    let expected = ParamSet::init(cfg, 0)?;
    let n_entries = entries.len();
    let mut by_name: HashMap<String, Tensor> = entries.into_iter().collect();
    if by_name.len() != n_entries {
        return Err(CliError::Mismatch(
            "checkpoint lists a parameter twice".into(),
        ));
    }
    let mut ps = ParamSet::new();
    for name in expected.names() {
        let want = expected.get(name).unwrap().shape().to_vec();
        let tensor = by_name.remove(name).ok_or_else(|| {
            CliError::Mismatch(format!("checkpoint is missing parameter `{name}`"))
        })?;
        if tensor.shape() != want.as_slice() {
            return Err(CliError::Mismatch(format!(
                "parameter `{name}`: checkpoint shape {:?}, model expects {:?}",
                tensor.shape(),
                want
            )));
        }
        ps.push(name, tensor);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(CliError::Mismatch(format!(
            "checkpoint has parameter `{name}` that the model does not define"
        )));
    }
    Ok(ps)
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!(
            "split must be train, val, or test, got {other:?}"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    checkpoint: &Path,
    config: &Path,
    data: &Path,
    split: &str,
    out: &Path,
    top: bool,
    heatmaps: bool,
) -> Result<(), CliError> {
    let kv = Config::load(config)?;
    let mcfg = model_config(&kv)?;
    let ps = rebuild_params(&mcfg, load_checkpoint(checkpoint)?)?;
    let split = parse_split(split)?;
    let manifest = load_manifest(data)?;
    let slides = load_split(&manifest, data, split)?;
    if slides.is_empty() {
        return Err(CliError::Config(format!(
            "split {split:?} of {} is empty",
            data.display()
        )));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io("create_dir", out, e))?;
    let report_path = out.join("report.csv");

    // (slide_id, coords, attention, grid) per slide, for optional heatmaps
    let mut maps: Vec<(String, Vec<(usize, usize)>, Vec<f64>, (usize, usize))> = Vec::new();
    if top {
        let report = evaluate_slides(&ps, &mcfg, &slides)?;
        write_report_csv(&report.rows, &report_path)?;
        for r in &report.rows {
            maps.push((
                r.slide_id.clone(),
                r.coords.clone(),
                r.attention.clone(),
                (r.grid_w, r.grid_h),
            ));
        }
        println!("report={}", report_path.display());
        println!("n_slides={}", report.rows.len());
        println!("auc_all={:.12e}", report.auc_all);
        println!("auc_top={:.12e}", report.auc_top);
        println!("extremity_all={:.12e}", report.extremity_all);
        println!("extremity_top={:.12e}", report.extremity_top);
    } else {
        let mut csv = String::from("slide_id,label,prob_all\n");
        let mut labels = Vec::new();
        let mut probs = Vec::new();
        for slide in &slides {
            let full = infer_full(&ps, &mcfg, slide)?;
            csv.push_str(&format!(
                "{},{},{:.12e}\n",
                full.slide_id, full.label, full.probability
            ));
            labels.push(full.label);
            probs.push(full.probability);
            maps.push((
                full.slide_id.clone(),
                full.coords,
                full.attention,
                (full.grid_w, full.grid_h),
            ));
        }
        fs::write(&report_path, csv).map_err(|e| CliError::io("write", &report_path, e))?;
        println!("report={}", report_path.display());
        println!("n_slides={}", slides.len());
        println!("auc_all={:.12e}", auc(&labels, &probs)?);
        println!("extremity_all={:.12e}", extremity_stat(&probs));
    }

    if heatmaps {
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir).map_err(|e| CliError::io("create_dir", &dir, e))?;
        for (slide_id, coords, attention, (gw, gh)) in &maps {
            export_heatmap(
                *gw,
                *gh,
                coords,
                attention,
                &dir.join(format!("{slide_id}.pgm")),
                &dir.join(format!("{slide_id}.csv")),
            )?;
        }
        println!("heatmap_dir={}", dir.display());
    }
    Ok(())
}

pub fn cmd_coverage(
    config: &Path,
    out: &Path,
    trials: usize,
    seed: u64,
) -> Result<(), CliError> {
    let kv = Config::load(config)?;
    let spec = coverage_config(&kv)?;
    let mask = Mask::full(spec.grid_w, spec.grid_h);
    let (rx, ry, rw, rh) = spec.roi;
    let roi: Vec<(usize, usize)> = (ry..ry + rh)
        .flat_map(|y| (rx..rx + rw).map(move |x| (x, y)))
        .collect();

    let mut csv = String::from("strategy,roi_size,probability,stderr\n");
    let mut lines = Vec::new();
    for strat in &spec.strategies {
        let est = estimate_roi_coverage(&strat.sampler, &mask, &roi, trials, seed)?;
        csv.push_str(&format!(
            "{},{},{:.12e},{:.12e}\n",
            strat.name,
            roi.len(),
            est.probability,
            est.std_error
        ));
        lines.push(format!("{}={:.12e}", strat.name, est.probability));
        if strat.name == "global" {
            // without-replacement draw of n distinct patches has a closed form
            let n = strat.sampler.budget();
            let exact = global_coverage_closed_form(mask.count(), roi.len(), n);
            csv.push_str(&format!(
                "global_closed_form,{},{exact:.12e},0.0\n",
                roi.len()
            ));
            lines.push(format!("global_closed_form={exact:.12e}"));
        }
    }

    fs::create_dir_all(out).map_err(|e| CliError::io("create_dir", out, e))?;
    let path = out.join("coverage.csv");
    fs::write(&path, csv).map_err(|e| CliError::io("write", &path, e))?;
    println!("coverage={}", path.display());
    println!("trials={trials}");
    for line in lines {
        println!("{line}");
    }
    Ok(())
}
