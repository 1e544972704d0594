//! Training loop: fresh bags and augmentation draws per epoch, slide-batch
//! gradient averaging, AdamW updates, per-epoch full-slide validation, and
//! best-validation-AUC model selection. Fully deterministic in (seed,
//! config, dataset).

use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::eval::{validation_auc, EvalError};
use crate::model::{bind_params, embed_patches, forward, patch_batch, ModelConfig, ModelError, ParamSet};
use crate::rng::StreamRng;
use crate::sampling::{sample_bag, Mask, SampledBag, SamplerConfig, SamplingError};
use crate::synthwsi::{apply_augment, draw_augment, SlideGrid};
use crate::tensor::adamw::adamw_step;
use crate::{AdamWConfig, AdamWState, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss on slide {slide_id}")]
    NonFiniteLoss { slide_id: String },
    #[error("training aborted at epoch {epoch}, step {step}: {source}")]
    Step {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("slide {slide_id} has no non-empty mask; filter it before training")]
    UnfilteredSlide { slide_id: String },
    #[error("{op} {path}: {source}")]
    Io {
        op: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub augment: bool,
    /// Zero the embeddings of a random fraction of sampled regions each step.
    /// The aggregator thereby learns to route attention past inactive
    /// regions, which is the regime the high-attention second pass creates at
    /// inference when it zeroes every low-attention embedding row.
    pub region_dropout: bool,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: the from-scratch embedder wants a higher
    /// learning rate than a pretrained backbone would.
    pub fn new(sampler: SamplerConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            batch_size: 2,
            weight_decay: 0.01,
            augment: true,
            region_dropout: true,
            sampler,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::Config(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose parameters were kept (ties keep the earliest).
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub wall_secs: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_params: ParamSet,
    pub final_params: ParamSet,
    pub history: RunHistory,
}

/// Pixels for one bag as a `[n, 3, P, P]` tensor; with augmentation on, one
/// augmentation draw per (epoch, slide) is applied to every patch.
fn bag_pixels(
    grid: &SlideGrid,
    bag: &SampledBag,
    augment: bool,
    epoch_seed: u64,
) -> Result<Tensor, ModelError> {
    if !augment {
        return patch_batch(grid, &bag.coords);
    }
    if grid.channels != 3 {
        return Err(ModelError::Structure(format!(
            "slide {} has {} channels, expected 3",
            grid.slide_id, grid.channels
        )));
    }
    let mut rng = StreamRng::new(epoch_seed, &format!("aug/{}", grid.slide_id));
    let draw = draw_augment(&mut rng);
    let p = grid.patch_px;
    let n = bag.coords.len();
    let mut data = vec![0.0f64; n * 3 * p * p];
    let mut buf = vec![0u8; grid.patch_len()];
    for (i, &(gx, gy)) in bag.coords.iter().enumerate() {
        buf.copy_from_slice(grid.patch_pixels(gx, gy));
        apply_augment(&mut buf, p, 3, &draw);
        for y in 0..p {
            for x in 0..p {
                for ch in 0..3 {
                    data[((i * 3 + ch) * p + y) * p + x] = buf[(y * p + x) * 3 + ch] as f64 / 255.0;
                }
            }
        }
    }
    Ok(Tensor::new(&[n, 3, p, p], data)?)
}

// Region dropout zeroes each region with a probability drawn uniformly from
// this range per step, so some steps barely thin the bag and others starve it.
const REGION_DROP_LO: f64 = 0.1;
const REGION_DROP_HI: f64 = 0.6;

/// Per-patch keep flags for region dropout, grouped by the outermost path
/// component (the sampled region; for global bags, the patch itself). At
/// least one region always survives. `None` means every region survived and
/// no masking is needed.
fn region_dropout_keep(
    paths: &[Vec<usize>],
    slide_id: &str,
    epoch_seed: u64,
) -> Option<Vec<bool>> {
    let mut rng = StreamRng::new(epoch_seed, &format!("rdrop/{slide_id}"));
    let f = rng.uniform(REGION_DROP_LO, REGION_DROP_HI);
    let mut dropped: BTreeMap<usize, bool> = BTreeMap::new();
    for p in paths {
        let top = p.last().copied().unwrap_or(0);
        dropped.entry(top).or_insert_with(|| rng.coin(f));
    }
    if dropped.values().all(|&d| d) {
        let first = *dropped.keys().next().unwrap();
        dropped.insert(first, false);
    }
    if dropped.values().all(|&d| !d) {
        return None;
    }
    Some(
        paths
            .iter()
            .map(|p| !dropped[&p.last().copied().unwrap_or(0)])
            .collect(),
    )
}

/// Samples a bag, runs forward/backward for one slide, and adds its
/// gradients into the accumulator. Returns the slide's loss.
fn slide_step(
    params: &ParamSet,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    grid: &SlideGrid,
    mask: &Mask,
    epoch_seed: u64,
    grad_acc: &mut [Tensor],
) -> Result<f64, TrainError> {
    let bag = sample_bag(&tcfg.sampler, mask, &grid.slide_id, epoch_seed)?;
    let px = bag_pixels(grid, &bag, tcfg.augment, epoch_seed)?;
    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, params, true);
    let x = tape.constant(px);
    let mut emb = embed_patches(&mut tape, &bp, mcfg, x)?;
    if tcfg.region_dropout {
        if let Some(keep) = region_dropout_keep(&bag.group_paths, &grid.slide_id, epoch_seed) {
            let d = tape.value(emb).shape()[1];
            let mut m = vec![0.0; keep.len() * d];
            for (i, &k) in keep.iter().enumerate() {
                if k {
                    m[i * d..(i + 1) * d].fill(1.0);
                }
            }
            let mask_t = tape.constant(Tensor::new(&[keep.len(), d], m)?);
            emb = tape.mul(emb, mask_t)?;
        }
    }
    let out = forward(&mut tape, &bp, mcfg, emb, &bag.coords, &bag.group_paths)?;
    let loss = tape.bce_with_logits(out.logit, grid.label as f64)?;
    let lv = tape.value(loss).item();
    if !lv.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            slide_id: grid.slide_id.clone(),
        });
    }
    let grads = tape.backward(loss)?;
    for (gi, &v) in bp.ordered_vars().iter().enumerate() {
        if let Some(g) = grads.wrt(v) {
            let acc = grad_acc[gi].data_mut();
            for (a, &b) in acc.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(lv)
}

pub fn train(
    train_slides: &[SlideGrid],
    val_slides: &[SlideGrid],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    tcfg.validate()?;
    mcfg.validate()?;
    if train_slides.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    if val_slides.is_empty() {
        return Err(TrainError::Config("validation split is empty".into()));
    }

    let t0 = Instant::now();
    let mut params = ParamSet::init(mcfg, tcfg.seed)?;
    let opt_cfg = AdamWConfig::new(tcfg.lr, tcfg.weight_decay);
    let mut opt_state = AdamWState::new();

    let masks: Vec<Mask> = train_slides
        .iter()
        .map(|g| {
            Mask::from_slide(g).ok_or_else(|| TrainError::UnfilteredSlide {
                slide_id: g.slide_id.clone(),
            })
        })
        .collect::<Result<_, _>>()?;

    let mut history: Vec<EpochStats> = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;

    for epoch in 1..=tcfg.epochs {
        let epoch_seed = StreamRng::new(tcfg.seed, &format!("epoch/{epoch}")).next_u64();
        let mut order: Vec<usize> = (0..train_slides.len()).collect();
        StreamRng::new(epoch_seed, "order").shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let at = |e: TrainError| TrainError::Step {
                epoch,
                step: step + 1,
                source: Box::new(e),
            };
            let mut grad_acc: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for &si in batch {
                let grid = &train_slides[si];
                epoch_loss +=
                    slide_step(&params, mcfg, tcfg, grid, &masks[si], epoch_seed, &mut grad_acc)
                        .map_err(&at)?;
            }
            // Batch gradient = mean over the slides in the batch.
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad_acc {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            let names: Vec<String> = params.names().to_vec();
            adamw_step(
                &opt_cfg,
                &mut opt_state,
                &names,
                params.tensors_mut(),
                &grad_acc,
            )
            .map_err(|e| at(TrainError::Tensor(e)))?;
        }

        let loss = epoch_loss / train_slides.len() as f64;
        let val_auc = validation_auc(&params, mcfg, val_slides)?;
        history.push(EpochStats {
            epoch,
            loss,
            val_auc,
        });
        if best.as_ref().map_or(true, |&(_, b, _)| val_auc > b) {
            best = Some((epoch, val_auc, params.clone()));
        }
    }

    let (best_epoch, best_val_auc, best_params) = best.expect("epochs >= 1");
    Ok(TrainOutcome {
        best_params,
        final_params: params,
        history: RunHistory {
            seed: tcfg.seed,
            epochs: history,
            best_epoch,
            best_val_auc,
            wall_secs: t0.elapsed().as_secs_f64(),
        },
    })
}

/// Writes the history as `epoch,loss,val_auc` rows.
pub fn write_metrics_csv(history: &RunHistory, path: &Path) -> Result<(), TrainError> {
    let mut csv = String::from("epoch,loss,val_auc\n");
    for e in &history.epochs {
        csv.push_str(&format!("{},{:.12e},{:.12e}\n", e.epoch, e.loss, e.val_auc));
    }
    std::fs::write(path, csv).map_err(|source| TrainError::Io {
        op: "write",
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::sampling::RegionSpec;
    use crate::synthwsi::filter_empty_patches;

    /// Grid of uniformly dark (tissue-like) noise so every patch is kept.
    fn noisy_slide(id: &str, label: u8, grid_w: usize, grid_h: usize, patch_px: usize) -> SlideGrid {
        let mut rng = StreamRng::new(77, id);
        let n = grid_w * grid_h * patch_px * patch_px * 3;
        let pixels: Vec<u8> = (0..n).map(|_| 100 + rng.gen_below(60) as u8).collect();
        let mut g = SlideGrid::new(id.to_string(), grid_w, grid_h, patch_px, 3, label, pixels)
            .unwrap();
        filter_empty_patches(&mut g, 220).unwrap();
        g
    }

    fn toy_model() -> ModelConfig {
        let mut cfg = ModelConfig::baseline();
        cfg.embed_dim = 8;
        cfg.heads = 2;
        cfg.patch_px = 8;
        cfg
    }

    fn toy_train_cfg(seed: u64) -> TrainConfig {
        let mut t = TrainConfig::new(SamplerConfig::Global { n: 12 }, seed);
        t.epochs = 2;
        t.lr = 1e-3;
        t
    }

    fn smoke_slides() -> (Vec<SlideGrid>, Vec<SlideGrid>) {
        let train: Vec<SlideGrid> = (0..6)
            .map(|i| noisy_slide(&format!("tr{i}"), (i % 2) as u8, 5, 5, 8))
            .collect();
        let val = vec![
            noisy_slide("va0", 1, 5, 5, 8),
            noisy_slide("va1", 0, 5, 5, 8),
        ];
        (train, val)
    }

    #[test]
    fn two_epochs_emit_two_history_rows() {
        let (train_s, val_s) = smoke_slides();
        let out = train(&train_s, &val_s, &toy_model(), &toy_train_cfg(1)).unwrap();
        assert_eq!(out.history.epochs.len(), 2);
        assert_eq!(out.history.epochs[0].epoch, 1);
        assert_eq!(out.history.epochs[1].epoch, 2);
        assert!(out.history.best_epoch >= 1 && out.history.best_epoch <= 2);
        assert!(out.history.wall_secs > 0.0);
        assert!(out.history.epochs.iter().all(|e| e.loss.is_finite()));
        let best = out
            .history
            .epochs
            .iter()
            .map(|e| e.val_auc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.history.best_val_auc, best);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (train_s, val_s) = smoke_slides();
        let a = train(&train_s, &val_s, &toy_model(), &toy_train_cfg(9)).unwrap();
        let b = train(&train_s, &val_s, &toy_model(), &toy_train_cfg(9)).unwrap();
        for (ea, eb) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert_eq!(ea.loss.to_bits(), eb.loss.to_bits());
            assert_eq!(ea.val_auc.to_bits(), eb.val_auc.to_bits());
        }
        assert_eq!(a.history.best_epoch, b.history.best_epoch);
        for ((na, ta), (nb, tb)) in a.best_params.iter().zip(b.best_params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "{na}");
        }
        let c = train(&train_s, &val_s, &toy_model(), &toy_train_cfg(10)).unwrap();
        assert_ne!(
            a.history.epochs[0].loss.to_bits(),
            c.history.epochs[0].loss.to_bits()
        );
    }

    #[test]
    fn single_slide_overfit_loss_decreases_monotonically() {
        // Full-bag training on one slide is plain gradient descent on a
        // fixed example; at lr=1e-3 the first 10 epochs must descend.
        let slide = noisy_slide("solo", 1, 4, 4, 8);
        let val = vec![
            noisy_slide("va0", 1, 4, 4, 8),
            noisy_slide("va1", 0, 4, 4, 8),
        ];
        let mut tcfg = TrainConfig::new(SamplerConfig::Global { n: 16 }, 5);
        tcfg.epochs = 10;
        tcfg.lr = 1e-3;
        tcfg.batch_size = 1;
        tcfg.augment = false;
        let out = train(&[slide], &val, &toy_model(), &tcfg).unwrap();
        let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.loss).collect();
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss went up: {losses:?}");
        }
    }

    #[test]
    fn runaway_learning_rate_aborts() {
        let (train_s, val_s) = smoke_slides();
        let mut tcfg = toy_train_cfg(2);
        tcfg.epochs = 4;
        tcfg.lr = 1e160;
        tcfg.weight_decay = 0.0;
        let err = train(&train_s, &val_s, &toy_model(), &tcfg).unwrap_err();
        match err {
            TrainError::Step { epoch, step, .. } => {
                // The first update must succeed before anything explodes.
                assert!(
                    epoch > 1 || step >= 2,
                    "diverged before any optimizer step: epoch {epoch}, step {step}"
                );
            }
            other => panic!("unexpected abort path: {other}"),
        }
    }

    #[test]
    fn hierarchical_smoke_run() {
        let train_s: Vec<SlideGrid> = (0..4)
            .map(|i| noisy_slide(&format!("h{i}"), (i % 2) as u8, 8, 8, 8))
            .collect();
        let val_s = vec![
            noisy_slide("hv0", 1, 8, 8, 8),
            noisy_slide("hv1", 0, 8, 8, 8),
        ];
        let mut mcfg = ModelConfig::hierarchical(
            RegionSpec::with_counts(2, 2, 2, 2).unwrap(),
        );
        mcfg.embed_dim = 8;
        mcfg.heads = 2;
        mcfg.patch_px = 8;
        assert_eq!(mcfg.arch, Arch::Hierarchical);
        let mut tcfg = TrainConfig::new(
            SamplerConfig::Hierarchical {
                spec: RegionSpec::with_counts(2, 2, 2, 2).unwrap(),
                n_top: 2,
            },
            3,
        );
        tcfg.epochs = 2;
        let out = train(&train_s, &val_s, &mcfg, &tcfg).unwrap();
        assert_eq!(out.history.epochs.len(), 2);
    }

    #[test]
    fn metrics_csv_round_trips_shape() {
        let hist = RunHistory {
            seed: 4,
            epochs: vec![
                EpochStats { epoch: 1, loss: 0.69, val_auc: 0.5 },
                EpochStats { epoch: 2, loss: 0.5231, val_auc: 0.75 },
            ],
            best_epoch: 2,
            best_val_auc: 0.75,
            wall_secs: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&hist, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,loss,val_auc");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,"));
        assert!(lines[2].starts_with("2,"));
    }
}
