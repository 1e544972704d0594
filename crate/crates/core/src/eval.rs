//! Full-slide two-stage inference, high-attention re-inference, and the
//! evaluation metrics (AUC, extremity, permutation standard error), plus
//! heatmap and report export.
//!
//! Stage 1 embeds every non-empty patch exactly once (in chunks, off-tape).
//! Stage 2 groups the patches into grid-aligned regions and runs the
//! aggregation graph. The "top" pass reuses the cached stage-1 embeddings
//! with the low-attention cluster zeroed out.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{
    bind_params, embed_patches, forward, patch_batch, Arch, AttentionRecord, ModelConfig,
    ModelError, ParamSet, Provenance, Scope,
};
use crate::rng::StreamRng;
use crate::sampling::{plan_inference_tiling, Mask, RegionSpec, TilingPlan};
use crate::synthwsi::{
    filter_empty_patches, load_slide, DatasetManifest, SlideGrid, Split, SynthError,
};
use crate::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("slide {slide_id} has no non-empty patches")]
    EmptySlide { slide_id: String },
    #[error("AUC undefined: all {n} labels belong to one class")]
    SingleClass { n: usize },
    #[error("{0}")]
    Input(String),
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
    Synth(#[from] SynthError),
}

/// Stage-1 chunk size; bounds peak conv workspace memory.
pub const EMBED_CHUNK: usize = 512;

/// Embeds the addressed patches once, chunk by chunk, on throwaway tapes.
/// Returns `[coords.len(), d]` rows aligned with `coords`.
pub fn embed_all(
    ps: &ParamSet,
    cfg: &ModelConfig,
    grid: &SlideGrid,
    coords: &[(usize, usize)],
) -> Result<Tensor, EvalError> {
    let d = cfg.embed_dim;
    let mut out = vec![0.0f64; coords.len() * d];
    for (ci, chunk) in coords.chunks(EMBED_CHUNK).enumerate() {
        let mut tape = Tape::new();
        let bp = bind_params(&mut tape, ps, false);
        let px = patch_batch(grid, chunk)?;
        let x = tape.constant(px);
        let emb = embed_patches(&mut tape, &bp, cfg, x)?;
        let vals = tape.value(emb).data();
        let start = ci * EMBED_CHUNK * d;
        out[start..start + vals.len()].copy_from_slice(vals);
    }
    Ok(Tensor::new(&[coords.len(), d], out).expect("embedding buffer sized to shape"))
}

/// Region paths for every member of a tiling plan: component `l-1` is the
/// patch's level-`l` window index inside its parent window, and the last
/// component is the tile's index in the plan.
pub fn tiling_paths(plan: &TilingPlan, spec: &RegionSpec) -> (Vec<(usize, usize)>, Vec<Vec<usize>>) {
    let s = spec.s;
    let levels = spec.levels;
    let mut coords = Vec::new();
    let mut paths = Vec::new();
    for (t, region) in plan.regions.iter().enumerate() {
        for &(gx, gy) in &region.members {
            let dx = gx - region.origin.0;
            let dy = gy - region.origin.1;
            let mut path = Vec::with_capacity(levels);
            for l in 1..levels {
                let side = s.pow(l as u32);
                let wx = (dx / side) % s;
                let wy = (dy / side) % s;
                path.push(wy * s + wx);
            }
            path.push(t);
            coords.push((gx, gy));
            paths.push(path);
        }
    }
    (coords, paths)
}

/// All-patch inference result, with everything the top pass needs cached.
#[derive(Debug, Clone)]
pub struct FullInference {
    pub slide_id: String,
    pub label: u8,
    pub grid_w: usize,
    pub grid_h: usize,
    pub probability: f64,
    /// Stage-1 embeddings, rows aligned with `coords`.
    pub embeddings: Tensor,
    pub coords: Vec<(usize, usize)>,
    pub paths: Vec<Vec<usize>>,
    /// Composite per-patch attention aligned with `coords`; sums to 1.
    pub attention: Vec<f64>,
    /// Number of patches embedded in stage 1 (exactly one embedding each).
    pub n_embedded: usize,
}

/// Composite per-patch attention: the product of class-token weights along
/// each patch's aggregation path, times its top region's level-L global
/// weight, renormalized to sum to 1 over the slide. Scores are aligned with
/// `coords`.
pub fn composite_attention(
    records: &[AttentionRecord],
    levels: usize,
    coords: &[(usize, usize)],
) -> Result<Vec<f64>, EvalError> {
    let mut leaf_w: HashMap<(usize, usize), (f64, &[usize])> = HashMap::new();
    let mut child_w: HashMap<&[usize], f64> = HashMap::new();
    let mut top_w: HashMap<usize, f64> = HashMap::new();
    for rec in records {
        match rec.scope {
            Scope::Level(1) => {
                for (w, p) in rec.weights.iter().zip(&rec.provenance) {
                    match p {
                        Provenance::Patch(gx, gy) => {
                            leaf_w.insert((*gx, *gy), (*w, &rec.group_id));
                        }
                        other => {
                            return Err(EvalError::Input(format!(
                                "leaf record carries group provenance {other:?}"
                            )))
                        }
                    }
                }
            }
            Scope::Level(_) => {
                for (w, p) in rec.weights.iter().zip(&rec.provenance) {
                    if let Provenance::Group(k) = p {
                        child_w.insert(k.as_slice(), *w);
                    }
                }
            }
            Scope::Global(l) if l == levels => {
                for (w, p) in rec.weights.iter().zip(&rec.provenance) {
                    if let Provenance::Group(k) = p {
                        top_w.insert(k[0], *w);
                    }
                }
            }
            Scope::Global(_) => {}
            Scope::Baseline => {
                // Flat case: the record's weights are the map.
                let mut scores = vec![0.0; coords.len()];
                for (w, p) in rec.weights.iter().zip(&rec.provenance) {
                    if let Provenance::Patch(gx, gy) = p {
                        let i = coords
                            .iter()
                            .position(|c| c == &(*gx, *gy))
                            .ok_or_else(|| {
                                EvalError::Input(format!("patch ({gx},{gy}) not in coords"))
                            })?;
                        scores[i] = *w;
                    }
                }
                let total: f64 = scores.iter().sum();
                return Ok(scores.iter().map(|s| s / total).collect());
            }
        }
    }

    let mut scores = Vec::with_capacity(coords.len());
    let mut total = 0.0;
    for c in coords {
        let (w0, key) = leaf_w
            .get(c)
            .ok_or_else(|| EvalError::Input(format!("patch {c:?} missing a leaf record")))?;
        let mut s = *w0;
        for j in 1..levels {
            s *= child_w.get(&key[j - 1..]).ok_or_else(|| {
                EvalError::Input(format!("no level-{} record covers key {key:?}", j + 1))
            })?;
        }
        s *= top_w.get(&key[levels - 1]).ok_or_else(|| {
            EvalError::Input(format!("no global record covers top window {}", key[levels - 1]))
        })?;
        scores.push(s);
        total += s;
    }
    Ok(scores.iter().map(|s| s / total).collect())
}

/// Stage 1 + stage 2 over every non-empty patch of the slide.
pub fn infer_full(
    ps: &ParamSet,
    cfg: &ModelConfig,
    grid: &SlideGrid,
) -> Result<FullInference, EvalError> {
    let mask = Mask::from_slide(grid).ok_or_else(|| {
        EvalError::Input(format!(
            "slide {} has no non-empty mask; filter it before inference",
            grid.slide_id
        ))
    })?;
    if mask.count() == 0 {
        return Err(EvalError::EmptySlide {
            slide_id: grid.slide_id.clone(),
        });
    }

    let (coords, paths) = match cfg.arch {
        Arch::Baseline => (mask.coords(), Vec::new()),
        Arch::Hierarchical => {
            let plan = plan_inference_tiling(&mask, &cfg.spec);
            tiling_paths(&plan, &cfg.spec)
        }
    };
    let embeddings = embed_all(ps, cfg, grid, &coords)?;

    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, ps, false);
    let emb = tape.constant(embeddings.clone());
    let out = forward(&mut tape, &bp, cfg, emb, &coords, &paths)?;
    let attention = composite_attention(&out.records, cfg.levels(), &coords)?;

    Ok(FullInference {
        slide_id: grid.slide_id.clone(),
        label: grid.label,
        grid_w: grid.grid_w,
        grid_h: grid.grid_h,
        probability: out.prob,
        n_embedded: coords.len(),
        embeddings,
        coords,
        paths,
        attention,
    })
}

/// Exact 1-D 2-means split of the values into a high and a low cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSplit {
    /// Indices into the input, ascending; high holds the larger centroid.
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub centroid_high: f64,
    /// None when the low cluster is empty.
    pub centroid_low: Option<f64>,
}

/// Minimum within-cluster SSE over every sorted split point. Ties prefer the
/// larger high cluster; a single distinct value puts everything in high.
pub fn kmeans2_split(values: &[f64]) -> AttentionSplit {
    assert!(!values.is_empty(), "kmeans2_split needs at least one value");
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut ps = vec![0.0; n + 1];
    let mut ps2 = vec![0.0; n + 1];
    for (i, &id) in idx.iter().enumerate() {
        ps[i + 1] = ps[i] + values[id];
        ps2[i + 1] = ps2[i] + values[id] * values[id];
    }
    // SSE of sorted[a..b) about its own mean.
    let sse = |a: usize, b: usize| -> f64 {
        let m = (b - a) as f64;
        if b <= a {
            return 0.0;
        }
        let s = ps[b] - ps[a];
        (ps2[b] - ps2[a] - s * s / m).max(0.0)
    };
    // Split s: low = sorted[..s], high = sorted[s..]. s = 0 keeps low empty;
    // strict improvement keeps the earliest (largest-high) optimum.
    let mut best_s = 0;
    let mut best = f64::INFINITY;
    for s in 0..n {
        let tot = sse(0, s) + sse(s, n);
        if tot < best {
            best = tot;
            best_s = s;
        }
    }
    let mut low: Vec<usize> = idx[..best_s].to_vec();
    let mut high: Vec<usize> = idx[best_s..].to_vec();
    low.sort_unstable();
    high.sort_unstable();
    let centroid_high = (ps[n] - ps[best_s]) / (n - best_s) as f64;
    let centroid_low = if best_s == 0 {
        None
    } else {
        Some(ps[best_s] / best_s as f64)
    };
    AttentionSplit {
        high,
        low,
        centroid_high,
        centroid_low,
    }
}

#[derive(Debug, Clone)]
pub struct TopInference {
    pub probability_top: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub centroid_high: f64,
    pub centroid_low: Option<f64>,
}

/// Re-runs stage 2 with the low-attention cluster's cached embeddings
/// replaced by zero vectors. The patches stay in their groups (zeroing, not
/// masking), so zero vectors still take part in every softmax.
pub fn infer_top(
    ps: &ParamSet,
    cfg: &ModelConfig,
    full: &FullInference,
) -> Result<TopInference, EvalError> {
    let split = kmeans2_split(&full.attention);
    let d = cfg.embed_dim;
    let mut emb = full.embeddings.clone();
    for &i in &split.low {
        emb.data_mut()[i * d..(i + 1) * d].fill(0.0);
    }
    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, ps, false);
    let e = tape.constant(emb);
    let out = forward(&mut tape, &bp, cfg, e, &full.coords, &full.paths)?;
    Ok(TopInference {
        probability_top: out.prob,
        n_high: split.high.len(),
        n_low: split.low.len(),
        centroid_high: split.centroid_high,
        centroid_low: split.centroid_low,
    })
}

/// Both passes for one slide.
#[derive(Debug, Clone)]
pub struct SlideInference {
    pub slide_id: String,
    pub label: u8,
    pub probability: f64,
    pub probability_top: f64,
    pub n_high: usize,
    pub n_low: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub coords: Vec<(usize, usize)>,
    pub attention: Vec<f64>,
    pub centroid_high: f64,
    pub centroid_low: Option<f64>,
}

pub fn infer_slide(
    ps: &ParamSet,
    cfg: &ModelConfig,
    grid: &SlideGrid,
) -> Result<SlideInference, EvalError> {
    let full = infer_full(ps, cfg, grid)?;
    let top = infer_top(ps, cfg, &full)?;
    Ok(SlideInference {
        slide_id: full.slide_id,
        label: full.label,
        probability: full.probability,
        probability_top: top.probability_top,
        n_high: top.n_high,
        n_low: top.n_low,
        grid_w: full.grid_w,
        grid_h: full.grid_h,
        coords: full.coords,
        attention: full.attention,
        centroid_high: top.centroid_high,
        centroid_low: top.centroid_low,
    })
}

/// Rank-based (Mann-Whitney) AUC with ties counted half.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64, EvalError> {
    if labels.len() != scores.len() {
        return Err(EvalError::Input(format!(
            "{} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(EvalError::SingleClass { n: labels.len() });
    }
    let mut idx: Vec<usize> = (0..labels.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0f64; labels.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of 1-based ranks i+1..=j+1
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let r1: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

/// Mean absolute deviation of the probabilities from 0.5.
pub fn extremity_stat(probs: &[f64]) -> f64 {
    assert!(!probs.is_empty(), "extremity of an empty set");
    probs.iter().map(|p| (p - 0.5).abs()).sum::<f64>() / probs.len() as f64
}

/// Standard deviation of the AUC under random label permutations — the null
/// scale used for "above chance" checks.
pub fn auc_permutation_se(
    labels: &[u8],
    scores: &[f64],
    trials: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if trials < 2 {
        return Err(EvalError::Input("need at least 2 permutation trials".into()));
    }
    let mut rng = StreamRng::new(seed, "auc-perm");
    let mut lab = labels.to_vec();
    let mut aucs = Vec::with_capacity(trials);
    for _ in 0..trials {
        rng.shuffle(&mut lab);
        aucs.push(auc(&lab, scores)?);
    }
    let mean = aucs.iter().sum::<f64>() / trials as f64;
    let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (trials - 1) as f64;
    Ok(var.sqrt())
}

/// Split-level evaluation: both passes per slide plus the summary metrics.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<SlideInference>,
    pub auc_all: f64,
    pub auc_top: f64,
    pub extremity_all: f64,
    pub extremity_top: f64,
}

pub fn evaluate_slides(
    ps: &ParamSet,
    cfg: &ModelConfig,
    slides: &[SlideGrid],
) -> Result<EvalReport, EvalError> {
    let rows: Vec<SlideInference> = slides
        .iter()
        .map(|g| infer_slide(ps, cfg, g))
        .collect::<Result<_, _>>()?;
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let all: Vec<f64> = rows.iter().map(|r| r.probability).collect();
    let top: Vec<f64> = rows.iter().map(|r| r.probability_top).collect();
    Ok(EvalReport {
        auc_all: auc(&labels, &all)?,
        auc_top: auc(&labels, &top)?,
        extremity_all: extremity_stat(&all),
        extremity_top: extremity_stat(&top),
        rows,
    })
}

/// AUC of the all-patch pass only — the training loop's validation metric.
pub fn validation_auc(
    ps: &ParamSet,
    cfg: &ModelConfig,
    slides: &[SlideGrid],
) -> Result<f64, EvalError> {
    let mut labels = Vec::with_capacity(slides.len());
    let mut probs = Vec::with_capacity(slides.len());
    for g in slides {
        let full = infer_full(ps, cfg, g)?;
        labels.push(full.label);
        probs.push(full.probability);
    }
    auc(&labels, &probs)
}

/// Loads and mask-filters every slide of a split, in manifest order.
pub fn load_split(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    split: Split,
) -> Result<Vec<SlideGrid>, EvalError> {
    let mut slides = Vec::new();
    for entry in manifest.split_entries(split) {
        let mut grid = load_slide(&dataset_dir.join(&entry.path))?;
        if grid.label != entry.label {
            return Err(EvalError::Input(format!(
                "slide {}: file label {} disagrees with manifest label {}",
                entry.slide_id, grid.label, entry.label
            )));
        }
        filter_empty_patches(&mut grid, manifest.threshold)?;
        slides.push(grid);
    }
    Ok(slides)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    std::fs::write(path, bytes).map_err(|source| EvalError::Io {
        op: "write",
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the attention map as a binary PGM (one pixel per grid cell,
/// min-max scaled to 0-255, cells without a patch = 0) and as a CSV of
/// `row,col,score`.
pub fn export_heatmap(
    grid_w: usize,
    grid_h: usize,
    coords: &[(usize, usize)],
    scores: &[f64],
    pgm_path: &Path,
    csv_path: &Path,
) -> Result<(), EvalError> {
    if coords.len() != scores.len() {
        return Err(EvalError::Input(format!(
            "{} coords vs {} scores",
            coords.len(),
            scores.len()
        )));
    }
    let mut map: Vec<Option<f64>> = vec![None; grid_w * grid_h];
    for (&(gx, gy), &s) in coords.iter().zip(scores) {
        if gx >= grid_w || gy >= grid_h {
            return Err(EvalError::Input(format!(
                "coordinate ({gx}, {gy}) outside {grid_w}x{grid_h} map"
            )));
        }
        map[gy * grid_w + gx] = Some(s);
    }
    let present: Vec<f64> = map.iter().flatten().copied().collect();
    let lo = present.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = present.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut pgm = Vec::with_capacity(32 + grid_w * grid_h);
    pgm.extend_from_slice(format!("P5 {grid_w} {grid_h} 255\n").as_bytes());
    for cell in &map {
        let byte = match cell {
            None => 0u8,
            Some(_) if hi == lo => 255,
            Some(v) => ((v - lo) / (hi - lo) * 255.0).round() as u8,
        };
        pgm.push(byte);
    }
    write_file(pgm_path, &pgm)?;

    let mut csv = String::from("row,col,score\n");
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            if let Some(v) = map[gy * grid_w + gx] {
                csv.push_str(&format!("{gy},{gx},{v:.12e}\n"));
            }
        }
    }
    write_file(csv_path, csv.as_bytes())
}

/// Writes per-slide rows as `slide_id,label,prob_all,prob_top,n_high,n_low`.
pub fn write_report_csv(rows: &[SlideInference], path: &Path) -> Result<(), EvalError> {
    let mut csv = String::from("slide_id,label,prob_all,prob_top,n_high,n_low\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{:.12e},{:.12e},{},{}\n",
            r.slide_id, r.label, r.probability, r.probability_top, r.n_high, r.n_low
        ));
    }
    write_file(path, csv.as_bytes())
}
