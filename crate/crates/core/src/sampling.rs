//! Patch sampling strategies: global, regional (single level), hierarchical
//! (multi level), plus inference-time tiling and ROI coverage estimation.
//!
//! Training anchors are free-floating (any grid placement whose window holds
//! enough non-empty patches), which diversifies bags across epochs. Inference
//! tiling is grid-aligned so every non-empty patch lands in exactly one tile.
//!
//! Under-filled slides never error: selection falls back first to
//! under-filled windows (`weakly_valid`), then to drawing with replacement
//! (`with_replacement`); both are flagged on the bag and the budget is always
//! met exactly.

use std::collections::HashSet;

use thiserror::Error;

use crate::rng::StreamRng;
use crate::synthwsi::SlideGrid;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid region spec: {0}")]
    Spec(String),
    #[error("slide {slide_id}: non-empty mask has no patches")]
    EmptyMask { slide_id: String },
    #[error("window of side {side} exceeds the {grid_w}x{grid_h} grid")]
    WindowTooLarge {
        side: usize,
        grid_w: usize,
        grid_h: usize,
    },
    #[error("{0}")]
    BadArgument(String),
}

/// Aggregation window geometry. `s` is the window side at every level and
/// `levels` the depth; the derived total side length is `s^levels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionSpec {
    pub s: usize,
    pub levels: usize,
    pub patches_per_leaf: usize,
    pub children_per_level: usize,
}

/// Side of the full multi-level window: S^L.
pub fn total_side_length(s: usize, levels: usize) -> Result<usize, SamplingError> {
    if s < 2 {
        return Err(SamplingError::Spec(format!("S must be >= 2, got {s}")));
    }
    if levels < 1 {
        return Err(SamplingError::Spec("L must be >= 1".into()));
    }
    s.checked_pow(levels as u32)
        .ok_or_else(|| SamplingError::Spec(format!("S^L overflows for S={s}, L={levels}")))
}

impl RegionSpec {
    pub fn new(s: usize, levels: usize) -> Result<RegionSpec, SamplingError> {
        RegionSpec::with_counts(s, levels, 4, 4)
    }

    pub fn with_counts(
        s: usize,
        levels: usize,
        patches_per_leaf: usize,
        children_per_level: usize,
    ) -> Result<RegionSpec, SamplingError> {
        total_side_length(s, levels)?;
        if patches_per_leaf < 1 || patches_per_leaf > s * s {
            return Err(SamplingError::Spec(format!(
                "patches_per_leaf {patches_per_leaf} outside 1..=S^2 ({})",
                s * s
            )));
        }
        if children_per_level < 1 || children_per_level > s * s {
            return Err(SamplingError::Spec(format!(
                "children_per_level {children_per_level} outside 1..=S^2 ({})",
                s * s
            )));
        }
        Ok(RegionSpec {
            s,
            levels,
            patches_per_leaf,
            children_per_level,
        })
    }

    pub fn total_side_length(&self) -> usize {
        self.s.pow(self.levels as u32)
    }

    /// Patches one top-level region contributes to the bag.
    pub fn patches_per_top(&self) -> usize {
        self.children_per_level.pow(self.levels as u32 - 1) * self.patches_per_leaf
    }

    /// Patches a window at `level` (side S^level) must supply.
    fn needed(&self, level: usize) -> usize {
        self.children_per_level.pow(level as u32 - 1) * self.patches_per_leaf
    }
}

/// Non-empty grid mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub grid_w: usize,
    pub grid_h: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn new(grid_w: usize, grid_h: usize, cells: Vec<bool>) -> Result<Mask, SamplingError> {
        if cells.len() != grid_w * grid_h {
            return Err(SamplingError::BadArgument(format!(
                "mask length {} does not match {grid_w}x{grid_h}",
                cells.len()
            )));
        }
        Ok(Mask {
            grid_w,
            grid_h,
            cells,
        })
    }

    pub fn full(grid_w: usize, grid_h: usize) -> Mask {
        Mask {
            grid_w,
            grid_h,
            cells: vec![true; grid_w * grid_h],
        }
    }

    /// Requires [`crate::synthwsi::filter_empty_patches`] to have run.
    pub fn from_slide(slide: &SlideGrid) -> Option<Mask> {
        Some(Mask {
            grid_w: slide.grid_w,
            grid_h: slide.grid_h,
            cells: slide.nonempty_mask()?.to_vec(),
        })
    }

    pub fn is_set(&self, gx: usize, gy: usize) -> bool {
        self.cells[gy * self.grid_w + gx]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Set coordinates in row-major order.
    pub fn coords(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                if self.is_set(gx, gy) {
                    out.push((gx, gy));
                }
            }
        }
        out
    }
}

/// Summed-area table over the mask for O(1) window counts.
struct Integral {
    w: usize,
    cum: Vec<u32>,
}

impl Integral {
    fn new(mask: &Mask) -> Integral {
        let (w, h) = (mask.grid_w, mask.grid_h);
        let mut cum = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            for x in 0..w {
                cum[(y + 1) * (w + 1) + (x + 1)] = cum[y * (w + 1) + (x + 1)]
                    + cum[(y + 1) * (w + 1) + x]
                    - cum[y * (w + 1) + x]
                    + mask.cells[y * w + x] as u32;
            }
        }
        Integral { w, cum }
    }

    fn count(&self, x0: usize, y0: usize, side_w: usize, side_h: usize) -> usize {
        let (x1, y1) = (x0 + side_w, y0 + side_h);
        (self.cum[y1 * (self.w + 1) + x1] + self.cum[y0 * (self.w + 1) + x0]
            - self.cum[y0 * (self.w + 1) + x1]
            - self.cum[y1 * (self.w + 1) + x0]) as usize
    }
}

/// One sampled bag of patches. `group_paths[k]` is the lineage of patch `k`,
/// leaf first: element 0 is the leaf slot, the last element is the top-level
/// region index. Global bags give every patch its own singleton group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledBag {
    pub slide_id: String,
    pub epoch_seed: u64,
    pub coords: Vec<(usize, usize)>,
    pub group_paths: Vec<Vec<usize>>,
    /// Some window had to be drawn with replacement to meet the budget.
    pub with_replacement: bool,
    /// Descent accepted windows below the full-support requirement.
    pub weakly_valid: bool,
}

impl SampledBag {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

fn bag_rng(epoch_seed: u64, slide_id: &str) -> StreamRng {
    StreamRng::new(epoch_seed, &format!("sample/{slide_id}"))
}

/// Uniform sampling over all non-empty patches, without replacement while
/// the mask supports it.
pub fn sample_global(
    mask: &Mask,
    n: usize,
    slide_id: &str,
    epoch_seed: u64,
) -> Result<SampledBag, SamplingError> {
    if n == 0 {
        return Err(SamplingError::BadArgument("bag size must be positive".into()));
    }
    let coords = mask.coords();
    if coords.is_empty() {
        return Err(SamplingError::EmptyMask {
            slide_id: slide_id.to_string(),
        });
    }
    let mut rng = bag_rng(epoch_seed, slide_id);
    let (picked, with_replacement) = if n <= coords.len() {
        let idx = rng.sample_k(coords.len(), n);
        (idx.into_iter().map(|i| coords[i]).collect::<Vec<_>>(), false)
    } else {
        let picked = (0..n)
            .map(|_| coords[rng.gen_below(coords.len() as u64) as usize])
            .collect();
        (picked, true)
    };
    let group_paths = (0..n).map(|k| vec![k]).collect();
    Ok(SampledBag {
        slide_id: slide_id.to_string(),
        epoch_seed,
        coords: picked,
        group_paths,
        with_replacement,
        weakly_valid: false,
    })
}

#[derive(Default)]
struct Flags {
    with_replacement: bool,
    weakly_valid: bool,
}

/// Picks `want` slots from candidate windows: without replacement among the
/// fully-supported ones, then under-filled ones, then with replacement.
fn choose_windows(
    rng: &mut StreamRng,
    full: &[usize],
    nonzero: &[usize],
    want: usize,
    flags: &mut Flags,
) -> Vec<usize> {
    if full.len() >= want {
        return rng.sample_k(full.len(), want).into_iter().map(|i| full[i]).collect();
    }
    flags.weakly_valid = true;
    let mut chosen: Vec<usize> = full.to_vec();
    let rest: Vec<usize> = nonzero.iter().copied().filter(|i| !full.contains(i)).collect();
    let need = want - chosen.len();
    if rest.len() >= need {
        chosen.extend(rng.sample_k(rest.len(), need).into_iter().map(|i| rest[i]));
    } else {
        chosen.extend(&rest);
        flags.with_replacement = true;
        while chosen.len() < want {
            chosen.push(nonzero[rng.gen_below(nonzero.len() as u64) as usize]);
        }
    }
    chosen
}

fn window_members(mask: &Mask, origin: (usize, usize), side: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for gy in origin.1..origin.1 + side {
        for gx in origin.0..origin.0 + side {
            if mask.is_set(gx, gy) {
                out.push((gx, gy));
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn descend(
    rng: &mut StreamRng,
    mask: &Mask,
    integral: &Integral,
    spec: &RegionSpec,
    origin: (usize, usize),
    level: usize,
    lineage: &mut Vec<usize>,
    coords: &mut Vec<(usize, usize)>,
    paths: &mut Vec<Vec<usize>>,
    flags: &mut Flags,
) {
    if level == 1 {
        // leaf window: sample the patches themselves
        let members = window_members(mask, origin, spec.s);
        debug_assert!(!members.is_empty(), "descended into an empty leaf");
        let k = spec.patches_per_leaf;
        let picked: Vec<(usize, usize)> = if members.len() >= k {
            rng.sample_k(members.len(), k).into_iter().map(|i| members[i]).collect()
        } else {
            flags.with_replacement = true;
            let mut p = members.clone();
            while p.len() < k {
                p.push(members[rng.gen_below(members.len() as u64) as usize]);
            }
            p
        };
        let path: Vec<usize> = lineage.iter().rev().copied().collect();
        for c in picked {
            coords.push(c);
            paths.push(path.clone());
        }
        return;
    }
    let child_side = spec.s.pow(level as u32 - 1);
    let counts: Vec<usize> = (0..spec.s * spec.s)
        .map(|i| {
            let cx = origin.0 + (i % spec.s) * child_side;
            let cy = origin.1 + (i / spec.s) * child_side;
            integral.count(cx, cy, child_side, child_side)
        })
        .collect();
    let needed = spec.needed(level - 1);
    let full: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] >= needed).collect();
    let nonzero: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] >= 1).collect();
    debug_assert!(!nonzero.is_empty(), "descended into an empty window");
    let chosen = choose_windows(rng, &full, &nonzero, spec.children_per_level, flags);
    for (slot, child) in chosen.into_iter().enumerate() {
        let cx = origin.0 + (child % spec.s) * child_side;
        let cy = origin.1 + (child / spec.s) * child_side;
        lineage.push(slot);
        descend(rng, mask, integral, spec, (cx, cy), level - 1, lineage, coords, paths, flags);
        lineage.pop();
    }
}

fn sample_regions(
    mask: &Mask,
    spec: &RegionSpec,
    n_top: usize,
    slide_id: &str,
    epoch_seed: u64,
) -> Result<SampledBag, SamplingError> {
    if n_top == 0 {
        return Err(SamplingError::BadArgument("need at least one region".into()));
    }
    let tsl = spec.total_side_length();
    if tsl > mask.grid_w || tsl > mask.grid_h {
        return Err(SamplingError::WindowTooLarge {
            side: tsl,
            grid_w: mask.grid_w,
            grid_h: mask.grid_h,
        });
    }
    if mask.count() == 0 {
        return Err(SamplingError::EmptyMask {
            slide_id: slide_id.to_string(),
        });
    }
    let integral = Integral::new(mask);
    let needed = spec.needed(spec.levels);
    // free-floating anchors: every grid placement of the TSLxTSL window
    let mut anchors: Vec<(usize, usize)> = Vec::new();
    let mut full: Vec<usize> = Vec::new();
    let mut nonzero: Vec<usize> = Vec::new();
    for ay in 0..=mask.grid_h - tsl {
        for ax in 0..=mask.grid_w - tsl {
            let c = integral.count(ax, ay, tsl, tsl);
            if c >= 1 {
                let idx = anchors.len();
                anchors.push((ax, ay));
                nonzero.push(idx);
                if c >= needed {
                    full.push(idx);
                }
            }
        }
    }
    let mut rng = bag_rng(epoch_seed, slide_id);
    let mut flags = Flags::default();
    let chosen = choose_windows(&mut rng, &full, &nonzero, n_top, &mut flags);
    let mut coords = Vec::with_capacity(n_top * spec.patches_per_top());
    let mut paths = Vec::with_capacity(coords.capacity());
    for (slot, a) in chosen.into_iter().enumerate() {
        let mut lineage = vec![slot];
        descend(
            &mut rng,
            mask,
            &integral,
            spec,
            anchors[a],
            spec.levels,
            &mut lineage,
            &mut coords,
            &mut paths,
            &mut flags,
        );
    }
    Ok(SampledBag {
        slide_id: slide_id.to_string(),
        epoch_seed,
        coords,
        group_paths: paths,
        with_replacement: flags.with_replacement,
        weakly_valid: flags.weakly_valid,
    })
}

/// Single-level regional sampling: `n_regions` SxS windows, `patches_per_leaf`
/// patches each.
pub fn sample_regional(
    mask: &Mask,
    spec: &RegionSpec,
    n_regions: usize,
    slide_id: &str,
    epoch_seed: u64,
) -> Result<SampledBag, SamplingError> {
    if spec.levels != 1 {
        return Err(SamplingError::Spec(format!(
            "regional sampling requires L=1, got L={}",
            spec.levels
        )));
    }
    sample_regions(mask, spec, n_regions, slide_id, epoch_seed)
}

/// Multi-level sampling: `n_top` TSLxTSL windows, recursive descent choosing
/// `children_per_level` subwindows per level, `patches_per_leaf` per leaf.
pub fn sample_hierarchical(
    mask: &Mask,
    spec: &RegionSpec,
    n_top: usize,
    slide_id: &str,
    epoch_seed: u64,
) -> Result<SampledBag, SamplingError> {
    if spec.levels < 2 {
        return Err(SamplingError::Spec(format!(
            "hierarchical sampling requires L>=2, got L={}",
            spec.levels
        )));
    }
    sample_regions(mask, spec, n_top, slide_id, epoch_seed)
}

/// Strategy selection as it appears in config files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SamplerConfig {
    Global { n: usize },
    Regional { spec: RegionSpec, n_regions: usize },
    Hierarchical { spec: RegionSpec, n_top: usize },
}

impl SamplerConfig {
    pub fn budget(&self) -> usize {
        match self {
            SamplerConfig::Global { n } => *n,
            SamplerConfig::Regional { spec, n_regions } => n_regions * spec.patches_per_leaf,
            SamplerConfig::Hierarchical { spec, n_top } => n_top * spec.patches_per_top(),
        }
    }
}

pub fn sample_bag(
    cfg: &SamplerConfig,
    mask: &Mask,
    slide_id: &str,
    epoch_seed: u64,
) -> Result<SampledBag, SamplingError> {
    match cfg {
        SamplerConfig::Global { n } => sample_global(mask, *n, slide_id, epoch_seed),
        SamplerConfig::Regional { spec, n_regions } => {
            sample_regional(mask, spec, *n_regions, slide_id, epoch_seed)
        }
        SamplerConfig::Hierarchical { spec, n_top } => {
            sample_hierarchical(mask, spec, *n_top, slide_id, epoch_seed)
        }
    }
}

/// One grid-aligned inference tile. `padding[ly*tsl+lx]` is true where the
/// position is out of bounds or empty; `members` lists the kept coordinates
/// in the same row-major order as the false padding positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRegion {
    pub origin: (usize, usize),
    pub members: Vec<(usize, usize)>,
    pub padding: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilingPlan {
    pub tsl: usize,
    pub regions: Vec<TileRegion>,
}

/// Tiles the grid with aligned TSLxTSL regions from the origin, dropping
/// fully-empty tiles. Every non-empty patch lands in exactly one region.
pub fn plan_inference_tiling(mask: &Mask, spec: &RegionSpec) -> TilingPlan {
    let tsl = spec.total_side_length();
    let mut regions = Vec::new();
    let tiles_x = mask.grid_w.div_ceil(tsl);
    let tiles_y = mask.grid_h.div_ceil(tsl);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let origin = (tx * tsl, ty * tsl);
            let mut members = Vec::new();
            let mut padding = vec![true; tsl * tsl];
            for ly in 0..tsl {
                for lx in 0..tsl {
                    let gx = origin.0 + lx;
                    let gy = origin.1 + ly;
                    if gx < mask.grid_w && gy < mask.grid_h && mask.is_set(gx, gy) {
                        padding[ly * tsl + lx] = false;
                        members.push((gx, gy));
                    }
                }
            }
            if !members.is_empty() {
                regions.push(TileRegion {
                    origin,
                    members,
                    padding,
                });
            }
        }
    }
    TilingPlan { tsl, regions }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageEstimate {
    pub probability: f64,
    pub std_error: f64,
    pub trials: usize,
}

/// Monte Carlo estimate of P(bag hits the ROI) for a sampler configuration.
pub fn estimate_roi_coverage(
    cfg: &SamplerConfig,
    mask: &Mask,
    roi: &[(usize, usize)],
    trials: usize,
    seed: u64,
) -> Result<CoverageEstimate, SamplingError> {
    if trials == 0 {
        return Err(SamplingError::BadArgument("trials must be >= 1".into()));
    }
    let roi_set: HashSet<(usize, usize)> = roi.iter().copied().collect();
    let mut hits = 0usize;
    for t in 0..trials {
        let bag = sample_bag(cfg, mask, &format!("cov/{t}"), seed)?;
        if bag.coords.iter().any(|c| roi_set.contains(c)) {
            hits += 1;
        }
    }
    let p = hits as f64 / trials as f64;
    Ok(CoverageEstimate {
        probability: p,
        std_error: (p * (1.0 - p) / trials as f64).sqrt(),
        trials,
    })
}

/// Exact hit probability for global sampling without replacement:
/// 1 - C(N-k, n)/C(N, n), evaluated stably as a product.
pub fn global_coverage_closed_form(n_nonempty: usize, roi_k: usize, n_sampled: usize) -> f64 {
    if roi_k == 0 {
        return 0.0;
    }
    if n_sampled + roi_k > n_nonempty {
        return 1.0;
    }
    let mut log_miss = 0.0f64;
    for i in 0..n_sampled {
        log_miss += ((n_nonempty - roi_k - i) as f64).ln() - ((n_nonempty - i) as f64).ln();
    }
    1.0 - log_miss.exp()
}
