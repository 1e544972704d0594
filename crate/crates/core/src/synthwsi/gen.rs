//! Slide synthesis: tissue geometry, planted ROIs, and pixel noise.
//!
//! Everything is a pure function of (config, seed). Each slide draws from its
//! own stream keyed by the slide id, so generation order is irrelevant and
//! slides can be produced in parallel. Pixel noise is Bates(3) — the mean of
//! three uniforms, scaled to the requested mean/sd — which is bounded,
//! platform-stable (pure arithmetic), and close enough to Gaussian for
//! texture.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::io::{save_manifest, save_slide};
use super::{
    filter_empty_patches, DatasetManifest, ManifestEntry, Profile, RoiSpec, SlideGrid, Split,
    SynthError,
};
use crate::rng::StreamRng;

pub const GENERATOR_VERSION: u32 = 1;

// Background / tissue luminance (mean, sd) and per-channel tissue tint.
const BG_MEAN: f64 = 235.0;
const BG_SD: f64 = 8.0;
const TISSUE_MEAN: f64 = 150.0;
const TISSUE_SD: f64 = 10.0;
const TISSUE_TINT: [f64; 3] = [8.0, -6.0, -2.0];

// Micro ROIs: sparse dark dots on tissue.
const MICRO_DOT_DENSITY: f64 = 0.035;
const MICRO_DOT_MEAN: f64 = 60.0;
const MICRO_DOT_SD: f64 = 8.0;
const DOT_TINT: [f64; 3] = [2.0, -14.0, 10.0];

// Micro distractors: coarse-blob clusters in both classes, drawn from the
// same darkness family and area budget as the ROI speckle. Patch-level
// brightness cannot separate the two; only the dot-vs-blob granularity can,
// which keeps slide labels tied to fine texture rather than to "contains
// something dark".
const MICRO_BLOB_R_LO: f64 = 3.3;
const MICRO_BLOB_R_HI: f64 = 3.9;

// Macro ROIs: granular texture, identical for rings and disks.
const GRAIN_PROB: f64 = 0.25;
const GRAIN_MEAN: f64 = 100.0;
const GRAIN_SD: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub name: String,
    pub profile: Profile,
    pub n_slides: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub patch_px: usize,
    pub positive_fraction: f64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    /// Empty-patch mean-intensity cutoff.
    pub threshold: u8,
}

impl GenConfig {
    pub fn micro(name: &str, n_slides: usize) -> GenConfig {
        GenConfig {
            name: name.to_string(),
            profile: Profile::Micro,
            n_slides,
            grid_w: 64,
            grid_h: 64,
            patch_px: 16,
            positive_fraction: 0.5,
            split_train: 0.65,
            split_val: 0.15,
            split_test: 0.20,
            threshold: 220,
        }
    }

    pub fn macro_rings(name: &str, n_slides: usize) -> GenConfig {
        GenConfig {
            profile: Profile::Macro,
            ..GenConfig::micro(name, n_slides)
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::Config(msg));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return bad(format!(
                "dataset name {:?} must be non-empty [A-Za-z0-9_-]",
                self.name
            ));
        }
        if self.n_slides == 0 {
            return bad("n_slides must be positive".into());
        }
        if self.grid_w < 8 || self.grid_h < 8 {
            return bad(format!(
                "grid {}x{} too small (minimum 8x8)",
                self.grid_w, self.grid_h
            ));
        }
        if self.patch_px < 4 {
            return bad(format!("patch_px {} too small (minimum 4)", self.patch_px));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!(
                "positive_fraction {} outside [0,1]",
                self.positive_fraction
            ));
        }
        let splits = [self.split_train, self.split_val, self.split_test];
        if splits.iter().any(|s| *s < 0.0) {
            return bad("split fractions must be non-negative".into());
        }
        let sum: f64 = splits.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions sum to {sum}, expected 1"));
        }
        if self.threshold == 0 {
            return bad("threshold must be positive".into());
        }
        Ok(())
    }
}

/// Generator-side ground truth for one slide, used by coverage estimation
/// and by tests that need the planted coordinates.
#[derive(Debug, Clone)]
pub struct SlideInfo {
    pub slide_id: String,
    pub label: u8,
    pub rois: Vec<RoiSpec>,
    /// Patch-center members of the planted ROIs, as (gx, gy).
    pub roi_patches: Vec<(usize, usize)>,
    /// Patch-center members of macro distractor blobs.
    pub distractor_patches: Vec<(usize, usize)>,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    /// Point test against the ellipse shrunk by `margin` patches on each axis.
    fn contains(&self, u: f64, v: f64, margin: f64) -> bool {
        let a = self.a - margin;
        let b = self.b - margin;
        if a <= 0.0 || b <= 0.0 {
            return false;
        }
        let du = (u - self.cx) / a;
        let dv = (v - self.cy) / b;
        du * du + dv * dv <= 1.0
    }
}

struct Geometry {
    ellipse: Ellipse,
    rois: Vec<RoiSpec>,
    /// Macro distractor blobs as (cx, cy, radius) in patch units.
    distractors: Vec<(f64, f64, f64)>,
}

fn sample_ellipse(rng: &mut StreamRng, cfg: &GenConfig) -> Ellipse {
    let w = cfg.grid_w as f64;
    let h = cfg.grid_h as f64;
    Ellipse {
        a: rng.uniform(0.36, 0.40) * w,
        b: rng.uniform(0.29, 0.32) * h,
        cx: w / 2.0 + rng.uniform(-1.5, 1.5),
        cy: h / 2.0 + rng.uniform(-1.5, 1.5),
    }
}

fn micro_geometry(
    rng: &mut StreamRng,
    cfg: &GenConfig,
    slide_id: &str,
    label: u8,
    ellipse: Ellipse,
) -> Result<Geometry, SynthError> {
    let mut rois: Vec<RoiSpec> = Vec::new();
    let mut boxes: Vec<(usize, usize, usize)> = Vec::new();
    if label == 1 {
        let n_rois = 1 + rng.gen_below(3) as usize;
        for _ in 0..n_rois {
            let e = 1 + rng.gen_below(2) as usize;
            let mut placed = false;
            for _ in 0..1000 {
                let bx = rng.gen_below((cfg.grid_w - e + 1) as u64) as usize;
                let by = rng.gen_below((cfg.grid_h - e + 1) as u64) as usize;
                let corners = [
                    (bx, by),
                    (bx + e - 1, by),
                    (bx, by + e - 1),
                    (bx + e - 1, by + e - 1),
                ];
                let inside = corners
                    .iter()
                    .all(|&(x, y)| ellipse.contains(x as f64 + 0.5, y as f64 + 0.5, 2.0));
                // keep ROIs at least 3 patches apart
                let clear = boxes.iter().all(|&(ox, oy, oe)| {
                    bx + e + 3 <= ox || ox + oe + 3 <= bx || by + e + 3 <= oy || oy + oe + 3 <= by
                });
                if inside && clear {
                    boxes.push((bx, by, e));
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(SynthError::Geometry {
                    slide_id: slide_id.to_string(),
                    detail: "could not place micro ROI inside tissue".into(),
                });
            }
        }
        for &(bx, by, e) in &boxes {
            rois.push(RoiSpec {
                profile: Profile::Micro,
                center: (bx as f64 + e as f64 / 2.0, by as f64 + e as f64 / 2.0),
                extent: e,
                dot_density: MICRO_DOT_DENSITY,
                dot_intensity: MICRO_DOT_MEAN,
                ring_inner: 0.0,
                ring_outer: 0.0,
            });
        }
    }

    // Blob distractor clusters land in both classes with the same count and
    // extent distribution as the ROIs, kept clear of the ROIs and of each
    // other. Stored as circles sized to mark exactly the e*e member patches.
    let n_d = 1 + rng.gen_below(3) as usize;
    let mut dboxes: Vec<(usize, usize, usize)> = Vec::new();
    for _ in 0..n_d {
        let e = 1 + rng.gen_below(2) as usize;
        for _ in 0..1000 {
            let bx = rng.gen_below((cfg.grid_w - e + 1) as u64) as usize;
            let by = rng.gen_below((cfg.grid_h - e + 1) as u64) as usize;
            let corners = [
                (bx, by),
                (bx + e - 1, by),
                (bx, by + e - 1),
                (bx + e - 1, by + e - 1),
            ];
            let inside = corners
                .iter()
                .all(|&(x, y)| ellipse.contains(x as f64 + 0.5, y as f64 + 0.5, 2.0));
            let clear = boxes.iter().chain(&dboxes).all(|&(ox, oy, oe)| {
                bx + e + 2 <= ox || ox + oe + 2 <= bx || by + e + 2 <= oy || oy + oe + 2 <= by
            });
            if inside && clear {
                dboxes.push((bx, by, e));
                break;
            }
        }
        // placement exhausted: proceed with fewer distractors
    }
    let distractors = dboxes
        .iter()
        .map(|&(bx, by, e)| {
            let r = if e == 1 { 0.3 } else { 0.9 };
            (bx as f64 + e as f64 / 2.0, by as f64 + e as f64 / 2.0, r)
        })
        .collect();
    Ok(Geometry {
        ellipse,
        rois,
        distractors,
    })
}

fn macro_geometry(
    rng: &mut StreamRng,
    cfg: &GenConfig,
    slide_id: &str,
    label: u8,
    ellipse: Ellipse,
) -> Result<Geometry, SynthError> {
    // Disk radius is drawn for both classes; the positive ring gets
    // inner = sqrt(outer^2 - disk^2) so ring and disk cover equal area.
    let r_d = rng.uniform(5.8, 7.2);
    let (ring_inner, ring_outer) = if label == 1 {
        let r_o = rng.uniform(r_d + 1.2, (r_d + 2.6).min(9.8));
        ((r_o * r_o - r_d * r_d).sqrt(), r_o)
    } else {
        (0.0, r_d)
    };
    let margin = ring_outer + 1.0;
    let w = cfg.grid_w as f64;
    let h = cfg.grid_h as f64;
    let mut center = None;
    for _ in 0..1000 {
        let cx = rng.uniform(0.0, w);
        let cy = rng.uniform(0.0, h);
        if ellipse.contains(cx, cy, margin) {
            center = Some((cx, cy));
            break;
        }
    }
    let (cx, cy) = center.ok_or_else(|| SynthError::Geometry {
        slide_id: slide_id.to_string(),
        detail: format!(
            "ROI of radius {ring_outer:.1} patches does not fit the tissue area \
             ({:.1}x{:.1} ellipse)",
            ellipse.a, ellipse.b
        ),
    })?;

    // Distractor blobs with the same texture appear in both classes so the
    // main ROI's edge statistics are not the only textured-boundary source.
    let n_d = rng.gen_below(4) as usize;
    let mut distractors: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..n_d {
        let r = rng.uniform(1.2, 2.4);
        for _ in 0..200 {
            let dx = rng.uniform(0.0, w);
            let dy = rng.uniform(0.0, h);
            let clear_main = ((dx - cx).powi(2) + (dy - cy).powi(2)).sqrt() >= ring_outer + r + 1.0;
            let clear_others = distractors
                .iter()
                .all(|&(ox, oy, or)| ((dx - ox).powi(2) + (dy - oy).powi(2)).sqrt() >= or + r + 1.0);
            if ellipse.contains(dx, dy, r + 1.0) && clear_main && clear_others {
                distractors.push((dx, dy, r));
                break;
            }
        }
        // placement exhausted: proceed with fewer distractors
    }
    let roi = RoiSpec {
        profile: Profile::Macro,
        center: (cx, cy),
        extent: (2.0 * ring_outer).ceil() as usize,
        dot_density: GRAIN_PROB,
        dot_intensity: GRAIN_MEAN,
        ring_inner,
        ring_outer,
    };
    Ok(Geometry {
        ellipse,
        rois: vec![roi],
        distractors,
    })
}

fn plan_geometry(
    rng: &mut StreamRng,
    cfg: &GenConfig,
    slide_id: &str,
    label: u8,
) -> Result<Geometry, SynthError> {
    let ellipse = sample_ellipse(rng, cfg);
    match cfg.profile {
        Profile::Micro => micro_geometry(rng, cfg, slide_id, label, ellipse),
        Profile::Macro => macro_geometry(rng, cfg, slide_id, label, ellipse),
    }
}

fn patch_membership(cfg: &GenConfig, geo: &Geometry) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut roi_patches = Vec::new();
    let mut distractor_patches = Vec::new();
    for gy in 0..cfg.grid_h {
        for gx in 0..cfg.grid_w {
            let u = gx as f64 + 0.5;
            let v = gy as f64 + 0.5;
            let in_roi = geo.rois.iter().any(|r| match r.profile {
                Profile::Micro => {
                    let half = r.extent as f64 / 2.0;
                    (u - r.center.0).abs() < half && (v - r.center.1).abs() < half
                }
                Profile::Macro => {
                    let d2 = (u - r.center.0).powi(2) + (v - r.center.1).powi(2);
                    d2 >= r.ring_inner * r.ring_inner && d2 <= r.ring_outer * r.ring_outer
                }
            });
            if in_roi {
                roi_patches.push((gx, gy));
            } else if geo
                .distractors
                .iter()
                .any(|&(cx, cy, r)| (u - cx).powi(2) + (v - cy).powi(2) <= r * r)
            {
                distractor_patches.push((gx, gy));
            }
        }
    }
    (roi_patches, distractor_patches)
}

/// Geometry-only synthesis: the planted layout without the pixel pass.
/// Identical to the layout [`synthesize_slide`] paints, since both consume
/// the slide stream in the same order.
pub fn plan_slide(
    cfg: &GenConfig,
    seed: u64,
    slide_id: &str,
    label: u8,
) -> Result<SlideInfo, SynthError> {
    let mut rng = StreamRng::new(seed, slide_id);
    let geo = plan_geometry(&mut rng, cfg, slide_id, label)?;
    let (roi_patches, distractor_patches) = patch_membership(cfg, &geo);
    Ok(SlideInfo {
        slide_id: slide_id.to_string(),
        label,
        rois: geo.rois,
        roi_patches,
        distractor_patches,
    })
}

fn bates3(rng: &mut StreamRng) -> f64 {
    (rng.next_f64() + rng.next_f64() + rng.next_f64()) / 3.0
}

/// Bates(3) noise with the requested mean and standard deviation.
fn noise(t: f64, mean: f64, sd: f64) -> f64 {
    mean + (t - 0.5) * 6.0 * sd
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn paint(cfg: &GenConfig, rng: &mut StreamRng, geo: &Geometry) -> Vec<u8> {
    let p = cfg.patch_px;
    let pf = p as f64;
    let mut pixels = Vec::with_capacity(cfg.grid_w * cfg.grid_h * p * p * 3);
    let is_macro = cfg.profile == Profile::Macro;
    for gy in 0..cfg.grid_h {
        for gx in 0..cfg.grid_w {
            for y in 0..p {
                for x in 0..p {
                    let u = gx as f64 + (x as f64 + 0.5) / pf;
                    let v = gy as f64 + (y as f64 + 0.5) / pf;
                    let t = bates3(rng);
                    // macro draws the grain coin unconditionally so the pixel
                    // stream does not depend on the geometry
                    let grain_draw = if is_macro { rng.next_f64() } else { 1.0 };
                    let in_tissue = geo.ellipse.contains(u, v, 0.0);
                    let mut grain = false;
                    if is_macro && in_tissue {
                        let in_roi = geo.rois.iter().any(|r| {
                            let d2 = (u - r.center.0).powi(2) + (v - r.center.1).powi(2);
                            d2 >= r.ring_inner * r.ring_inner && d2 <= r.ring_outer * r.ring_outer
                        }) || geo.distractors.iter().any(|&(cx, cy, r)| {
                            (u - cx).powi(2) + (v - cy).powi(2) <= r * r
                        });
                        grain = in_roi && grain_draw < GRAIN_PROB;
                    }
                    let (lum, tint) = if grain {
                        (noise(t, GRAIN_MEAN, GRAIN_SD), &DOT_TINT)
                    } else if in_tissue {
                        (noise(t, TISSUE_MEAN, TISSUE_SD), &TISSUE_TINT)
                    } else {
                        (noise(t, BG_MEAN, BG_SD), &[0.0; 3])
                    };
                    for c in 0..3 {
                        pixels.push(clamp_u8(lum + tint[c]));
                    }
                }
            }
        }
    }
    pixels
}

/// Scatters dark dots over the micro ROI patches, after the base pass.
fn paint_micro_dots(slide: &mut SlideGrid, rng: &mut StreamRng, geo: &Geometry) {
    let p = slide.patch_px;
    let n_dots = (MICRO_DOT_DENSITY * (p * p) as f64).round() as usize;
    for roi in &geo.rois {
        let e = roi.extent;
        let bx = (roi.center.0 - e as f64 / 2.0).round() as usize;
        let by = (roi.center.1 - e as f64 / 2.0).round() as usize;
        for gy in by..by + e {
            for gx in bx..bx + e {
                for _ in 0..n_dots {
                    let dx = rng.gen_below(p as u64) as usize;
                    let dy = rng.gen_below(p as u64) as usize;
                    let lum = noise(bates3(rng), roi.dot_intensity, MICRO_DOT_SD);
                    let block = slide.patch_pixels_mut(gx, gy);
                    for (ox, oy) in [(0i64, 0i64), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                        let px = dx as i64 + ox;
                        let py = dy as i64 + oy;
                        if px < 0 || py < 0 || px >= p as i64 || py >= p as i64 {
                            continue;
                        }
                        let base = (py as usize * p + px as usize) * 3;
                        for c in 0..3 {
                            block[base + c] = clamp_u8(lum + DOT_TINT[c]);
                        }
                    }
                }
            }
        }
    }
}

/// Stamps one large dark disc on each micro distractor patch, after the base
/// pass. The disc matches the ROI speckle in darkness and total area, so the
/// two textures differ only in granularity.
fn paint_micro_blobs(slide: &mut SlideGrid, rng: &mut StreamRng, geo: &Geometry) {
    let p = slide.patch_px;
    let pf = p as f64;
    for &(cx, cy, cr) in &geo.distractors {
        let lo = |c: f64| (c - cr).floor().max(0.0) as usize;
        let hi_x = (cx + cr).ceil().min(slide.grid_w as f64) as usize;
        let hi_y = (cy + cr).ceil().min(slide.grid_h as f64) as usize;
        for gy in lo(cy)..hi_y {
            for gx in lo(cx)..hi_x {
                let du = gx as f64 + 0.5 - cx;
                let dv = gy as f64 + 0.5 - cy;
                if du * du + dv * dv > cr * cr {
                    continue;
                }
                let r = rng
                    .uniform(MICRO_BLOB_R_LO, MICRO_BLOB_R_HI)
                    .min(pf / 2.0 - 0.5);
                let bx = rng.uniform(r, pf - r);
                let by = rng.uniform(r, pf - r);
                let lum = noise(bates3(rng), MICRO_DOT_MEAN, MICRO_DOT_SD);
                let block = slide.patch_pixels_mut(gx, gy);
                for y in 0..p {
                    for x in 0..p {
                        let dx = x as f64 + 0.5 - bx;
                        let dy = y as f64 + 0.5 - by;
                        if dx * dx + dy * dy <= r * r {
                            let base = (y * p + x) * 3;
                            for c in 0..3 {
                                block[base + c] = clamp_u8(lum + DOT_TINT[c]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Produces one slide deterministically from `(config, seed, slide_id, label)`.
/// The non-empty mask is computed with the config's threshold before return.
pub fn synthesize_slide(
    cfg: &GenConfig,
    seed: u64,
    slide_id: &str,
    label: u8,
) -> Result<(SlideGrid, SlideInfo), SynthError> {
    let mut rng = StreamRng::new(seed, slide_id);
    let geo = plan_geometry(&mut rng, cfg, slide_id, label)?;
    let pixels = paint(cfg, &mut rng, &geo);
    let mut slide = SlideGrid::new(
        slide_id.to_string(),
        cfg.grid_w,
        cfg.grid_h,
        cfg.patch_px,
        3,
        label,
        pixels,
    )?;
    if cfg.profile == Profile::Micro {
        paint_micro_dots(&mut slide, &mut rng, &geo);
        paint_micro_blobs(&mut slide, &mut rng, &geo);
    }
    filter_empty_patches(&mut slide, cfg.threshold)?;
    let (roi_patches, distractor_patches) = patch_membership(cfg, &geo);
    Ok((
        slide,
        SlideInfo {
            slide_id: slide_id.to_string(),
            label,
            rois: geo.rois,
            roi_patches,
            distractor_patches,
        },
    ))
}

/// Deterministic label/split assignment for `generate_dataset`: labels by a
/// shuffled prefix, splits stratified per class with rounded counts.
pub fn plan_assignments(cfg: &GenConfig, seed: u64) -> (Vec<u8>, Vec<Split>) {
    let n = cfg.n_slides;
    let n_pos = (n as f64 * cfg.positive_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    StreamRng::new(seed, "labels").shuffle(&mut order);
    let mut labels = vec![0u8; n];
    for &i in order.iter().take(n_pos.min(n)) {
        labels[i] = 1;
    }
    let mut splits = vec![Split::Train; n];
    for class in [1u8, 0u8] {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        StreamRng::new(seed, &format!("split/{class}")).shuffle(&mut idx);
        let nc = idx.len();
        let n_tr = ((cfg.split_train * nc as f64).round() as usize).min(nc);
        let n_va = ((cfg.split_val * nc as f64).round() as usize).min(nc - n_tr);
        for (j, &i) in idx.iter().enumerate() {
            splits[i] = if j < n_tr {
                Split::Train
            } else if j < n_tr + n_va {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    (labels, splits)
}

/// Generates the full dataset under `out_dir`: `slides/*.hwsi`,
/// `manifest.csv`, `dataset.meta`. Slides are synthesized in parallel;
/// outputs are byte-identical for a given (config, seed) regardless.
pub fn generate_dataset(
    cfg: &GenConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<SlideInfo>), SynthError> {
    cfg.validate()?;
    let slides_dir = out_dir.join("slides");
    fs::create_dir_all(&slides_dir).map_err(|e| SynthError::Io {
        op: "create_dir",
        path: slides_dir.display().to_string(),
        source: e,
    })?;
    let (labels, splits) = plan_assignments(cfg, seed);
    let infos: Vec<SlideInfo> = (0..cfg.n_slides)
        .into_par_iter()
        .map(|i| {
            let slide_id = format!("slide_{i:04}");
            let (slide, info) = synthesize_slide(cfg, seed, &slide_id, labels[i])?;
            save_slide(&slide, &slides_dir.join(format!("{slide_id}.hwsi")))?;
            Ok(info)
        })
        .collect::<Result<_, SynthError>>()?;
    let entries: Vec<ManifestEntry> = (0..cfg.n_slides)
        .map(|i| {
            let slide_id = format!("slide_{i:04}");
            ManifestEntry {
                path: format!("slides/{slide_id}.hwsi"),
                slide_id,
                label: labels[i],
                split: splits[i],
            }
        })
        .collect();
    let manifest = DatasetManifest {
        name: cfg.name.clone(),
        profile: cfg.profile,
        seed,
        generator_version: GENERATOR_VERSION,
        grid_w: cfg.grid_w,
        grid_h: cfg.grid_h,
        patch_px: cfg.patch_px,
        threshold: cfg.threshold,
        entries,
    };
    save_manifest(&manifest, out_dir)?;
    Ok((manifest, infos))
}
