//! Synthetic whole-slide images with planted regions of interest.
//!
//! A slide is a rectangular grid of fixed-size RGB patches stored patch-major
//! in one `u8` buffer. Two dataset profiles exist: `micro` plants 1-3 tiny
//! dotted ROIs on positive slides (label = presence) plus equally dark blob
//! distractors in both classes, so the label hangs on fine-grained texture;
//! `macro` plants a large textured ring (positive) or a filled disk of equal
//! area and identical local texture (negative), so the label is only
//! decidable from the multi-patch arrangement.

pub mod augment;
pub mod gen;
pub mod io;

pub use augment::{apply_augment, augment_patch, draw_augment, AugmentDraw};
pub use gen::{generate_dataset, synthesize_slide, GenConfig, SlideInfo};
pub use io::{load_manifest, load_slide, save_manifest, save_slide};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{op} {path}: {source}")]
    Io {
        op: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte offset 0: expected \"HWSI\", found {found:?}")]
    BadMagic { path: String, found: [u8; 4] },
    #[error("{path}: unsupported HWSI version {version} at byte offset 4")]
    BadVersion { path: String, version: u16 },
    #[error("{path}: truncated at byte offset {offset}, needed {needed} more bytes")]
    Truncated {
        path: String,
        offset: usize,
        needed: usize,
    },
    #[error("{path}: invalid header field at byte offset {offset}: {detail}")]
    BadHeader {
        path: String,
        offset: usize,
        detail: String,
    },
    #[error("{path}:{line}: malformed manifest row: {detail}")]
    BadManifest {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("slide {slide_id}: every patch is empty at threshold {threshold}")]
    EmptySlide { slide_id: String, threshold: u8 },
    #[error("slide {slide_id}: {detail}")]
    Geometry { slide_id: String, detail: String },
    #[error("generation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Micro,
    Macro,
}

impl Profile {
    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Micro => "micro",
            Profile::Macro => "macro",
        }
    }

    pub fn parse(s: &str) -> Option<Profile> {
        match s {
            "micro" => Some(Profile::Micro),
            "macro" => Some(Profile::Macro),
            _ => None,
        }
    }
}

/// One planted region. For micro ROIs `extent` is the side of the patch box
/// and the ring fields are zero; for macro ROIs `ring_outer` is the outer
/// radius in patch units and `ring_inner` is zero on the (disk) negatives.
#[derive(Debug, Clone)]
pub struct RoiSpec {
    pub profile: Profile,
    /// Center in patch units (grid coords).
    pub center: (f64, f64),
    /// Patches per side of the bounding box.
    pub extent: usize,
    pub dot_density: f64,
    pub dot_intensity: f64,
    pub ring_inner: f64,
    pub ring_outer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub slide_id: String,
    /// Slide file path relative to the dataset directory.
    pub path: String,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub profile: Profile,
    pub seed: u64,
    pub generator_version: u32,
    pub grid_w: usize,
    pub grid_h: usize,
    pub patch_px: usize,
    pub threshold: u8,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlideGrid {
    pub slide_id: String,
    pub grid_w: usize,
    pub grid_h: usize,
    pub patch_px: usize,
    pub channels: usize,
    pub label: u8,
    /// Patch-major pixels: patch `gy*grid_w+gx` owns a contiguous
    /// `patch_px*patch_px*channels` block, row-major with interleaved channels.
    pub pixels: Vec<u8>,
    /// Row-major non-empty flags, set by [`filter_empty_patches`].
    pub nonempty: Option<Vec<bool>>,
}

impl SlideGrid {
    pub fn new(
        slide_id: String,
        grid_w: usize,
        grid_h: usize,
        patch_px: usize,
        channels: usize,
        label: u8,
        pixels: Vec<u8>,
    ) -> Result<SlideGrid, SynthError> {
        let expected = grid_w * grid_h * patch_px * patch_px * channels;
        if pixels.len() != expected {
            return Err(SynthError::Config(format!(
                "pixel buffer length {} does not match {grid_w}x{grid_h} grid of \
                 {patch_px}px {channels}-channel patches (expected {expected})",
                pixels.len()
            )));
        }
        Ok(SlideGrid {
            slide_id,
            grid_w,
            grid_h,
            patch_px,
            channels,
            label,
            pixels,
            nonempty: None,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid_w * self.grid_h
    }

    /// Bytes per patch block.
    pub fn patch_len(&self) -> usize {
        self.patch_px * self.patch_px * self.channels
    }

    pub fn patch_index(&self, gx: usize, gy: usize) -> usize {
        gy * self.grid_w + gx
    }

    pub fn patch_pixels(&self, gx: usize, gy: usize) -> &[u8] {
        let len = self.patch_len();
        let start = self.patch_index(gx, gy) * len;
        &self.pixels[start..start + len]
    }

    pub fn patch_pixels_mut(&mut self, gx: usize, gy: usize) -> &mut [u8] {
        let len = self.patch_len();
        let start = self.patch_index(gx, gy) * len;
        &mut self.pixels[start..start + len]
    }

    pub fn patch_mean_intensity(&self, gx: usize, gy: usize) -> f64 {
        let block = self.patch_pixels(gx, gy);
        let sum: u64 = block.iter().map(|&v| v as u64).sum();
        sum as f64 / block.len() as f64
    }

    pub fn nonempty_mask(&self) -> Option<&[bool]> {
        self.nonempty.as_deref()
    }

    /// Row-major (gx, gy) coordinates of every non-empty patch.
    pub fn nonempty_coords(&self) -> Option<Vec<(usize, usize)>> {
        let mask = self.nonempty.as_ref()?;
        let mut out = Vec::new();
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                if mask[gy * self.grid_w + gx] {
                    out.push((gx, gy));
                }
            }
        }
        Some(out)
    }
}

/// Marks each patch non-empty iff its mean pixel intensity is at most
/// `threshold` (the near-white background sits above it). The mask is stored
/// on the slide and returned. Errors if every patch is empty.
pub fn filter_empty_patches(
    slide: &mut SlideGrid,
    threshold: u8,
) -> Result<&[bool], SynthError> {
    if threshold == 0 {
        return Err(SynthError::Config(
            "empty-patch threshold must be positive".into(),
        ));
    }
    let mut mask = vec![false; slide.n_patches()];
    let mut any = false;
    for gy in 0..slide.grid_h {
        for gx in 0..slide.grid_w {
            let keep = slide.patch_mean_intensity(gx, gy) <= threshold as f64;
            mask[gy * slide.grid_w + gx] = keep;
            any |= keep;
        }
    }
    if !any {
        return Err(SynthError::EmptySlide {
            slide_id: slide.slide_id.clone(),
            threshold,
        });
    }
    slide.nonempty = Some(mask);
    Ok(slide.nonempty.as_deref().unwrap())
}
