//! Training-time patch augmentation: flips, contrast, blur, unsharp mask.
//!
//! [`draw_augment`] always consumes exactly five RNG draws (hflip coin,
//! vflip coin, contrast, blur coin, sharpen amount) so the stream position
//! never depends on which transforms fire.

use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    /// Contrast scale around the patch mean, in [0.9, 1.1].
    pub contrast: f64,
    /// Whether to apply the 3x3 box blur (probability 0.2).
    pub blur: bool,
    /// Unsharp-mask amount, in [0, 0.3].
    pub sharpen: f64,
}

impl AugmentDraw {
    /// The draw that leaves any patch unchanged.
    pub fn identity() -> AugmentDraw {
        AugmentDraw {
            hflip: false,
            vflip: false,
            contrast: 1.0,
            blur: false,
            sharpen: 0.0,
        }
    }
}

pub fn draw_augment(rng: &mut StreamRng) -> AugmentDraw {
    AugmentDraw {
        hflip: rng.coin(0.5),
        vflip: rng.coin(0.5),
        contrast: rng.uniform(0.9, 1.1),
        blur: rng.coin(0.2),
        sharpen: rng.uniform(0.0, 0.3),
    }
}

/// 3x3 box blur with clamped borders, per channel.
fn box_blur(src: &[f64], p: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..p {
        for x in 0..p {
            for c in 0..channels {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let sy = (y as i64 + dy).clamp(0, p as i64 - 1) as usize;
                        let sx = (x as i64 + dx).clamp(0, p as i64 - 1) as usize;
                        acc += src[(sy * p + sx) * channels + c];
                    }
                }
                out[(y * p + x) * channels + c] = acc / 9.0;
            }
        }
    }
    out
}

/// Applies one augmentation draw in place. Transform order: flips, contrast
/// about the overall patch mean, optional blur, unsharp mask; then clamp to
/// [0, 255]. Intermediates stay in f64, rounding happens once at the end.
pub fn apply_augment(patch: &mut [u8], patch_px: usize, channels: usize, d: &AugmentDraw) {
    let p = patch_px;
    debug_assert_eq!(patch.len(), p * p * channels);
    let mut buf: Vec<f64> = patch.iter().map(|&v| v as f64).collect();

    if d.hflip {
        for y in 0..p {
            for x in 0..p / 2 {
                for c in 0..channels {
                    buf.swap((y * p + x) * channels + c, (y * p + (p - 1 - x)) * channels + c);
                }
            }
        }
    }
    if d.vflip {
        for y in 0..p / 2 {
            for x in 0..p {
                for c in 0..channels {
                    buf.swap((y * p + x) * channels + c, (((p - 1 - y) * p) + x) * channels + c);
                }
            }
        }
    }

    let mean = buf.iter().sum::<f64>() / buf.len() as f64;
    for v in buf.iter_mut() {
        *v = mean + d.contrast * (*v - mean);
    }

    if d.blur {
        buf = box_blur(&buf, p, channels);
    }

    if d.sharpen != 0.0 {
        let blurred = box_blur(&buf, p, channels);
        for (v, b) in buf.iter_mut().zip(&blurred) {
            *v += d.sharpen * (*v - b);
        }
    }

    for (dst, v) in patch.iter_mut().zip(&buf) {
        *dst = v.round().clamp(0.0, 255.0) as u8;
    }
}

/// Draws and applies one augmentation.
pub fn augment_patch(patch: &mut [u8], patch_px: usize, channels: usize, rng: &mut StreamRng) {
    let d = draw_augment(rng);
    apply_augment(patch, patch_px, channels, &d);
}
