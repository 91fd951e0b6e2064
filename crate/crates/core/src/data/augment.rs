//! Online augmentation: rotation, scaling, color jitter, horizontal flip.
//!
//! Rotation and scaling share one inverse pixel map. Depth and validity are
//! resampled nearest-neighbor and RGB bilinearly, at the same source
//! coordinate. Pixels whose source falls outside the image become invalid.

use rand::Rng;

use super::sample::DepthSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Degrees, counter-clockwise.
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    /// Shared range for brightness, contrast and saturation factors.
    pub jitter: (f64, f64),
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: (-5.0, 5.0),
            scale: (1.0, 1.5),
            jitter: (0.6, 1.4),
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation disabled.
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            jitter: (1.0, 1.0),
            flip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.rotation_deg) || !ordered(self.scale) || !ordered(self.jitter) {
            return Err(Error::config("augmentation ranges must be finite with lo <= hi"));
        }
        if self.scale.0 < 1.0 {
            return Err(Error::config("scale lower bound must be at least 1"));
        }
        if self.jitter.0 < 0.0 {
            return Err(Error::config("jitter factors must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Draws one parameter set. Always consumes exactly six uniforms, in the
    /// order rotation, scale, brightness, contrast, saturation, flip.
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        let mut u = |(lo, hi): (f64, f64)| lo + rng.random::<f64>() * (hi - lo);
        let rotation_deg = u(self.rotation_deg);
        let scale = u(self.scale);
        let brightness = u(self.jitter);
        let contrast = u(self.jitter);
        let saturation = u(self.jitter);
        let flip = u((0.0, 1.0)) < self.flip_prob;
        AugmentParams {
            rotation_deg,
            scale,
            brightness,
            contrast,
            saturation,
            flip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            scale: 1.0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            flip: false,
        }
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &DepthSample, cfg: &AugmentConfig, rng: &mut R) -> DepthSample {
    apply(sample, &cfg.sample_params(rng))
}

/// Applies a fixed parameter set. Neutral parameters skip their step, so
/// the identity set returns the input unchanged.
pub fn apply(sample: &DepthSample, p: &AugmentParams) -> DepthSample {
    let mut s = if p.rotation_deg != 0.0 || p.scale != 1.0 {
        warp(sample, p.rotation_deg, p.scale)
    } else {
        sample.clone()
    };
    jitter(&mut s, p.brightness, p.contrast, p.saturation);
    if p.flip {
        flip(&mut s);
    }
    s
}

/// Continuous source coordinate `(x, y)` in the original image of output
/// pixel `(i, j)`, where pixel `k` spans `[k, k + 1)`.
///
/// The image is rotated by `theta` about its center, resized by `s` to
/// `round(h * s) x round(w * s)`, then center-cropped back to `h x w`.
pub fn source_coord(i: usize, j: usize, h: usize, w: usize, theta_deg: f64, s: f64) -> (f64, f64) {
    let (hs, ws) = ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize);
    let (top, left) = ((hs - h) / 2, (ws - w) / 2);
    let qx = (j + left) as f64 + 0.5;
    let qy = (i + top) as f64 + 0.5;
    let (qx, qy) = (qx * w as f64 / ws as f64, qy * h as f64 / hs as f64);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (sin, cos) = theta_deg.to_radians().sin_cos();
    let (dx, dy) = (qx - cx, qy - cy);
    // Inverse rotation; y grows downwards, so positive angles turn the
    // picture counter-clockwise on screen.
    (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
}

fn warp(src: &DepthSample, theta_deg: f64, s: f64) -> DepthSample {
    let (h, w) = (src.height, src.width);
    let mut rgb = vec![0u8; 3 * h * w];
    let mut depth = vec![0f32; h * w];
    let mut valid = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            let (x, y) = source_coord(i, j, h, w, theta_deg, s);
            if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
                continue;
            }
            let o = i * w + j;
            let n = y as usize * w + x as usize;
            if src.valid[n] {
                valid[o] = true;
                depth[o] = (src.depth_m[n] as f64 / s) as f32;
            }
            let (sx, sy) = ((x - 0.5).max(0.0), (y - 0.5).max(0.0));
            let (x0, y0) = ((sx as usize).min(w - 1), (sy as usize).min(h - 1));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src.rgb[(yy * w + xx) * 3 + c] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                rgb[o * 3 + c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    DepthSample {
        height: h,
        width: w,
        rgb,
        depth_m: depth,
        valid,
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, then contrast about the mean gray level, then saturation
/// about each pixel's gray level; clamped after every step.
fn jitter(s: &mut DepthSample, brightness: f64, contrast: f64, saturation: f64) {
    if brightness == 1.0 && contrast == 1.0 && saturation == 1.0 {
        return;
    }
    let mut px: Vec<f32> = s.rgb.iter().map(|&v| v as f32).collect();
    let clamp = |v: f32| v.clamp(0.0, 255.0);
    if brightness != 1.0 {
        let b = brightness as f32;
        px.iter_mut().for_each(|v| *v = clamp(*v * b));
    }
    if contrast != 1.0 {
        let c = contrast as f32;
        let mean = px.chunks_exact(3).map(|p| luma(p[0], p[1], p[2]) as f64).sum::<f64>() / s.pixels() as f64;
        let mean = mean as f32;
        px.iter_mut().for_each(|v| *v = clamp((*v - mean) * c + mean));
    }
    if saturation != 1.0 {
        let k = saturation as f32;
        for p in px.chunks_exact_mut(3) {
            let g = luma(p[0], p[1], p[2]);
            p.iter_mut().for_each(|v| *v = clamp((*v - g) * k + g));
        }
    }
    for (dst, v) in s.rgb.iter_mut().zip(px) {
        *dst = v.round() as u8;
    }
}

pub fn flip(s: &mut DepthSample) {
    let w = s.width;
    for i in 0..s.height {
        s.depth_m[i * w..(i + 1) * w].reverse();
        s.valid[i * w..(i + 1) * w].reverse();
        let row = &mut s.rgb[i * w * 3..(i + 1) * w * 3];
        row.reverse();
        // reversing bytes also reversed each pixel's channel order
        row.chunks_exact_mut(3).for_each(|p| p.reverse());
    }
}
