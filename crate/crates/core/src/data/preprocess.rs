use std::fmt;
use std::str::FromStr;

use super::sample::DepthSample;
use crate::error::{Error, Result};

/// Deterministic per-dataset resize/crop applied when a sample is loaded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Recipe {
    #[default]
    None,
    CenterCrop {
        h: usize,
        w: usize,
    },
    /// Keeps the bottom `h` rows, columns centered.
    BottomCrop {
        h: usize,
        w: usize,
    },
    /// Halves both sides, then center-crops.
    HalfThenCenterCrop {
        h: usize,
        w: usize,
    },
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Recipe::None => f.write_str("none"),
            Recipe::CenterCrop { h, w } => write!(f, "center-crop {h} {w}"),
            Recipe::BottomCrop { h, w } => write!(f, "bottom-crop {h} {w}"),
            Recipe::HalfThenCenterCrop { h, w } => write!(f, "half-then-center-crop {h} {w}"),
        }
    }
}

impl FromStr for Recipe {
    type Err = Error;

    /// `none` or `<name> <h> <w>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let size = || -> Result<(usize, usize)> {
            match parts[1..] {
                [h, w] => match (h.parse(), w.parse()) {
                    (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok((h, w)),
                    _ => Err(Error::config(format!("bad recipe size in `{s}`"))),
                },
                _ => Err(Error::config(format!("recipe `{s}` needs a height and a width"))),
            }
        };
        match parts.first().copied() {
            Some("none") if parts.len() == 1 => Ok(Recipe::None),
            Some("center-crop") => size().map(|(h, w)| Recipe::CenterCrop { h, w }),
            Some("bottom-crop") => size().map(|(h, w)| Recipe::BottomCrop { h, w }),
            Some("half-then-center-crop") => size().map(|(h, w)| Recipe::HalfThenCenterCrop { h, w }),
            _ => Err(Error::config(format!("unknown recipe `{s}`"))),
        }
    }
}

/// Half-pixel-centered bilinear resize of interleaved 8-bit RGB.
pub fn resize_rgb_bilinear(rgb: &[u8], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<u8> {
    let taps = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = vec![0u8; oh * ow * 3];
    for i in 0..oh {
        let (y0, y1, fy) = taps(i, h, oh);
        for j in 0..ow {
            let (x0, x1, fx) = taps(j, w, ow);
            for c in 0..3 {
                let p = |y: usize, x: usize| rgb[(y * w + x) * 3 + c] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(i * ow + j) * 3 + c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Nearest-neighbor resize: output pixel `o` reads input `floor((o + 0.5) * in / out)`.
pub fn resize_nearest<T: Copy>(src: &[T], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<T> {
    let idx = |o: usize, n_in: usize, n_out: usize| (((2 * o + 1) * n_in) / (2 * n_out)).min(n_in - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let y = idx(i, h, oh);
        for j in 0..ow {
            out.push(src[y * w + idx(j, w, ow)]);
        }
    }
    out
}

pub fn resize(sample: &DepthSample, oh: usize, ow: usize) -> Result<DepthSample> {
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidData("resize target must be positive".into()));
    }
    let src = (sample.height, sample.width);
    DepthSample::new(
        oh,
        ow,
        resize_rgb_bilinear(&sample.rgb, src, (oh, ow)),
        resize_nearest(&sample.depth_m, src, (oh, ow)),
        resize_nearest(&sample.valid, src, (oh, ow)),
    )
}

/// Crops rows `[top, top + h)` and columns `[left, left + w)`.
pub fn crop(sample: &DepthSample, top: usize, left: usize, h: usize, w: usize) -> Result<DepthSample> {
    if h == 0 || w == 0 || top + h > sample.height || left + w > sample.width {
        return Err(Error::InvalidData(format!(
            "crop {h}x{w} at ({top}, {left}) does not fit a {}x{} image",
            sample.height, sample.width
        )));
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    let mut depth = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for i in top..top + h {
        let row = i * sample.width;
        rgb.extend_from_slice(&sample.rgb[(row + left) * 3..(row + left + w) * 3]);
        depth.extend_from_slice(&sample.depth_m[row + left..row + left + w]);
        valid.extend_from_slice(&sample.valid[row + left..row + left + w]);
    }
    DepthSample::new(h, w, rgb, depth, valid)
}

fn centered(sample: &DepthSample, h: usize, w: usize, bottom: bool) -> Result<DepthSample> {
    if h > sample.height || w > sample.width {
        return Err(Error::InvalidData(format!(
            "crop {h}x{w} is larger than the {}x{} image",
            sample.height, sample.width
        )));
    }
    let top = if bottom {
        sample.height - h
    } else {
        (sample.height - h) / 2
    };
    crop(sample, top, (sample.width - w) / 2, h, w)
}

pub fn preprocess(sample: &DepthSample, recipe: Recipe) -> Result<DepthSample> {
    match recipe {
        Recipe::None => Ok(sample.clone()),
        Recipe::CenterCrop { h, w } => centered(sample, h, w, false),
        Recipe::BottomCrop { h, w } => centered(sample, h, w, true),
        Recipe::HalfThenCenterCrop { h, w } => {
            let half = resize(sample, sample.height / 2, sample.width / 2)?;
            centered(&half, h, w, false)
        }
    }
}
