use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// RGB image with a metric depth map and validity mask, all `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    /// Meters.
    pub depth_m: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthSample {
    pub fn new(height: usize, width: usize, rgb: Vec<u8>, depth_m: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let s = DepthSample {
            height,
            width,
            rgb,
            depth_m,
            valid,
        };
        s.validate()?;
        Ok(s)
    }

    /// Uniform color and depth, every pixel valid.
    pub fn constant(height: usize, width: usize, color: [u8; 3], depth_m: f32) -> Result<Self> {
        let n = height * width;
        DepthSample::new(
            height,
            width,
            color.iter().copied().cycle().take(3 * n).collect(),
            vec![depth_m; n],
            vec![depth_m > 0.0; n],
        )
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pixels();
        if n == 0 {
            return Err(Error::InvalidData("sample has no pixels".into()));
        }
        if self.rgb.len() != 3 * n || self.depth_m.len() != n || self.valid.len() != n {
            return Err(Error::InvalidData(format!(
                "sample buffers do not match {}x{}",
                self.height, self.width
            )));
        }
        for (&d, &v) in self.depth_m.iter().zip(&self.valid) {
            if !(d >= 0.0 && d.is_finite()) || (v && d <= 0.0) {
                return Err(Error::InvalidData(format!("bad depth {d} (valid = {v})")));
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Reads an 8-bit RGB image and a 16-bit grayscale depth image. Depth is
/// `raw / divisor` meters; raw 0 marks a missing measurement.
pub fn load_pair(rgb_path: &Path, depth_path: &Path, divisor: f64) -> Result<DepthSample> {
    if !(divisor > 0.0 && divisor.is_finite()) {
        return Err(Error::data(
            depth_path,
            format!("depth divisor must be positive, got {divisor}"),
        ));
    }
    let rgb = match image::open(rgb_path).map_err(|e| Error::data(rgb_path, e.to_string()))? {
        DynamicImage::ImageRgb8(i) => i,
        DynamicImage::ImageRgba8(i) => DynamicImage::ImageRgba8(i).to_rgb8(),
        DynamicImage::ImageLuma8(i) => DynamicImage::ImageLuma8(i).to_rgb8(),
        other => {
            return Err(Error::data(
                rgb_path,
                format!("expected an 8-bit color image, got {:?}", other.color()),
            ))
        }
    };
    let depth = match image::open(depth_path).map_err(|e| Error::data(depth_path, e.to_string()))? {
        DynamicImage::ImageLuma16(i) => i,
        other => {
            return Err(Error::data(
                depth_path,
                format!("expected 16-bit grayscale depth, got {:?}", other.color()),
            ))
        }
    };
    if rgb.dimensions() != depth.dimensions() {
        return Err(Error::data(
            depth_path,
            format!(
                "depth is {:?} but rgb {} is {:?}",
                depth.dimensions(),
                rgb_path.display(),
                rgb.dimensions()
            ),
        ));
    }
    let (w, h) = rgb.dimensions();
    let raw = depth.into_raw();
    DepthSample::new(
        h as usize,
        w as usize,
        rgb.into_raw(),
        raw.iter().map(|&r| (r as f64 / divisor) as f32).collect(),
        raw.iter().map(|&r| r > 0).collect(),
    )
}

/// Quantizes meters to `round(d * divisor)`, saturating at 65535. Invalid
/// or non-positive depths are written as 0.
pub fn encode_depth(depth_m: &[f32], valid: Option<&[bool]>, divisor: f64) -> Vec<u16> {
    depth_m
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let ok = valid.is_none_or(|v| v[i]);
            if ok && d > 0.0 {
                (d as f64 * divisor).round().clamp(0.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect()
}

pub fn save_depth_png(path: &Path, height: usize, width: usize, raw: Vec<u16>) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::InvalidData("depth buffer does not match its size".into()))?;
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}

pub fn save_rgb_png(path: &Path, height: usize, width: usize, rgb: Vec<u8>) -> Result<()> {
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, rgb)
        .ok_or_else(|| Error::InvalidData("rgb buffer does not match its size".into()))?;
    img.save(path).map_err(|e| Error::data(path, e.to_string()))
}

/// Writes `sample` as an RGB/depth PNG pair.
pub fn save_pair(sample: &DepthSample, rgb_path: &Path, depth_path: &Path, divisor: f64) -> Result<()> {
    save_rgb_png(rgb_path, sample.height, sample.width, sample.rgb.clone())?;
    let raw = encode_depth(&sample.depth_m, Some(&sample.valid), divisor);
    save_depth_png(depth_path, sample.height, sample.width, raw)
}
