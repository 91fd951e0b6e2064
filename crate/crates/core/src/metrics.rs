//! Depth evaluation metrics with a mergeable streaming accumulator.
//!
//! Float sums are kept as 128-bit fixed-point integers with 48 fractional
//! bits. Each per-pixel term is rounded once on entry; after that, addition
//! is exact, so merging shards in any order gives the same bits.

use std::fmt;
use std::str::FromStr;

use mobilex_tensor::{Element, Mask, Tensor, TensorError};

use crate::error::{Error, Result};

const FRAC_BITS: i32 = 48;
/// Upper clamp for predictions when no depth cap is set, in meters.
pub const MAX_DEPTH_M: f64 = 1e4;
pub const DEFAULT_MIN_DEPTH_M: f64 = 1e-3;
pub const DELTA_THRESHOLDS: [f64; 3] = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];

fn to_fixed(v: f64) -> i128 {
    (v * 2f64.powi(FRAC_BITS)).round() as i128
}

fn from_fixed(v: i128) -> f64 {
    v as f64 / 2f64.powi(FRAC_BITS)
}

/// Which depth divides the absolute error in REL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RelDenominator {
    #[default]
    GroundTruth,
    Prediction,
}

impl FromStr for RelDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ground_truth" | "groundtruth" | "gt" => Ok(RelDenominator::GroundTruth),
            "prediction" | "pred" => Ok(RelDenominator::Prediction),
            other => Err(Error::config(format!(
                "unknown rel_denominator `{other}` (ground_truth, prediction)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsAccumulator {
    pub cap_m: Option<f64>,
    pub min_depth_m: f64,
    pub rel_denominator: RelDenominator,
    sum_sq_err: i128,
    sum_rel: i128,
    sum_log10: i128,
    count: u64,
    delta_counts: [u64; 3],
}

impl Default for MetricsAccumulator {
    fn default() -> Self {
        MetricsAccumulator::new(None)
    }
}

impl MetricsAccumulator {
    pub fn new(cap_m: Option<f64>) -> Self {
        MetricsAccumulator {
            cap_m,
            min_depth_m: DEFAULT_MIN_DEPTH_M,
            rel_denominator: RelDenominator::GroundTruth,
            sum_sq_err: 0,
            sum_rel: 0,
            sum_log10: 0,
            count: 0,
            delta_counts: [0; 3],
        }
    }

    pub fn with_min_depth(mut self, m: f64) -> Self {
        self.min_depth_m = m;
        self
    }

    pub fn with_rel_denominator(mut self, r: RelDenominator) -> Self {
        self.rel_denominator = r;
        self
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn delta_counts(&self) -> [u64; 3] {
        self.delta_counts
    }

    /// Adds one pixel pair. Returns whether it counted.
    pub fn accumulate_pixel(&mut self, d: f64, dstar: f64) -> bool {
        let cap = self.cap_m.unwrap_or(f64::INFINITY);
        if !(dstar > 0.0 && dstar <= cap) {
            return false;
        }
        let hi = self.cap_m.unwrap_or(MAX_DEPTH_M);
        let d = if d.is_nan() {
            self.min_depth_m
        } else {
            d.clamp(self.min_depth_m, hi)
        };
        let err = d - dstar;
        let denom = match self.rel_denominator {
            RelDenominator::GroundTruth => dstar,
            RelDenominator::Prediction => d,
        };
        self.sum_sq_err += to_fixed(err * err);
        self.sum_rel += to_fixed(err.abs() / denom);
        self.sum_log10 += to_fixed((d.log10() - dstar.log10()).abs());
        self.count += 1;
        let ratio = (d / dstar).max(dstar / d);
        for (c, t) in self.delta_counts.iter_mut().zip(DELTA_THRESHOLDS) {
            *c += (ratio < t) as u64;
        }
        true
    }

    /// Adds every valid pixel of a prediction/ground-truth pair in meters.
    pub fn accumulate<T: Element>(&mut self, d: &Tensor<T>, dstar: &Tensor<T>, mask: &Mask) -> Result<()> {
        for other in [dstar.shape(), mask.shape()] {
            if other != d.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "metrics",
                    left: d.dims().to_vec(),
                    right: other.dims().to_vec(),
                }
                .into());
            }
        }
        for ((p, t), &ok) in d.data().iter().zip(dstar.data()).zip(mask.bits()) {
            if ok {
                self.accumulate_pixel(p.as_f64(), t.as_f64());
            }
        }
        Ok(())
    }

    /// Folds in another shard with the same settings.
    pub fn merge(&mut self, other: &MetricsAccumulator) -> Result<()> {
        if self.cap_m != other.cap_m
            || self.min_depth_m != other.min_depth_m
            || self.rel_denominator != other.rel_denominator
        {
            return Err(Error::config("cannot merge accumulators with different settings"));
        }
        self.sum_sq_err += other.sum_sq_err;
        self.sum_rel += other.sum_rel;
        self.sum_log10 += other.sum_log10;
        self.count += other.count;
        for (a, b) in self.delta_counts.iter_mut().zip(other.delta_counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn finalize(&self) -> Result<MetricsReport> {
        if self.count == 0 {
            return Err(Error::NoValidPixels);
        }
        let n = self.count as f64;
        let frac = |c: u64| c as f64 / n;
        Ok(MetricsReport {
            rmse: (from_fixed(self.sum_sq_err) / n).sqrt(),
            rel: from_fixed(self.sum_rel) / n,
            log10: from_fixed(self.sum_log10) / n,
            delta1: frac(self.delta_counts[0]),
            delta2: frac(self.delta_counts[1]),
            delta3: frac(self.delta_counts[2]),
            pixels: self.count,
            cap_m: self.cap_m,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rmse: f64,
    pub rel: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: u64,
    pub cap_m: Option<f64>,
}

pub const CSV_HEADER: &str = "label,rmse,rel,log10,delta1,delta2,delta3,pixels,cap_m";

fn quote(label: &str) -> String {
    if label.contains([',', '"', '\n']) {
        format!("\"{}\"", label.replace('"', "\"\""))
    } else {
        label.to_string()
    }
}

impl MetricsReport {
    /// One CSV row matching [`CSV_HEADER`]; an absent cap is an empty field.
    pub fn csv_row(&self, label: &str) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            quote(label),
            self.rmse,
            self.rel,
            self.log10,
            self.delta1,
            self.delta2,
            self.delta3,
            self.pixels,
            self.cap_m.map(|c| c.to_string()).unwrap_or_default()
        )
    }

    /// Parses the numeric fields of a row produced by [`MetricsReport::csv_row`]
    /// (label already split off).
    pub fn from_fields(fields: &[&str]) -> Result<Self> {
        if fields.len() != 8 {
            return Err(Error::InvalidData(format!(
                "expected 8 metric fields, got {}",
                fields.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .trim()
                .parse()
                .map_err(|_| Error::InvalidData(format!("bad metric value `{}`", fields[i])))
        };
        Ok(MetricsReport {
            rmse: f(0)?,
            rel: f(1)?,
            log10: f(2)?,
            delta1: f(3)?,
            delta2: f(4)?,
            delta3: f(5)?,
            pixels: fields[6]
                .trim()
                .parse()
                .map_err(|_| Error::InvalidData(format!("bad pixel count `{}`", fields[6])))?,
            cap_m: if fields[7].trim().is_empty() { None } else { Some(f(7)?) },
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rmse {:.4}  rel {:.4}  log10 {:.4}  d1 {:.4}  d2 {:.4}  d3 {:.4}  ({} px)",
            self.rmse, self.rel, self.log10, self.delta1, self.delta2, self.delta3, self.pixels
        )
    }
}
