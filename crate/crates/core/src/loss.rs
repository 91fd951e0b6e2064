//! Masked depth-regression losses.
//!
//! Every loss is a mean over valid pixels: invalid pixels contribute
//! nothing to the value or the gradient.

use std::fmt;
use std::str::FromStr;

use mobilex_tensor::{Element, Graph, Mask, Tensor, TensorError, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    L2,
    Berhu,
    Hybrid,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::Berhu => "berhu",
            LossKind::Hybrid => "hybrid",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "berhu" => Ok(LossKind::Berhu),
            "hybrid" => Ok(LossKind::Hybrid),
            other => Err(Error::config(format!("unknown loss `{other}` (l1, l2, berhu, hybrid)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// berHu threshold as a fraction of the largest absolute error.
    pub berhu_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Hybrid,
            berhu_fraction: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.berhu_fraction > 0.0 && self.berhu_fraction <= 1.0) {
            return Err(Error::config(format!(
                "berhu_fraction must lie in (0, 1], got {}",
                self.berhu_fraction
            )));
        }
        Ok(())
    }
}

/// Residual `d - d*`, zeroed at invalid pixels, and the valid count.
struct Residual {
    e: Var,
    count: usize,
}

fn residual<T: Element>(
    g: &mut Graph<T>,
    op: &'static str,
    d: Var,
    dstar: &Tensor<T>,
    mask: &Mask,
) -> Result<Residual> {
    let shape = g.shape(d).clone();
    for other in [dstar.shape(), mask.shape()] {
        if *other != shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: shape.dims().to_vec(),
                right: other.dims().to_vec(),
            }
            .into());
        }
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    // Invalid targets may hold anything; zero them so they cannot poison the
    // product with the mask.
    let target: Vec<T> = dstar
        .data()
        .iter()
        .zip(mask.bits())
        .map(|(&v, &b)| if b { v } else { T::zero() })
        .collect();
    let target = g.constant(Tensor::from_vec(shape, target)?);
    let e = g.sub(d, target)?;
    let mask = g.constant(mask.to_tensor());
    let e = g.mul(e, mask)?;
    Ok(Residual { e, count })
}

/// Sum over all pixels divided by the valid count. Relies on every per-pixel
/// loss vanishing at zero residual.
fn masked_mean<T: Element>(g: &mut Graph<T>, per_pixel: Var, r: &Residual) -> Result<Var> {
    let s = g.sum(per_pixel)?;
    Ok(g.mul_scalar(s, T::from_f64(1.0 / r.count as f64))?)
}

/// Mean absolute error over valid pixels.
pub fn l1<T: Element>(g: &mut Graph<T>, d: Var, dstar: &Tensor<T>, mask: &Mask) -> Result<Var> {
    let r = residual(g, "l1", d, dstar, mask)?;
    let a = g.abs(r.e)?;
    masked_mean(g, a, &r)
}

/// Mean squared error over valid pixels.
pub fn l2<T: Element>(g: &mut Graph<T>, d: Var, dstar: &Tensor<T>, mask: &Mask) -> Result<Var> {
    let r = residual(g, "l2", d, dstar, mask)?;
    let a = g.square(r.e)?;
    masked_mean(g, a, &r)
}

/// Reverse Huber with `c = berhu_fraction * max |e|` over valid pixels. `c`
/// is a constant for the backward pass; `c == 0` reduces to L1.
pub fn berhu<T: Element>(g: &mut Graph<T>, d: Var, dstar: &Tensor<T>, mask: &Mask, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let r = residual(g, "berhu", d, dstar, mask)?;
    let max = g.value(r.e).data().iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let c = T::from_f64(cfg.berhu_fraction * max);
    let a = g.berhu(r.e, c)?;
    masked_mean(g, a, &r)
}

fn pair_mask(mask: &Mask, horizontal: bool) -> (Vec<bool>, usize) {
    let dims = mask.shape().dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let (oh, ow) = if horizontal { (h, w - 1) } else { (h - 1, w) };
    let planes = mask.bits().len() / (h * w);
    let bits = mask.bits();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let a = base + i * w + j;
                let b = if horizontal { a + 1 } else { a + w };
                out.push(bits[a] && bits[b]);
            }
        }
    }
    let n = out.iter().filter(|&&b| b).count();
    (out, n)
}

/// Mean |forward difference of e| in x over valid pairs plus the same in y.
/// A pair is valid when both of its pixels are. A direction without valid
/// pairs contributes zero; if neither has any, the loss is undefined.
pub fn grad_loss<T: Element>(g: &mut Graph<T>, d: Var, dstar: &Tensor<T>, mask: &Mask) -> Result<Var> {
    let r = residual(g, "grad_loss", d, dstar, mask)?;
    let dims = g.shape(d).dims().to_vec();
    if dims.len() < 2 {
        return Err(TensorError::invalid("grad_loss", format!("need rank >= 2, got {dims:?}")).into());
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let mut total: Option<Var> = None;
    for horizontal in [true, false] {
        if (horizontal && w < 2) || (!horizontal && h < 2) {
            continue;
        }
        let (bits, n) = pair_mask(mask, horizontal);
        if n == 0 {
            continue;
        }
        let diff = if horizontal { g.diff_x(r.e)? } else { g.diff_y(r.e)? };
        let shape = g.shape(diff).clone();
        let m = g.constant(Mask::new(shape, bits)?.to_tensor());
        let a = g.abs(diff)?;
        let a = g.mul(a, m)?;
        let s = g.sum(a)?;
        let term = g.mul_scalar(s, T::from_f64(1.0 / n as f64))?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    total.ok_or(Error::NoValidPixels)
}

/// `l1 + grad_loss`.
pub fn hybrid<T: Element>(g: &mut Graph<T>, d: Var, dstar: &Tensor<T>, mask: &Mask) -> Result<Var> {
    let a = l1(g, d, dstar, mask)?;
    let b = grad_loss(g, d, dstar, mask)?;
    Ok(g.add(a, b)?)
}

pub fn loss<T: Element>(g: &mut Graph<T>, cfg: &LossConfig, d: Var, dstar: &Tensor<T>, mask: &Mask) -> Result<Var> {
    match cfg.kind {
        LossKind::L1 => l1(g, d, dstar, mask),
        LossKind::L2 => l2(g, d, dstar, mask),
        LossKind::Berhu => berhu(g, d, dstar, mask, cfg),
        LossKind::Hybrid => hybrid(g, d, dstar, mask),
    }
}
