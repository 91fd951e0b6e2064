//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use rayon::prelude::*;

use crate::element::Element;

/// Source taps for one output coordinate: `(lo, hi, weight_hi)`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Element>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(p, dst)| {
        let src = &x[p * h * w..][..h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v00 = src[a.lo * w + b.lo].as_f64();
                let v01 = src[a.lo * w + b.hi].as_f64();
                let v10 = src[a.hi * w + b.lo].as_f64();
                let v11 = src[a.hi * w + b.hi].as_f64();
                let top = v00 + (v01 - v00) * b.frac;
                let bottom = v10 + (v11 - v10) * b.frac;
                dst[oy * ow + ox] = T::from_f64(top + (bottom - top) * a.frac);
            }
        }
    });
    out
}

pub(crate) fn bilinear_backward<T: Element>(
    gy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut gx = vec![T::zero(); planes * h * w];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(p, dst)| {
        let mut acc = vec![0.0f64; h * w];
        let grad = &gy[p * oh * ow..][..oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let g = grad[oy * ow + ox].as_f64();
                acc[a.lo * w + b.lo] += g * (1.0 - a.frac) * (1.0 - b.frac);
                acc[a.lo * w + b.hi] += g * (1.0 - a.frac) * b.frac;
                acc[a.hi * w + b.lo] += g * a.frac * (1.0 - b.frac);
                acc[a.hi * w + b.hi] += g * a.frac * b.frac;
            }
        }
        dst.iter_mut().zip(acc).for_each(|(d, a)| *d = T::from_f64(a));
    });
    gx
}
