//! Index-shuffling ops on the last two (spatial) dimensions.

use crate::element::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Repeat the nearest edge value.
    Replicate,
}

/// Padding amounts `(top, bottom, left, right)`.
pub type Pad = (usize, usize, usize, usize);

fn src_index(o: usize, before: usize, n: usize, mode: PadMode) -> Option<usize> {
    let i = o as isize - before as isize;
    if (0..n as isize).contains(&i) {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, n as isize - 1) as usize),
        }
    }
}

pub(crate) fn pad_forward<T: Element>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (t, b, l, r): Pad,
    mode: PadMode,
) -> Vec<T> {
    let (oh, ow) = (h + t + b, w + l + r);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for oy in 0..oh {
            let Some(iy) = src_index(oy, t, h, mode) else { continue };
            for ox in 0..ow {
                if let Some(ix) = src_index(ox, l, w, mode) {
                    out[(p * oh + oy) * ow + ox] = x[(p * h + iy) * w + ix];
                }
            }
        }
    }
    out
}

pub(crate) fn pad_backward<T: Element>(
    gy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (t, b, l, r): Pad,
    mode: PadMode,
) -> Vec<T> {
    let (oh, ow) = (h + t + b, w + l + r);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            let Some(iy) = src_index(oy, t, h, mode) else { continue };
            for ox in 0..ow {
                if let Some(ix) = src_index(ox, l, w, mode) {
                    let d = &mut gx[(p * h + iy) * w + ix];
                    *d = *d + gy[(p * oh + oy) * ow + ox];
                }
            }
        }
    }
    gx
}

pub(crate) fn crop_forward<T: Element>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (top, left): (usize, usize),
    (ch, cw): (usize, usize),
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * ch * cw);
    for p in 0..planes {
        for y in top..top + ch {
            out.extend_from_slice(&x[(p * h + y) * w + left..][..cw]);
        }
    }
    out
}

pub(crate) fn crop_backward<T: Element>(
    gy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (top, left): (usize, usize),
    (ch, cw): (usize, usize),
) -> Vec<T> {
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..ch {
            gx[(p * h + top + y) * w + left..][..cw].copy_from_slice(&gy[(p * ch + y) * cw..][..cw]);
        }
    }
    gx
}

/// Forward difference along x: `out[.., i, j] = x[.., i, j + 1] - x[.., i, j]`.
pub(crate) fn diff_x_forward<T: Element>(x: &[T], planes: usize, (h, w): (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * h * (w - 1));
    for row in x.chunks_exact(w).take(planes * h) {
        out.extend(row.windows(2).map(|p| p[1] - p[0]));
    }
    out
}

pub(crate) fn diff_x_backward<T: Element>(gy: &[T], planes: usize, (h, w): (usize, usize)) -> Vec<T> {
    let mut gx = vec![T::zero(); planes * h * w];
    for (r, grow) in gy.chunks_exact(w - 1).enumerate() {
        let dst = &mut gx[r * w..][..w];
        for (j, &g) in grow.iter().enumerate() {
            dst[j + 1] = dst[j + 1] + g;
            dst[j] = dst[j] - g;
        }
    }
    gx
}

/// Forward difference along y: `out[.., i, j] = x[.., i + 1, j] - x[.., i, j]`.
pub(crate) fn diff_y_forward<T: Element>(x: &[T], planes: usize, (h, w): (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * (h - 1) * w);
    for plane in x.chunks_exact(h * w).take(planes) {
        for i in 0..h - 1 {
            let (a, b) = (&plane[i * w..][..w], &plane[(i + 1) * w..][..w]);
            out.extend(a.iter().zip(b).map(|(&u, &v)| v - u));
        }
    }
    out
}

pub(crate) fn diff_y_backward<T: Element>(gy: &[T], planes: usize, (h, w): (usize, usize)) -> Vec<T> {
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..h - 1 {
            for j in 0..w {
                let g = gy[(p * (h - 1) + i) * w + j];
                let lo = (p * h + i) * w + j;
                gx[lo + w] = gx[lo + w] + g;
                gx[lo] = gx[lo] - g;
            }
        }
    }
    gx
}
