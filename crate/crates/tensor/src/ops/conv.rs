//! 2-D cross-correlation with stride, zero padding, dilation and groups.
//!
//! Dense groups go through im2col + GEMM. The depthwise case (one input and
//! one output channel per group) uses direct loops.

use rayon::prelude::*;

use super::ROW_CHUNK;
use crate::element::Element;
use crate::error::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

/// Output extent along one axis, or `None` when the dilated kernel does not
/// fit inside the padded input.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let effective = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    (effective <= padded).then(|| (padded - effective) / stride + 1)
}

/// Validated geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: Conv2dParams,
}

impl Geometry {
    pub fn new(input: &[usize], weight: &[usize], p: Conv2dParams) -> Result<Self> {
        const OP: &str = "conv2d";
        let (batch, cin, h, w) = match *input {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(TensorError::invalid(OP, format!("input must be NCHW, got {input:?}"))),
        };
        let (cout, cin_g, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(TensorError::invalid(
                    OP,
                    format!("weight must be rank 4, got {weight:?}"),
                ))
            }
        };
        if kh != kw {
            return Err(TensorError::invalid(OP, "only square kernels are supported"));
        }
        if p.stride == 0 || p.dilation == 0 || p.groups == 0 {
            return Err(TensorError::invalid(OP, "stride, dilation and groups must be positive"));
        }
        if cin % p.groups != 0 || cout % p.groups != 0 || cin / p.groups != cin_g {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                left: input.to_vec(),
                right: weight.to_vec(),
            });
        }
        let (ho, wo) = match (
            output_extent(h, kh, p.stride, p.padding, p.dilation),
            output_extent(w, kw, p.stride, p.padding, p.dilation),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(TensorError::invalid(
                    OP,
                    format!(
                        "effective kernel {} exceeds padded input {}x{}",
                        p.dilation * (kh - 1) + 1,
                        h + 2 * p.padding,
                        w + 2 * p.padding
                    ),
                ))
            }
        };
        Ok(Geometry {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            ho,
            wo,
            p,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    fn cin_g(&self) -> usize {
        self.cin / self.p.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.p.groups
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    /// Input coordinate touched by output index `o` and kernel tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize) -> isize {
        (o * self.p.stride + t * self.p.dilation) as isize - self.p.padding as isize
    }
}

/// Columns per GEMM call worth reaching by stacking samples side by side, so
/// deep layers with tiny planes do not re-pack the weights per sample.
const GEMM_COLUMNS: usize = 2048;

fn samples_per_gemm(g: &Geometry) -> usize {
    (GEMM_COLUMNS / (g.ho * g.wo)).clamp(1, g.batch)
}

pub(crate) fn forward<T: Element>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    if g.is_depthwise() {
        return depthwise_forward(g, x, w);
    }
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let cin_g = g.cin_g();
    let cout_g = g.cout_g();
    let rows = cin_g * g.k * g.k;
    let per_call = samples_per_gemm(g);
    let mut out = vec![T::zero(); g.batch * g.cout * plane_out];
    let mut cols = vec![T::zero(); rows * per_call * plane_out];
    let mut prod = vec![T::zero(); cout_g * per_call * plane_out];
    for b0 in (0..g.batch).step_by(per_call) {
        let nb = per_call.min(g.batch - b0);
        let n = nb * plane_out;
        for grp in 0..g.p.groups {
            for k in 0..nb {
                let x_off = ((b0 + k) * g.cin + grp * cin_g) * plane_in;
                im2col(
                    g,
                    &x[x_off..][..cin_g * plane_in],
                    &mut cols[..rows * n],
                    n,
                    k * plane_out,
                );
            }
            let w_grp = &w[grp * cout_g * rows..][..cout_g * rows];
            prod[..cout_g * n]
                .par_chunks_mut(ROW_CHUNK * n)
                .enumerate()
                .for_each(|(ci, chunk)| {
                    let m = chunk.len() / n;
                    let a = &w_grp[ci * ROW_CHUNK * rows..][..m * rows];
                    T::gemm(
                        m,
                        rows,
                        n,
                        T::one(),
                        a,
                        rows as isize,
                        1,
                        &cols,
                        n as isize,
                        1,
                        T::zero(),
                        chunk,
                        n as isize,
                        1,
                    );
                });
            for k in 0..nb {
                for co in 0..cout_g {
                    let dst = ((b0 + k) * g.cout + grp * cout_g + co) * plane_out;
                    out[dst..][..plane_out].copy_from_slice(&prod[co * n + k * plane_out..][..plane_out]);
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight)`.
pub(crate) fn backward<T: Element>(g: &Geometry, x: &[T], w: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    if g.is_depthwise() {
        return depthwise_backward(g, x, w, gy);
    }
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let cin_g = g.cin_g();
    let cout_g = g.cout_g();
    let rows = cin_g * g.k * g.k;
    let per_call = samples_per_gemm(g);
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut cols = vec![T::zero(); rows * per_call * plane_out];
    let mut gcols = vec![T::zero(); rows * per_call * plane_out];
    let mut gy_grp = vec![T::zero(); cout_g * per_call * plane_out];
    for b0 in (0..g.batch).step_by(per_call) {
        let nb = per_call.min(g.batch - b0);
        let n = nb * plane_out;
        for grp in 0..g.p.groups {
            for k in 0..nb {
                let x_off = ((b0 + k) * g.cin + grp * cin_g) * plane_in;
                im2col(
                    g,
                    &x[x_off..][..cin_g * plane_in],
                    &mut cols[..rows * n],
                    n,
                    k * plane_out,
                );
                for co in 0..cout_g {
                    let src = ((b0 + k) * g.cout + grp * cout_g + co) * plane_out;
                    gy_grp[co * n + k * plane_out..][..plane_out].copy_from_slice(&gy[src..][..plane_out]);
                }
            }
            let gy_grp = &gy_grp[..cout_g * n];
            let w_grp = &w[grp * cout_g * rows..][..cout_g * rows];

            // gw += gy * cols^T
            gw[grp * cout_g * rows..][..cout_g * rows]
                .par_chunks_mut(ROW_CHUNK * rows)
                .enumerate()
                .for_each(|(ci, chunk)| {
                    let m = chunk.len() / rows;
                    let a = &gy_grp[ci * ROW_CHUNK * n..][..m * n];
                    T::gemm(
                        m,
                        n,
                        rows,
                        T::one(),
                        a,
                        n as isize,
                        1,
                        &cols,
                        1,
                        n as isize,
                        T::one(),
                        chunk,
                        rows as isize,
                        1,
                    );
                });

            // gcols = w^T * gy
            gcols[..rows * n]
                .par_chunks_mut(ROW_CHUNK * n)
                .enumerate()
                .for_each(|(ci, chunk)| {
                    let m = chunk.len() / n;
                    let a = &w_grp[ci * ROW_CHUNK..];
                    T::gemm(
                        m,
                        cout_g,
                        n,
                        T::one(),
                        a,
                        1,
                        rows as isize,
                        gy_grp,
                        n as isize,
                        1,
                        T::zero(),
                        chunk,
                        n as isize,
                        1,
                    );
                });
            for k in 0..nb {
                let x_off = ((b0 + k) * g.cin + grp * cin_g) * plane_in;
                col2im(
                    g,
                    &gcols[..rows * n],
                    n,
                    k * plane_out,
                    &mut gx[x_off..][..cin_g * plane_in],
                );
            }
        }
    }
    (gx, gw)
}

/// Writes the patch matrix of one sample into columns `off..off + plane_out`
/// of `cols`, whose rows are `ld` long.
fn im2col<T: Element>(g: &Geometry, x: &[T], cols: &mut [T], ld: usize, off: usize) {
    let k = g.k;
    cols.par_chunks_mut(ld).enumerate().for_each(|(row, dst)| {
        let c = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        for oy in 0..g.ho {
            let iy = g.src(oy, ki);
            let line = &mut dst[off + oy * g.wo..][..g.wo];
            if iy < 0 || iy >= g.h as isize {
                line.iter_mut().for_each(|v| *v = T::zero());
                continue;
            }
            let src_row = &plane[iy as usize * g.w..][..g.w];
            for (ox, v) in line.iter_mut().enumerate() {
                let ix = g.src(ox, kj);
                *v = if ix < 0 || ix >= g.w as isize {
                    T::zero()
                } else {
                    src_row[ix as usize]
                };
            }
        }
    });
}

/// Scatter-adds columns `off..off + plane_out` of `cols` back onto `gx`.
fn col2im<T: Element>(g: &Geometry, cols: &[T], ld: usize, off: usize, gx: &mut [T]) {
    let k = g.k;
    gx.par_chunks_mut(g.h * g.w).enumerate().for_each(|(c, plane)| {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld + off..][..g.ho * g.wo];
                for oy in 0..g.ho {
                    let iy = g.src(oy, ki);
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = g.src(ox, kj);
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let d = &mut plane[iy as usize * g.w + ix as usize];
                        *d = *d + src[oy * g.wo + ox];
                    }
                }
            }
        }
    });
}

fn depthwise_forward<T: Element>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); g.batch * g.cout * plane_out];
    out.par_chunks_mut(plane_out).enumerate().for_each(|(bc, dst)| {
        let c = bc % g.cout;
        let src = &x[bc * plane_in..][..plane_in];
        let taps = &w[c * kk..][..kk];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = T::zero();
                for ki in 0..g.k {
                    let iy = g.src(oy, ki);
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let ix = g.src(ox, kj);
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        acc = acc + taps[ki * g.k + kj] * src[iy as usize * g.w + ix as usize];
                    }
                }
                dst[oy * g.wo + ox] = acc;
            }
        }
    });
    out
}

fn depthwise_backward<T: Element>(g: &Geometry, x: &[T], w: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let kk = g.k * g.k;
    let mut gx = vec![T::zero(); x.len()];
    gx.par_chunks_mut(plane_in).enumerate().for_each(|(bc, dst)| {
        let c = bc % g.cin;
        let grad = &gy[bc * plane_out..][..plane_out];
        let taps = &w[c * kk..][..kk];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = grad[oy * g.wo + ox];
                for ki in 0..g.k {
                    let iy = g.src(oy, ki);
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let ix = g.src(ox, kj);
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let d = &mut dst[iy as usize * g.w + ix as usize];
                        *d = *d + taps[ki * g.k + kj] * go;
                    }
                }
            }
        }
    });
    let mut gw = vec![T::zero(); w.len()];
    gw.par_chunks_mut(kk).enumerate().for_each(|(c, dst)| {
        let mut acc = vec![0.0f64; kk];
        for b in 0..g.batch {
            let bc = b * g.cin + c;
            let src = &x[bc * plane_in..][..plane_in];
            let grad = &gy[bc * plane_out..][..plane_out];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = grad[oy * g.wo + ox].as_f64();
                    for ki in 0..g.k {
                        let iy = g.src(oy, ki);
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.k {
                            let ix = g.src(ox, kj);
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            acc[ki * g.k + kj] += go * src[iy as usize * g.w + ix as usize].as_f64();
                        }
                    }
                }
            }
        }
        dst.iter_mut().zip(acc).for_each(|(d, a)| *d = T::from_f64(a));
    });
    (gx, gw)
}
