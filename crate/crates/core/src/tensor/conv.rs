//! Spatial (im2col + GEMM) and depthwise temporal convolutions.

use serde::{Deserialize, Serialize};

use super::{matmul_into, Scalar};

/// Boundary handling for "same"-size convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Out-of-range taps read the nearest edge pixel.
    #[default]
    SameReplicate,
    /// Out-of-range taps read zero.
    SameZero,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (self.h.div_ceil(self.stride), self.w.div_ceil(self.stride))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Source index of tap `(i, j)` for output `(oy, ox)`, or `None` when a
/// zero-padded tap falls outside the image.
#[inline]
fn tap(g: &ConvGeom, oy: usize, ox: usize, i: usize, j: usize) -> Option<usize> {
    let ph = (g.dilation * (g.kh - 1) / 2) as isize;
    let pw = (g.dilation * (g.kw - 1) / 2) as isize;
    let y = (oy * g.stride + i * g.dilation) as isize - ph;
    let x = (ox * g.stride + j * g.dilation) as isize - pw;
    let (h, w) = (g.h as isize, g.w as isize);
    match g.padding {
        Padding::SameReplicate => Some((y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize),
        Padding::SameZero => {
            if y < 0 || y >= h || x < 0 || x >= w {
                None
            } else {
                Some((y * w + x) as usize)
            }
        }
    }
}

/// Column matrix `[cin*kh*kw, b*ho*wo]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols_n = g.b * ho * wo;
    let mut cols = vec![T::zero(); g.patch() * cols_n];
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for bi in 0..g.b {
                    let src = &x[(bi * g.cin + ci) * plane..(bi * g.cin + ci + 1) * plane];
                    let d = &mut dst[bi * ho * wo..(bi + 1) * ho * wo];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            if let Some(idx) = tap(g, oy, ox, i, j) {
                                d[oy * wo + ox] = src[idx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let cols_n = g.b * ho * wo;
    let plane = g.h * g.w;
    for ci in 0..g.cin {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for bi in 0..g.b {
                    let d = &mut gx[(bi * g.cin + ci) * plane..(bi * g.cin + ci + 1) * plane];
                    let s = &src[bi * ho * wo..(bi + 1) * ho * wo];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            if let Some(idx) = tap(g, oy, ox, i, j) {
                                d[idx] += s[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[b, c, s]` <-> `[c, b*s]`.
fn batch_to_channel_major<T: Scalar>(x: &[T], b: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[ci * b * s + bi * s..ci * b * s + (bi + 1) * s]
                .copy_from_slice(&x[(bi * c + ci) * s..(bi * c + ci + 1) * s]);
        }
    }
    out
}

fn channel_to_batch_major<T: Scalar>(x: &[T], b: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * s..(bi * c + ci + 1) * s]
                .copy_from_slice(&x[ci * b * s + bi * s..ci * b * s + (bi + 1) * s]);
        }
    }
    out
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], k: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let n = g.b * ho * wo;
    let mut out_cm = vec![T::zero(); g.cout * n];
    if g.is_pointwise() {
        let xc = batch_to_channel_major(x, g.b, g.cin, g.h * g.w);
        matmul_into(g.cout, g.cin, n, k, false, &xc, false, &mut out_cm, false);
    } else {
        let cols = im2col(x, g);
        matmul_into(g.cout, g.patch(), n, k, false, &cols, false, &mut out_cm, false);
    }
    channel_to_batch_major(&out_cm, g.b, g.cout, ho * wo)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ho, wo) = g.out_hw();
    let n = g.b * ho * wo;
    let go = batch_to_channel_major(gout, g.b, g.cout, ho * wo);
    let p = g.patch();
    let gk = need_k.then(|| {
        let mut gk = vec![T::zero(); g.cout * p];
        if g.is_pointwise() {
            let xc = batch_to_channel_major(x, g.b, g.cin, g.h * g.w);
            matmul_into(g.cout, n, p, &go, false, &xc, true, &mut gk, false);
        } else {
            let cols = im2col(x, g);
            matmul_into(g.cout, n, p, &go, false, &cols, true, &mut gk, false);
        }
        gk
    });
    let gx = need_x.then(|| {
        let mut gcols = vec![T::zero(); p * n];
        matmul_into(p, g.cout, n, k, true, &go, false, &mut gcols, false);
        if g.is_pointwise() {
            channel_to_batch_major(&gcols, g.b, g.cin, g.h * g.w)
        } else {
            let mut gx = vec![T::zero(); x.len()];
            col2im(&gcols, g, &mut gx);
            gx
        }
    });
    (gx, gk)
}

/// Depthwise temporal convolution over `[n, t, c, s]` with replicate padding.
pub(crate) fn temporal_forward<T: Scalar>(x: &[T], k: &[T], dims: [usize; 4], kt: usize) -> Vec<T> {
    let [n, t, c, s] = dims;
    let r = (kt / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ti in 0..t {
            for j in 0..kt {
                let src_t = (ti as isize + j as isize - r).clamp(0, t as isize - 1) as usize;
                for ci in 0..c {
                    let w = k[ci * kt + j];
                    let dst = ((ni * t + ti) * c + ci) * s;
                    let src = ((ni * t + src_t) * c + ci) * s;
                    for q in 0..s {
                        out[dst + q] += w * x[src + q];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn temporal_backward_input<T: Scalar>(k: &[T], g: &[T], dims: [usize; 4], kt: usize, gx: &mut [T]) {
    let [n, t, c, s] = dims;
    let r = (kt / 2) as isize;
    for ni in 0..n {
        for ti in 0..t {
            for j in 0..kt {
                let src_t = (ti as isize + j as isize - r).clamp(0, t as isize - 1) as usize;
                for ci in 0..c {
                    let w = k[ci * kt + j];
                    let dst = ((ni * t + ti) * c + ci) * s;
                    let src = ((ni * t + src_t) * c + ci) * s;
                    for q in 0..s {
                        gx[src + q] += w * g[dst + q];
                    }
                }
            }
        }
    }
}

pub(crate) fn temporal_backward_kernel<T: Scalar>(x: &[T], g: &[T], dims: [usize; 4], kt: usize, gk: &mut [T]) {
    let [n, t, c, s] = dims;
    let r = (kt / 2) as isize;
    for ni in 0..n {
        for ti in 0..t {
            for j in 0..kt {
                let src_t = (ti as isize + j as isize - r).clamp(0, t as isize - 1) as usize;
                for ci in 0..c {
                    let dst = ((ni * t + ti) * c + ci) * s;
                    let src = ((ni * t + src_t) * c + ci) * s;
                    gk[ci * kt + j] += g[dst..dst + s]
                        .iter()
                        .zip(&x[src..src + s])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                }
            }
        }
    }
}
