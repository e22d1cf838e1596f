//! Raw kernels behind the graph operations. Everything here works on flat
//! row-major slices; shape validation happens in `graph.rs`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes; `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast source.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[i + offset] = in_strides[i];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sum a gradient of `out_shape` down to `in_shape` along broadcast axes.
pub(crate) fn reduce_broadcast<T: Scalar>(grad: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    let n_in: usize = in_shape.iter().product();
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); n_in];
    for (g, &src) in grad.iter().zip(broadcast_map(out_shape, in_shape).iter()) {
        out[src] += *g;
    }
    out
}

pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                y[at(j)] /= sum;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| y[at(j)] * dy[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

const GELU_K0: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K1: f64 = 0.044_715;

/// Tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_K0) * (x + T::lit(GELU_K1) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_K0) * (x + T::lit(GELU_K1) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_K0) * (T::one() + T::lit(3.0 * GELU_K1) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Columns for all samples laid out `[C*kh*kw, N*oh*ow]`.
fn im2col_all<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols_per_sample = g.plane();
    let width = g.n * cols_per_sample;
    let mut cols = vec![T::zero(); g.patch() * width];
    cols.par_chunks_mut(width).enumerate().for_each(|(row, out)| {
        let ci = row / (g.kh * g.kw);
        let ky = (row / g.kw) % g.kh;
        let kx = row % g.kw;
        for s in 0..g.n {
            let base = (s * g.c + ci) * g.h * g.w;
            let dst = &mut out[s * cols_per_sample..(s + 1) * cols_per_sample];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for ox in 0..g.ow {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                        dst[oy * g.ow + ox] = x[base + iy as usize * g.w + ix as usize];
                    }
                }
            }
        }
    });
    cols
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = im2col_all(x, g);
    let width = g.n * g.plane();
    let mut fm = vec![T::zero(); g.f * width];
    gemm(false, false, g.f, g.patch(), width, weight, &cols, &mut fm, false);
    // [F, N, P] -> [N, F, P]
    permute(&fm, &[g.f, g.n, g.plane()], &[1, 0, 2])
}

/// Returns `(d_input, d_weight)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let width = g.n * g.plane();
    // [N, F, P] -> [F, N, P]
    let dy_t = permute(dy, &[g.n, g.f, g.plane()], &[1, 0, 2]);
    let dw = need_dw.then(|| {
        let cols = im2col_all(x, g);
        let mut dw = vec![T::zero(); g.f * g.patch()];
        gemm(false, true, g.f, width, g.patch(), &dy_t, &cols, &mut dw, false);
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); g.patch() * width];
        gemm(true, false, g.patch(), g.f, width, weight, &dy_t, &mut dcols, false);
        let plane_in = g.c * g.h * g.w;
        let mut dx = vec![T::zero(); g.n * plane_in];
        dx.par_chunks_mut(plane_in).enumerate().for_each(|(s, dxs)| {
            for row in 0..g.patch() {
                let ci = row / (g.kh * g.kw);
                let ky = (row / g.kw) % g.kh;
                let kx = row % g.kw;
                let src = &dcols[row * width + s * g.plane()..row * width + (s + 1) * g.plane()];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dxs[ci * g.h * g.w + iy as usize * g.w + ix as usize] +=
                                src[oy * g.ow + ox];
                        }
                    }
                }
            }
        });
        dx
    });
    (dx, dw)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Returns the pooled values and, for max pooling, the flat argmax per output.
pub(crate) fn pool2d_forward<T: Scalar>(x: &[T], g: &PoolGeom, kind: PoolKind) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    let mut arg = Vec::new();
    let inv = T::one() / T::lit((g.k * g.k) as f64);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = T::neg_infinity();
                let mut best_at = 0;
                let mut acc = T::zero();
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let at = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        let v = x[at];
                        acc += v;
                        if v > best {
                            best = v;
                            best_at = at;
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out.push(best);
                        arg.push(best_at);
                    }
                    PoolKind::Avg => out.push(acc * inv),
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn pool2d_backward<T: Scalar>(
    dy: &[T],
    g: &PoolGeom,
    kind: PoolKind,
    argmax: &[usize],
) -> Vec<T> {
    let mut dx = vec![T::zero(); g.planes * g.h * g.w];
    match kind {
        PoolKind::Max => {
            for (d, &at) in dy.iter().zip(argmax) {
                dx[at] += *d;
            }
        }
        PoolKind::Avg => {
            let inv = T::one() / T::lit((g.k * g.k) as f64);
            let mut o = 0;
            for p in 0..g.planes {
                let base = p * g.h * g.w;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let d = dy[o] * inv;
                        o += 1;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                dx[base + (oy * g.stride + ky) * g.w + ox * g.stride + kx] += d;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
