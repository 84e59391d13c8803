//! Raw buffer kernels shared by the tape ops and the imaging module.

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1×1, stride 1, unpadded convolution reads the input as its own
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `input[c_in,h,w]` into `cols[c_in·k·k, h_out·w_out]`.
pub(crate) fn im2col<T: Real>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let n = g.out_len();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add<T: Real>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let n = g.out_len();
    for ci in 0..g.c_in {
        let plane = &mut input_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..g.h_out {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let n = g.out_len();
    let mut out = vec![T::zero(); g.c_out * n];
    for (co, row) in out.chunks_mut(n).enumerate() {
        row.fill(bias[co]);
    }
    if g.is_pointwise() {
        T::gemm(g.c_out, g.c_in, n, weight, false, input, false, &mut out, true);
    } else {
        let mut cols = vec![T::zero(); g.patch_len() * n];
        im2col(g, input, &mut cols);
        T::gemm(g.c_out, g.patch_len(), n, weight, false, &cols, false, &mut out, true);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let n = g.out_len();
    let r = g.patch_len();
    let cols_owned;
    let cols: &[T] = if g.is_pointwise() {
        input
    } else if need[1] {
        let mut c = vec![T::zero(); r * n];
        im2col(g, input, &mut c);
        cols_owned = c;
        &cols_owned
    } else {
        &[]
    };

    let weight_grad = need[1].then(|| {
        let mut dw = vec![T::zero(); g.c_out * r];
        T::gemm(g.c_out, n, r, grad_out, false, cols, true, &mut dw, false);
        dw
    });
    let bias_grad = need[2].then(|| {
        grad_out
            .chunks(n)
            .map(|row| row.iter().copied().sum())
            .collect()
    });
    let input_grad = need[0].then(|| {
        let mut dcols = vec![T::zero(); r * n];
        T::gemm(r, g.c_out, n, weight, true, grad_out, false, &mut dcols, false);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
            col2im_add(g, &dcols, &mut dx);
            dx
        }
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}

/// 2×2 max pooling; returns values and the flat input index of each window
/// maximum (first index wins ties, row-major window order).
pub(crate) fn max_pool2<T: Real>(c: usize, h: usize, w: usize, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Normalized 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Mirror index with edge repetition (`cba|abc|cba`), valid for any offset.
pub fn mirror_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// One separable pass over every `[h,w]` plane. `vertical` selects the axis;
/// `adjoint` applies the transposed operator (used for backward).
pub(crate) fn blur_pass<T: Real>(
    planes: usize,
    h: usize,
    w: usize,
    taps: &[T],
    src: &[T],
    vertical: bool,
    adjoint: bool,
) -> Vec<T> {
    let r = (taps.len() / 2) as isize;
    let mut dst = vec![T::zero(); src.len()];
    let (len, count, step, lane) = if vertical { (h, w, w, 1) } else { (w, h, 1, w) };
    for p in 0..planes {
        let base = p * h * w;
        for line in 0..count {
            let origin = base + line * lane;
            for o in 0..len {
                for (t, &wt) in taps.iter().enumerate() {
                    let s = mirror_index(o as isize + t as isize - r, len);
                    if adjoint {
                        dst[origin + s * step] += wt * src[origin + o * step];
                    } else {
                        dst[origin + o * step] += wt * src[origin + s * step];
                    }
                }
            }
        }
    }
    dst
}

pub(crate) fn gaussian_blur_planes<T: Real>(
    planes: usize,
    h: usize,
    w: usize,
    taps: &[T],
    src: &[T],
) -> Vec<T> {
    let horiz = blur_pass(planes, h, w, taps, src, false, false);
    blur_pass(planes, h, w, taps, &horiz, true, false)
}

pub(crate) fn gaussian_blur_planes_adjoint<T: Real>(
    planes: usize,
    h: usize,
    w: usize,
    taps: &[T],
    grad: &[T],
) -> Vec<T> {
    let vert = blur_pass(planes, h, w, taps, grad, true, true);
    blur_pass(planes, h, w, taps, &vert, false, true)
}
