//! Raw numeric kernels shared by graph evaluation and the direct
//! (non-differentiated) code paths.

use super::tensor::Real;

/// `out[m,n] = a[m,k] * b[k,n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, false, b, false, &mut out, T::zero());
    out
}

/// Adds `bias` (length = row width) to every row of `x` in place.
pub fn add_rows<T: Real>(x: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in x.chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

/// Geometry of a 2-D convolution over an NCHW tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn is_valid(&self) -> bool {
        self.stride > 0
            && self.kernel_h > 0
            && self.kernel_w > 0
            && self.height + 2 * self.padding >= self.kernel_h
            && self.width + 2 * self.padding >= self.kernel_w
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Source pixel for patch row `(c, ky, kx)` at output `(oy, ox)`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one CHW image into a `[C*kh*kw, Ho*Wo]` patch matrix.
pub fn im2col<T: Real>(img: &[T], g: &ConvGeometry) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = vec![T::zero(); g.patch_len() * ho * wo];
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        if let Some((y, x)) = g.source(ky, kx, oy, ox) {
                            dst[oy * wo + ox] = plane[y * g.width + x];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into a CHW image.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        if let Some((y, x)) = g.source(ky, kx, oy, ox) {
                            let v = &mut plane[y * g.width + x];
                            *v = *v + src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution of a batch `[N, C, H, W]` with weights `[O, C, kh, kw]`.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    out_channels: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let hw = g.out_height() * g.out_width();
    let mut out = vec![T::zero(); batch * out_channels * hw];
    for n in 0..batch {
        let cols = im2col(&x[n * in_len..(n + 1) * in_len], g);
        let dst = &mut out[n * out_channels * hw..(n + 1) * out_channels * hw];
        T::gemm(
            out_channels,
            g.patch_len(),
            hw,
            weight,
            false,
            &cols,
            false,
            dst,
            T::zero(),
        );
        if let Some(bias) = bias {
            for (o, plane) in dst.chunks_exact_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = *v + bias[o]);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each requested buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    weight: &[T],
    out_channels: usize,
    g: &ConvGeometry,
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let in_len = g.channels * g.height * g.width;
    let hw = g.out_height() * g.out_width();
    let plen = g.patch_len();
    let mut grad_x = grad_x;
    let mut grad_w = grad_w;
    for n in 0..batch {
        let dy = &grad_out[n * out_channels * hw..(n + 1) * out_channels * hw];
        if let Some(gw) = grad_w.as_deref_mut() {
            let cols = im2col(&x[n * in_len..(n + 1) * in_len], g);
            T::gemm(out_channels, hw, plen, dy, false, &cols, true, gw, T::one());
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            let mut dcols = vec![T::zero(); plen * hw];
            T::gemm(plen, out_channels, hw, weight, true, dy, false, &mut dcols, T::zero());
            col2im(&dcols, g, &mut gx[n * in_len..(n + 1) * in_len]);
        }
    }
    if let Some(gb) = grad_b {
        for n in 0..batch {
            let dy = &grad_out[n * out_channels * hw..(n + 1) * out_channels * hw];
            for (o, plane) in dy.chunks_exact(hw).enumerate() {
                gb[o] = gb[o] + plane.iter().copied().sum::<T>();
            }
        }
    }
}

/// Max pooling without padding over `[planes, H, W]`; returns values and
/// the flat input index of each maximum (first occurrence wins).
pub fn max_pool2d<T: Real>(
    x: &[T],
    planes: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let ho = (height - kernel) / stride + 1;
    let wo = (width - kernel) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = base + oy * stride * width + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * width + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Source weights of one output sample along an axis.
pub type Taps = Vec<(usize, f64)>;

/// Half-pixel-centred bilinear weights for resampling `in_len` samples to
/// `out_len`. When shrinking, the triangle is widened by the shrink factor
/// so every source sample contributes (the usual antialiased bilinear).
/// Weights are renormalised where the triangle crosses the border.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    (0..out_len)
        .map(|o| {
            let centre = (o as f64 + 0.5) * scale - 0.5;
            let first = (centre - support).floor().max(0.0) as usize;
            let last = ((centre + support).ceil() as usize).min(in_len - 1);
            let mut taps: Taps = (first..=last)
                .map(|i| (i, 1.0 - (i as f64 - centre).abs() / support))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Bilinear resize of `[planes, H, W]` to `[planes, oh, ow]`, rows first.
pub fn resize_planes<T: Real>(
    x: &[T],
    planes: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps(height, out_h);
    let tx = bilinear_taps(width, out_w);
    let mut rows = vec![T::zero(); height * out_w];
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &x[p * height * width..(p + 1) * height * width];
        for y in 0..height {
            let src = &plane[y * width..(y + 1) * width];
            for (ox, taps) in tx.iter().enumerate() {
                rows[y * out_w + ox] = taps.iter().fold(T::zero(), |acc, &(i, w)| acc + src[i] * T::lit(w));
            }
        }
        for taps in &ty {
            for ox in 0..out_w {
                out.push(
                    taps.iter()
                        .fold(T::zero(), |acc, &(i, w)| acc + rows[i * out_w + ox] * T::lit(w)),
                );
            }
        }
    }
    out
}

/// Adjoint of [`resize_planes`], accumulating into `grad_x`.
pub fn resize_planes_backward<T: Real>(
    grad_out: &[T],
    planes: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    grad_x: &mut [T],
) {
    let ty = bilinear_taps(height, out_h);
    let tx = bilinear_taps(width, out_w);
    let mut rows = vec![T::zero(); height * out_w];
    for p in 0..planes {
        rows.fill(T::zero());
        let g = &grad_out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, taps) in ty.iter().enumerate() {
            for &(i, w) in taps {
                let w = T::lit(w);
                for ox in 0..out_w {
                    rows[i * out_w + ox] = rows[i * out_w + ox] + g[oy * out_w + ox] * w;
                }
            }
        }
        let plane = &mut grad_x[p * height * width..(p + 1) * height * width];
        for y in 0..height {
            for (ox, taps) in tx.iter().enumerate() {
                let d = rows[y * out_w + ox];
                for &(i, w) in taps {
                    plane[y * width + i] = plane[y * width + i] + d * T::lit(w);
                }
            }
        }
    }
}
