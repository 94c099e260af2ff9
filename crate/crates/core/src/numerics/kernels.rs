//! Raw slice kernels behind the tape primitives. Layouts are row-major,
//! images are `[N, C, H, W]`.

use super::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kh
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kw
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

/// Unfolds one `[C, H, W]` item into a `[C*kh*kw, Ho*Wo]` column matrix.
fn im2col<T: Element>(g: &ConvGeometry, item: &[T], cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let in_plane = g.height * g.width;
    for c in 0..g.in_channels {
        let chan = &item[c * in_plane..(c + 1) * in_plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let shift = kj as isize - g.pad as isize;
                // valid ox range: 0 <= ox + shift < width
                let lo = (-shift).clamp(0, wo as isize) as usize;
                let hi = (g.width as isize - shift).clamp(0, wo as isize) as usize;
                for oy in 0..ho {
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    let iy = oy as isize + ki as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || hi <= lo {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    out_row[..lo].fill(T::zero());
                    let s0 = (lo as isize + shift) as usize;
                    out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    out_row[hi..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters one item's column gradients onto its input grid.
fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], grad_item: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let in_plane = g.height * g.width;
    for c in 0..g.in_channels {
        let chan = &mut grad_item[c * in_plane..(c + 1) * in_plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let shift = kj as isize - g.pad as isize;
                let lo = (-shift).clamp(0, wo as isize) as usize;
                let hi = (g.width as isize - shift).clamp(0, wo as isize) as usize;
                if hi <= lo {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy as isize + ki as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let s0 = (lo as isize + shift) as usize;
                    let dst = &mut chan[iy as usize * g.width + s0..iy as usize * g.width + s0 + (hi - lo)];
                    dst.iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]).for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
    }
}

/// Column matrix of item `n`: the input itself for pointwise kernels,
/// otherwise unfolded into `buf`.
fn item_columns<'a, T: Element>(g: &ConvGeometry, input: &'a [T], n: usize, buf: &'a mut Vec<T>) -> &'a [T] {
    let in_item = g.in_channels * g.height * g.width;
    let item = &input[n * in_item..(n + 1) * in_item];
    if g.is_pointwise() {
        return item;
    }
    buf.resize(g.patch_len() * g.out_plane(), T::zero());
    im2col(g, item, buf);
    buf
}

/// Cross-correlation forward pass: returns `[N, O, Ho, Wo]`.
pub fn conv2d_forward<T: Element>(g: &ConvGeometry, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let mut buf = Vec::new();
    for n in 0..g.batch {
        let cols = item_columns(g, input, n, &mut buf);
        let out_item = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        if let Some(bias) = bias {
            for (o, &b) in bias.iter().enumerate() {
                out_item[o * plane..(o + 1) * plane].fill(b);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.out_channels, k, plane, T::one(), kernel, k as isize, 1, cols, plane as isize, 1, beta, out_item, plane as isize, 1);
    }
    out
}

/// Gradients of the convolution. Each requested buffer is accumulated into.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    mut grad_input: Option<&mut [T]>,
    mut grad_kernel: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let k = g.patch_len();
    let out_item = g.out_channels * plane;
    let in_item = g.in_channels * g.height * g.width;
    if let Some(gb) = grad_bias {
        for n in 0..g.batch {
            for (o, b) in gb.iter_mut().enumerate() {
                let start = n * out_item + o * plane;
                *b = *b + grad_out[start..start + plane].iter().copied().sum::<T>();
            }
        }
    }
    let mut buf = Vec::new();
    let mut dcols = Vec::new();
    for n in 0..g.batch {
        let dout = &grad_out[n * out_item..(n + 1) * out_item];
        if let Some(gk) = grad_kernel.as_deref_mut() {
            let cols = item_columns(g, input, n, &mut buf);
            // dK[O, K] += dOut_n[O, HW] . cols_n[K, HW]^T
            T::gemm(g.out_channels, plane, k, T::one(), dout, plane as isize, 1, cols, 1, plane as isize, T::one(), gk, k as isize, 1);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let gi_item = &mut gi[n * in_item..(n + 1) * in_item];
            // dcols_n[K, HW] = K^T[K, O] . dOut_n[O, HW]
            if g.is_pointwise() {
                T::gemm(k, g.out_channels, plane, T::one(), kernel, 1, k as isize, dout, plane as isize, 1, T::one(), gi_item, plane as isize, 1);
            } else {
                dcols.resize(k * plane, T::zero());
                T::gemm(k, g.out_channels, plane, T::one(), kernel, 1, k as isize, dout, plane as isize, 1, T::zero(), &mut dcols, plane as isize, 1);
                col2im(g, &dcols, gi_item);
            }
        }
    }
}

/// Per-(item, group) statistics: returns normalized output, means and reciprocal std.
pub fn group_norm_forward<T: Element>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
    groups: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let per_group = channels / groups * plane;
    let mut out = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); batch * groups];
    let mut rstds = vec![T::zero(); batch * groups];
    let count = T::of(per_group as f64);
    for bg in 0..batch * groups {
        let seg = &x[bg * per_group..(bg + 1) * per_group];
        let mean = seg.iter().copied().sum::<T>() / count;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let rstd = T::one() / (var + eps).sqrt();
        means[bg] = mean;
        rstds[bg] = rstd;
        out[bg * per_group..(bg + 1) * per_group]
            .iter_mut()
            .zip(seg)
            .for_each(|(o, &v)| *o = (v - mean) * rstd);
    }
    (out, means, rstds)
}

/// `dx = rstd * (dy - mean(dy) - x_hat * mean(dy * x_hat))` per group.
pub fn group_norm_backward<T: Element>(
    normalized: &[T],
    rstds: &[T],
    grad_norm: &[T],
    per_group: usize,
    grad_x: &mut [T],
) {
    let count = T::of(per_group as f64);
    for (bg, &rstd) in rstds.iter().enumerate() {
        let range = bg * per_group..(bg + 1) * per_group;
        let xh = &normalized[range.clone()];
        let dy = &grad_norm[range.clone()];
        let mean_dy = dy.iter().copied().sum::<T>() / count;
        let mean_dy_xh = dy.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() / count;
        grad_x[range]
            .iter_mut()
            .zip(dy.iter().zip(xh))
            .for_each(|(g, (&d, &h))| *g = *g + rstd * (d - mean_dy - h * mean_dy_xh));
    }
}

/// Nearest-neighbour 2x upsampling of `[NC, H, W]` planes.
pub fn upsample2x<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        for y in 0..h2 {
            let src = &x[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
            let dst = &mut out[p * h2 * w2 + y * w2..p * h2 * w2 + (y + 1) * w2];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Element>(grad: &[T], planes: usize, h: usize, w: usize, grad_x: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    for p in 0..planes {
        for y in 0..h2 {
            for xo in 0..w2 {
                let i = p * h * w + (y / 2) * w + xo / 2;
                grad_x[i] = grad_x[i] + grad[p * h2 * w2 + y * w2 + xo];
            }
        }
    }
}

/// 2x2 mean pooling of `[NC, H, W]` planes (H, W even).
pub fn downsample2x<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h2 {
            for xo in 0..w2 {
                let i = base + 2 * y * w + 2 * xo;
                out[p * h2 * w2 + y * w2 + xo] = (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn downsample2x_backward<T: Element>(grad: &[T], planes: usize, h: usize, w: usize, grad_x: &mut [T]) {
    let (h2, w2) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h2 {
            for xo in 0..w2 {
                let g = grad[p * h2 * w2 + y * w2 + xo] * quarter;
                let i = base + 2 * y * w + 2 * xo;
                for j in [i, i + 1, i + w, i + w + 1] {
                    grad_x[j] = grad_x[j] + g;
                }
            }
        }
    }
}
