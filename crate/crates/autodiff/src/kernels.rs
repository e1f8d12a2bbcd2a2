//! Raw forward/backward kernels over flat NCHW buffers.

use crate::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Output positions `o` in `0..n_out` whose input tap `o * stride + k - pad`
/// falls inside `0..n_in`.
fn valid_range(n_in: usize, n_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = (n_in + pad).saturating_sub(k).div_ceil(stride).min(n_out);
    (lo.min(hi), hi)
}

/// Column blocks are sized to stay cache resident.
const TILE_VALUES: usize = 1 << 17;

/// Output rows per tile for geometry `g`.
fn tile_rows(g: &ConvGeom) -> usize {
    (TILE_VALUES / (g.rows() * g.out_w()).max(1)).clamp(1, g.out_h())
}

/// Unfold output rows `oy0..oy1` of one `(c_in, h, w)` image into a
/// `(c_in*kh*kw) x ((oy1-oy0)*ow)` matrix, replacing the contents of `cols`.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut Vec<T>) {
    let ow = g.out_w();
    let oh = g.out_h();
    cols.clear();
    cols.reserve(g.rows() * (oy1 - oy0) * ow);
    let zero = T::zero();
    for ci in 0..g.c_in {
        let src = &x[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.h, oh, ki, g.stride, g.pad);
            let (y_lo, y_hi) = (y_lo.clamp(oy0, oy1), y_hi.clamp(oy0, oy1));
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.w, ow, kj, g.stride, g.pad);
                cols.resize(cols.len() + (y_lo - oy0) * ow, zero);
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src_row = &src[iy * g.w..][..g.w];
                    let first = x_lo * g.stride + kj - g.pad;
                    cols.resize(cols.len() + x_lo, zero);
                    if g.stride == 1 {
                        cols.extend_from_slice(&src_row[first..first + (x_hi - x_lo)]);
                    } else {
                        cols.extend((0..x_hi - x_lo).map(|j| src_row[first + j * g.stride]));
                    }
                    cols.resize(cols.len() + (ow - x_hi), zero);
                }
                cols.resize(cols.len() + (oy1 - y_hi) * ow, zero);
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into one image.
fn col2im<T: Float>(cols: &[T], g: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [T]) {
    let ow = g.out_w();
    let oh = g.out_h();
    let plane = (oy1 - oy0) * ow;
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_range(g.h, oh, ki, g.stride, g.pad);
            let (y_lo, y_hi) = (y_lo.clamp(oy0, oy1), y_hi.clamp(oy0, oy1));
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_range(g.w, ow, kj, g.stride, g.pad);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in y_lo..y_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst_row = &mut dst[iy * g.w..][..g.w];
                    let at = (oy - oy0) * ow;
                    let s = &src[at + x_lo..at + x_hi];
                    let first = x_lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst_row[first..first + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            dst_row[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Float>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let k = g.rows();
    let in_item = g.c_in * g.h * g.w;
    let out_item = g.c_out * plane;
    let tile = tile_rows(g);
    let mut out = vec![T::zero(); g.n * out_item];
    let mut cols = Vec::new();
    for ni in 0..g.n {
        let src = &x[ni * in_item..(ni + 1) * in_item];
        let dst = &mut out[ni * out_item..(ni + 1) * out_item];
        for oy0 in (0..oh).step_by(tile) {
            let oy1 = (oy0 + tile).min(oh);
            let cp = (oy1 - oy0) * ow;
            im2col(src, g, oy0, oy1, &mut cols);
            T::gemm(
                g.c_out, k, cp, T::one(), weight, k as isize, 1, &cols, cp as isize, 1, T::zero(),
                &mut dst[oy0 * ow..], plane as isize, 1,
            );
        }
        if let Some(b) = bias {
            for (row, &bv) in dst.chunks_exact_mut(plane).zip(b) {
                for v in row {
                    *v += bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let k = g.rows();
    let in_item = g.c_in * g.h * g.w;
    let out_item = g.c_out * plane;
    let tile = tile_rows(g);
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for item in dy.chunks_exact(out_item) {
            for (d, row) in db.iter_mut().zip(item.chunks_exact(plane)) {
                *d += row.iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut dw = need.1.then(|| vec![T::zero(); g.c_out * k]);
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_item]);
    let mut cols = Vec::new();
    let mut dcols = if need.0 { vec![T::zero(); k * tile * ow] } else { Vec::new() };
    for ni in 0..g.n {
        let dy_i = &dy[ni * out_item..(ni + 1) * out_item];
        for oy0 in (0..oh).step_by(tile) {
            let oy1 = (oy0 + tile).min(oh);
            let cp = (oy1 - oy0) * ow;
            let dy_t = &dy_i[oy0 * ow..];
            if let Some(dw) = dw.as_mut() {
                im2col(&x[ni * in_item..(ni + 1) * in_item], g, oy0, oy1, &mut cols);
                // dw += dy_t (c_out x cp) * cols^T (cp x k)
                T::gemm(
                    g.c_out, cp, k, T::one(), dy_t, plane as isize, 1, &cols, 1, cp as isize, T::one(), dw,
                    k as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = w^T (k x c_out) * dy_t (c_out x cp)
                T::gemm(
                    k, g.c_out, cp, T::one(), weight, 1, k as isize, dy_t, plane as isize, 1, T::zero(),
                    &mut dcols, cp as isize, 1,
                );
                col2im(&dcols[..k * cp], g, oy0, oy1, &mut dx[ni * in_item..(ni + 1) * in_item]);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Normalization statistics over contiguous groups of `group` elements.
pub struct NormStats<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn normalize_groups<T: Float>(x: &[T], group: usize, eps: T) -> NormStats<T> {
    let m = T::of(group as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / group);
    for (src, dst) in x.chunks_exact(group).zip(xhat.chunks_exact_mut(group)) {
        let mean = src.iter().copied().sum::<T>() / m;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
        let inv = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    NormStats { xhat, inv_std }
}

pub fn normalize_groups_backward<T: Float>(stats: &NormStats<T>, dy: &[T], group: usize) -> Vec<T> {
    let m = T::of(group as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for ((g_dy, g_xhat), (g_dx, &inv)) in dy
        .chunks_exact(group)
        .zip(stats.xhat.chunks_exact(group))
        .zip(dx.chunks_exact_mut(group).zip(&stats.inv_std))
    {
        let sum_dy: T = g_dy.iter().copied().sum();
        let sum_dy_xhat: T = g_dy.iter().zip(g_xhat).map(|(&a, &b)| a * b).sum();
        for ((d, &dyv), &xh) in g_dx.iter_mut().zip(g_dy).zip(g_xhat) {
            *d = inv / m * (m * dyv - sum_dy - xh * sum_dy_xhat);
        }
    }
    dx
}

fn bilinear_taps(out: usize, size: usize) -> (usize, usize, f64) {
    // half-pixel centres, edge-clamped
    let src = ((out as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, src - i0 as f64)
}

pub fn upsample2x_forward<T: Float>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let ys: Vec<_> = (0..oh).map(|o| bilinear_taps(o, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| bilinear_taps(o, w)).collect();
    for (src, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = T::of(lx);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Float>(dy: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); n * c * h * w];
    let ys: Vec<_> = (0..oh).map(|o| bilinear_taps(o, h)).collect();
    let xs: Vec<_> = (0..ow).map(|o| bilinear_taps(o, w)).collect();
    for (src, dst) in dy.chunks_exact(oh * ow).zip(dx.chunks_exact_mut(h * w)) {
        for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = T::of(lx);
                let g = src[oy * ow + ox];
                let gt = g * (T::one() - ly);
                let gb = g * ly;
                dst[y0 * w + x0] += gt * (T::one() - lx);
                dst[y0 * w + x1] += gt * lx;
                dst[y1 * w + x0] += gb * (T::one() - lx);
                dst[y1 * w + x1] += gb * lx;
            }
        }
    }
    dx
}
