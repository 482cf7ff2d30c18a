//! Raw numeric kernels behind the tape operations. Everything here works on
//! flat row-major slices; shapes are validated by the callers in `tape`.

use crate::element::Element;

/// Geometry of a 2-D cross-correlation from `in_c × in_h × in_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `None` when the padded input is smaller than the kernel or the stride is zero.
    pub fn new(
        in_c: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || in_h + 2 * pad < kh || in_w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            in_c,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kh) / stride + 1,
            out_w: (in_w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Rows of the column matrix: one per (channel, ky, kx).
    pub fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Range of output columns `ox` whose input column `ox*stride + kx - pad` is inside the image.
    #[inline]
    fn valid_range(&self, k: usize, out: usize, extent: usize) -> (usize, usize) {
        // ox*stride + k >= pad  and  ox*stride + k < extent + pad
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k).div_ceil(self.stride)).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds `x` into a `(in_c·kh·kw) × (out_h·out_w)` matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    debug_assert_eq!(x.len(), g.in_c * g.in_h * g.in_w);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let n = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.out_h, g.in_h);
            for kx in 0..g.kw {
                let dst = &mut cols[row * n..(row + 1) * n];
                let (ox_lo, ox_hi) = g.valid_range(kx, g.out_w, g.in_w);
                for oy in 0..g.out_h {
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if oy < oy_lo || oy >= oy_hi {
                        d.fill(T::ZERO);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                    d[..ox_lo].fill(T::ZERO);
                    d[ox_hi..].fill(T::ZERO);
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        d[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            d[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column entries back, accumulating into `x`.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    debug_assert_eq!(x.len(), g.in_c * g.in_h * g.in_w);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let n = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.out_h, g.in_h);
            for kx in 0..g.kw {
                let src = &cols[row * n..(row + 1) * n];
                let (ox_lo, ox_hi) = g.valid_range(kx, g.out_w, g.in_w);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[co] = W[co] ⋆ x + b[co]`, with weights `out_c × in_c × kh × kw`.
pub fn conv2d_forward<T: Element>(x: &[T], w: &[T], b: &[T], g: &ConvGeom) -> Vec<T> {
    let out_c = b.len();
    let n = g.col_cols();
    let k = g.col_rows();
    let mut out = Vec::with_capacity(out_c * n);
    for &bias in b {
        out.extend(std::iter::repeat_n(bias, n));
    }
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        T::gemm(out_c, k, n, w, false, x, false, T::ONE, &mut out);
    } else {
        let mut cols = vec![T::ZERO; k * n];
        im2col(x, g, &mut cols);
        T::gemm(out_c, k, n, w, false, &cols, false, T::ONE, &mut out);
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weights and bias (each optional).
pub fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    out_c: usize,
    g: &ConvGeom,
    grad_out: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let n = g.col_cols();
    let k = g.col_rows();
    let db: Vec<T> = grad_out.chunks_exact(n).map(|r| r.iter().copied().sum()).collect();
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
    let dw = want_w.then(|| {
        let mut dw = vec![T::ZERO; out_c * k];
        if pointwise {
            T::gemm(out_c, n, k, grad_out, false, x, true, T::ZERO, &mut dw);
        } else {
            let mut cols = vec![T::ZERO; k * n];
            im2col(x, g, &mut cols);
            T::gemm(out_c, n, k, grad_out, false, &cols, true, T::ZERO, &mut dw);
        }
        dw
    });
    let dx = want_x.then(|| {
        let mut dcols = vec![T::ZERO; k * n];
        T::gemm(k, out_c, n, w, true, grad_out, false, T::ZERO, &mut dcols);
        if pointwise {
            dcols
        } else {
            let mut dx = vec![T::ZERO; g.in_c * g.in_h * g.in_w];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    (dx, dw, db)
}

/// Transposed convolution. `g` is the geometry of the matching forward
/// convolution that maps the output (`in_c` = output channels) back to `x`.
pub fn conv_transpose2d_forward<T: Element>(
    x: &[T],
    w: &[T],
    b: &[T],
    in_c: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let k = g.col_rows();
    let n = g.col_cols();
    let mut cols = vec![T::ZERO; k * n];
    T::gemm(k, in_c, n, w, true, x, false, T::ZERO, &mut cols);
    let plane = g.in_h * g.in_w;
    let mut out = Vec::with_capacity(g.in_c * plane);
    for &bias in b {
        out.extend(std::iter::repeat_n(bias, plane));
    }
    col2im(&cols, g, &mut out);
    out
}

pub fn conv_transpose2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    in_c: usize,
    g: &ConvGeom,
    grad_out: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let k = g.col_rows();
    let n = g.col_cols();
    let plane = g.in_h * g.in_w;
    let db: Vec<T> = grad_out
        .chunks_exact(plane)
        .map(|r| r.iter().copied().sum())
        .collect();
    if !want_x && !want_w {
        return (None, None, db);
    }
    let mut dcols = vec![T::ZERO; k * n];
    im2col(grad_out, g, &mut dcols);
    let dx = want_x.then(|| {
        let mut dx = vec![T::ZERO; in_c * n];
        T::gemm(in_c, k, n, w, false, &dcols, false, T::ZERO, &mut dx);
        dx
    });
    let dw = want_w.then(|| {
        let mut dw = vec![T::ZERO; in_c * k];
        T::gemm(in_c, n, k, x, false, &dcols, true, T::ZERO, &mut dw);
        dw
    });
    (dx, dw, db)
}

/// 2×2 stride-2 max pooling; returns the output and the flat argmax of each window.
pub fn max_pool2_forward<T: Element>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Per-pixel bilinear taps for sampling an `h × w` plane at normalized coordinates.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap<T> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub tx: T,
    pub ty: T,
    /// d(pixel x)/d(normalized x), zero where the coordinate is clamped.
    pub dpx: T,
    pub dpy: T,
}

/// Maps a normalized coordinate onto pixel space (pixel centres at `-1 + (2i+1)/n`),
/// clamps to the border and splits into cell index and fraction.
#[inline]
fn axis_tap<T: Element>(coord: T, n: usize) -> (usize, usize, T, T) {
    let nf = n as f64;
    let p = ((coord.to_f64() + 1.0) * nf - 1.0) * 0.5;
    let hi = (n - 1) as f64;
    let (p, deriv) = if p <= 0.0 {
        (0.0, 0.0)
    } else if p >= hi {
        (hi, 0.0)
    } else {
        (p, nf * 0.5)
    };
    // Coordinates within rounding noise of a pixel centre snap onto it, so an
    // identity field reproduces its input bit for bit.
    let nearest = p.round();
    let snap = 8.0 * T::EPSILON.to_f64() * nf;
    let p = if (p - nearest).abs() <= snap { nearest } else { p };
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, T::from_f64(p - i0 as f64), T::from_f64(deriv))
}

pub fn bilinear_taps<T: Element>(field: &[T], out_pixels: usize, h: usize, w: usize) -> Vec<BilinearTap<T>> {
    let (xs, ys) = field.split_at(out_pixels);
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let (x0, x1, tx, dpx) = axis_tap(x, w);
            let (y0, y1, ty, dpy) = axis_tap(y, h);
            BilinearTap {
                x0,
                x1,
                y0,
                y1,
                tx,
                ty,
                dpx,
                dpy,
            }
        })
        .collect()
}

pub fn grid_sample_forward<T: Element>(f: &[T], c: usize, h: usize, w: usize, taps: &[BilinearTap<T>]) -> Vec<T> {
    let mut out = Vec::with_capacity(c * taps.len());
    for ch in 0..c {
        let plane = &f[ch * h * w..(ch + 1) * h * w];
        out.extend(taps.iter().map(|t| {
            let top = plane[t.y0 * w + t.x0] * (T::ONE - t.tx) + plane[t.y0 * w + t.x1] * t.tx;
            let bot = plane[t.y1 * w + t.x0] * (T::ONE - t.tx) + plane[t.y1 * w + t.x1] * t.tx;
            top * (T::ONE - t.ty) + bot * t.ty
        }));
    }
    out
}

/// Returns (d feature, d field) for bilinear sampling.
pub fn grid_sample_backward<T: Element>(
    f: &[T],
    c: usize,
    h: usize,
    w: usize,
    taps: &[BilinearTap<T>],
    grad_out: &[T],
    want_f: bool,
    want_field: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = taps.len();
    let mut df = want_f.then(|| vec![T::ZERO; c * h * w]);
    let mut dfield = want_field.then(|| vec![T::ZERO; 2 * n]);
    for ch in 0..c {
        let plane = &f[ch * h * w..(ch + 1) * h * w];
        let g = &grad_out[ch * n..(ch + 1) * n];
        for (i, t) in taps.iter().enumerate() {
            let go = g[i];
            let v00 = plane[t.y0 * w + t.x0];
            let v01 = plane[t.y0 * w + t.x1];
            let v10 = plane[t.y1 * w + t.x0];
            let v11 = plane[t.y1 * w + t.x1];
            if let Some(df) = df.as_mut() {
                let d = &mut df[ch * h * w..(ch + 1) * h * w];
                let (wx0, wx1) = (T::ONE - t.tx, t.tx);
                let (wy0, wy1) = (T::ONE - t.ty, t.ty);
                d[t.y0 * w + t.x0] += go * wy0 * wx0;
                d[t.y0 * w + t.x1] += go * wy0 * wx1;
                d[t.y1 * w + t.x0] += go * wy1 * wx0;
                d[t.y1 * w + t.x1] += go * wy1 * wx1;
            }
            if let Some(dfield) = dfield.as_mut() {
                let dx = (T::ONE - t.ty) * (v01 - v00) + t.ty * (v11 - v10);
                let dy = (T::ONE - t.tx) * (v10 - v00) + t.tx * (v11 - v01);
                dfield[i] += go * dx * t.dpx;
                dfield[n + i] += go * dy * t.dpy;
            }
        }
    }
    (df, dfield)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 6-loop cross-correlation.
    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let oc = b.len();
        let mut out = vec![0.0; oc * g.out_h * g.out_w];
        for o in 0..oc {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[o];
                    for c in 0..g.in_c {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += w[((o * g.in_c + c) * g.kh + ky) * g.kw + kx]
                                    * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 12.9898).sin() * 0.5).collect()
    }

    #[test]
    fn im2col_conv_matches_naive_on_assorted_geometries() {
        for &(c, h, w, k, s, p, oc) in &[
            (3, 8, 8, 3, 1, 1, 4),
            (2, 7, 5, 3, 2, 1, 3),
            (1, 6, 6, 5, 1, 2, 2),
            (2, 9, 9, 3, 3, 0, 2),
            (4, 5, 5, 1, 1, 0, 3),
            (2, 4, 4, 7, 1, 3, 2),
        ] {
            let g = ConvGeom::new(c, h, w, k, k, s, p).unwrap();
            let x = pseudo(c * h * w, 1.0);
            let wt = pseudo(oc * c * k * k, 2.0);
            let b = pseudo(oc, 3.0);
            let got = conv2d_forward(&x, &wt, &b, &g);
            let want = naive_conv(&x, &wt, &b, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{:?}", g);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 7, 6, 3, 3, 2, 1).unwrap();
        let x = pseudo(2 * 7 * 6, 4.0);
        let y = pseudo(g.col_rows() * g.col_cols(), 5.0);
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn kernel_larger_than_padded_input_has_no_geometry() {
        assert!(ConvGeom::new(1, 2, 2, 5, 5, 1, 1).is_none());
        assert!(ConvGeom::new(1, 2, 2, 3, 3, 0, 1).is_none());
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = [1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 1.0];
        let (out, arg) = max_pool2_forward(&x, 1, 2, 4);
        assert_eq!(out, vec![5.0, 8.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
