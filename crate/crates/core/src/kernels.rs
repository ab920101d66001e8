//! Slice-level compute kernels behind the autograd graph.
//!
//! Layout is NCHW, row-major. None of these allocate more than their
//! outputs and scratch buffers, and none reduce across parallel tasks.

use crate::exec;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
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

    /// Rows of the unfolded patch matrix.
    pub fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Columns of the unfolded patch matrix.
    pub fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn valid(&self) -> bool {
        self.stride > 0 && self.h + 2 * self.pad >= self.kh && self.w + 2 * self.pad >= self.kw
    }

    /// True when the patch matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major storage.
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices were checked against the matrix extents above and the
    // strides describe exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one sample `[c_in, h, w]` into a `[k, p]` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    debug_assert_eq!(cols.len(), g.k() * p);
    let pad = g.pad as isize;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a `[k, p]` patch-gradient matrix back into `dx` (accumulating).
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.pad as isize;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch. Returns the output `[n, c_out, oh, ow]`
/// and, when `keep_cols`, the per-sample patch matrices for the backward pass.
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
    keep_cols: bool,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let in_len = g.c_in * g.h * g.w;
    let (k, p) = (g.k(), g.p());
    let per_sample = exec::map_indices(n, |s| {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let cols = if g.is_pointwise() {
            xs.to_vec()
        } else {
            let mut cols = vec![0.0; k * p];
            im2col(xs, g, &mut cols);
            cols
        };
        let mut out = vec![0.0; c_out * p];
        if let Some(b) = bias {
            for (co, row) in out.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        gemm(c_out, k, p, weight, false, &cols, false, 1.0, &mut out);
        (out, cols)
    });
    let mut y = Vec::with_capacity(n * c_out * p);
    let mut all_cols = Vec::new();
    for (out, cols) in per_sample {
        y.extend_from_slice(&out);
        if keep_cols {
            all_cols.push(cols);
        }
    }
    (y, all_cols)
}

/// Gradient of the convolution input given per-sample output gradients.
pub fn conv2d_backward_input(dy: &[f64], n: usize, g: &ConvGeom, weight: &[f64], c_out: usize) -> Vec<f64> {
    let in_len = g.c_in * g.h * g.w;
    let (k, p) = (g.k(), g.p());
    let parts = exec::map_indices(n, |s| {
        let dys = &dy[s * c_out * p..(s + 1) * c_out * p];
        let mut dcols = vec![0.0; k * p];
        gemm(k, c_out, p, weight, true, dys, false, 0.0, &mut dcols);
        if g.is_pointwise() {
            dcols
        } else {
            let mut dx = vec![0.0; in_len];
            col2im(&dcols, g, &mut dx);
            dx
        }
    });
    parts.concat()
}

/// Weight and bias gradients, summed over the batch in sample order.
pub fn conv2d_backward_params(
    dy: &[f64],
    cols: &[Vec<f64>],
    g: &ConvGeom,
    c_out: usize,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let (k, p) = (g.k(), g.p());
    for (s, c) in cols.iter().enumerate() {
        let dys = &dy[s * c_out * p..(s + 1) * c_out * p];
        gemm(c_out, p, k, dys, false, c, true, 1.0, dw);
    }
    if let Some(db) = db {
        for s in 0..cols.len() {
            let dys = &dy[s * c_out * p..(s + 1) * c_out * p];
            for (co, row) in dys.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
    }
}

/// An axis-aligned pixel box: top row, left column, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelBox {
    pub fn full(height: usize, width: usize) -> Self {
        PixelBox {
            row: 0,
            col: 0,
            height,
            width,
        }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }
}

/// Bilinear sampling taps for one output axis: for each destination index
/// inside the box, the two source indices and the weight of the second.
fn bilinear_taps(dst_len: usize, src_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            let w1 = if i0 == src_len - 1 { 0.0 } else { s - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

/// Bilinearly resample the `src` box of each source plane into the `dst`
/// box of a zero canvas of size `out_h x out_w`. Half-pixel-centre
/// convention; equal box sizes reproduce the source exactly.
pub fn resample_forward(
    x: &[f64],
    channels: usize,
    in_hw: (usize, usize),
    src: &PixelBox,
    dst: &PixelBox,
    out_hw: (usize, usize),
    out: &mut [f64],
) {
    let (ih, iw) = in_hw;
    let (oh, ow) = out_hw;
    let ty = bilinear_taps(dst.height, src.height);
    let tx = bilinear_taps(dst.width, src.width);
    for c in 0..channels {
        let plane = &x[c * ih * iw..(c + 1) * ih * iw];
        let oplane = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            let r0 = &plane[(src.row + y0) * iw..(src.row + y0 + 1) * iw];
            let r1 = &plane[(src.row + y1) * iw..(src.row + y1 + 1) * iw];
            let orow = &mut oplane[(dst.row + i) * ow..(dst.row + i + 1) * ow];
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let (a, b) = (src.col + x0, src.col + x1);
                let top = r0[a] * (1.0 - wx) + r0[b] * wx;
                let bot = r1[a] * (1.0 - wx) + r1[b] * wx;
                orow[dst.col + j] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
}

/// Adjoint of [`resample_forward`]: accumulate `dy` into `dx`.
pub fn resample_backward(
    dy: &[f64],
    channels: usize,
    in_hw: (usize, usize),
    src: &PixelBox,
    dst: &PixelBox,
    out_hw: (usize, usize),
    dx: &mut [f64],
) {
    let (ih, iw) = in_hw;
    let (oh, ow) = out_hw;
    let ty = bilinear_taps(dst.height, src.height);
    let tx = bilinear_taps(dst.width, src.width);
    for c in 0..channels {
        let plane = &mut dx[c * ih * iw..(c + 1) * ih * iw];
        let gplane = &dy[c * oh * ow..(c + 1) * oh * ow];
        for (i, &(y0, y1, wy)) in ty.iter().enumerate() {
            let grow = &gplane[(dst.row + i) * ow..(dst.row + i + 1) * ow];
            for (j, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = grow[dst.col + j];
                let (a, b) = (src.col + x0, src.col + x1);
                let (ra, rb) = ((src.row + y0) * iw, (src.row + y1) * iw);
                plane[ra + a] += gv * (1.0 - wy) * (1.0 - wx);
                plane[ra + b] += gv * (1.0 - wy) * wx;
                plane[rb + a] += gv * wy * (1.0 - wx);
                plane[rb + b] += gv * wy * wx;
            }
        }
    }
}

/// Per-plane instance normalisation with population variance. Returns the
/// normalised values and the inverse standard deviation of each plane.
pub fn instance_norm_forward(x: &[f64], planes: usize, plane_len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; planes];
    for p in 0..planes {
        let xs = &x[p * plane_len..(p + 1) * plane_len];
        let mean = xs.iter().sum::<f64>() / plane_len as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane_len as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[p] = is;
        for (o, v) in out[p * plane_len..(p + 1) * plane_len].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
    }
    (out, inv_std)
}

pub fn instance_norm_backward(dy: &[f64], xhat: &[f64], inv_std: &[f64], plane_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    let n = plane_len as f64;
    for (p, &is) in inv_std.iter().enumerate() {
        let r = p * plane_len..(p + 1) * plane_len;
        let (g, xh) = (&dy[r.clone()], &xhat[r.clone()]);
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((d, gv), xv) in dx[r].iter_mut().zip(g).zip(xh) {
            *d = is * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

pub fn upsample2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let srow = &src[(i / 2) * w..(i / 2 + 1) * w];
            for (j, d) in dst[i * ow..(i + 1) * ow].iter_mut().enumerate() {
                *d = srow[j / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                d[(i / 2) * w + j / 2] += g[i * ow + j];
            }
        }
    }
    dx
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avgpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                out[p * oh * ow + i * ow + j] = 0.25 * (a + b);
            }
        }
    }
    out
}

pub fn avgpool2_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * dy[p * oh * ow + i * ow + j];
                let base = p * h * w;
                dx[base + 2 * i * w + 2 * j] += g;
                dx[base + 2 * i * w + 2 * j + 1] += g;
                dx[base + (2 * i + 1) * w + 2 * j] += g;
                dx[base + (2 * i + 1) * w + 2 * j + 1] += g;
            }
        }
    }
    dx
}

/// Gram matrix `F F^T / (c * p)` of one `[c, p]` feature block.
pub fn gram_forward(f: &[f64], c: usize, p: usize, out: &mut [f64]) {
    gemm(c, p, c, f, false, f, true, 0.0, out);
    let norm = 1.0 / (c * p) as f64;
    for v in out.iter_mut() {
        *v *= norm;
    }
}

/// `dF = (dG + dG^T) F / (c * p)`, accumulated into `df`.
pub fn gram_backward(dg: &[f64], f: &[f64], c: usize, p: usize, df: &mut [f64]) {
    let norm = 1.0 / (c * p) as f64;
    let mut sym = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            sym[i * c + j] = (dg[i * c + j] + dg[j * c + i]) * norm;
        }
    }
    gemm(c, c, p, &sym, false, f, false, 1.0, df);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], c_out: usize) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0), (5, 1, 2), (7, 1, 3)] {
            let g = ConvGeom {
                c_in: 3,
                h: 9,
                w: 8,
                kh: k,
                kw: k,
                stride,
                pad,
            };
            let x = lcg(3 * 9 * 8, 1);
            let w = lcg(4 * g.k(), 2);
            let (y, _) = conv2d_forward(&x, 1, &g, &w, None, 4, false);
            let expect = naive_conv(&x, &g, &w, 4);
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            c_in: 2,
            h: 6,
            w: 5,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
        };
        let x = lcg(2 * 6 * 5, 3);
        let y = lcg(g.k() * g.p(), 4);
        let mut cols = vec![0.0; g.k() * g.p()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn resample_identity_when_boxes_match() {
        let x = lcg(2 * 7 * 6, 5);
        let b = PixelBox::full(7, 6);
        let mut out = vec![0.0; x.len()];
        resample_forward(&x, 2, (7, 6), &b, &b, (7, 6), &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn resample_backward_is_adjoint() {
        let x = lcg(2 * 10 * 9, 6);
        let src = PixelBox {
            row: 2,
            col: 1,
            height: 5,
            width: 7,
        };
        let dst = PixelBox {
            row: 1,
            col: 3,
            height: 8,
            width: 4,
        };
        let y = lcg(2 * 12 * 11, 7);
        let mut out = vec![0.0; y.len()];
        resample_forward(&x, 2, (10, 9), &src, &dst, (12, 11), &mut out);
        let lhs: f64 = out.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        resample_backward(&y, 2, (10, 9), &src, &dst, (12, 11), &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // outside the destination box the canvas stays zero
        for i in 0..12 {
            for j in 0..11 {
                if !dst.contains(i, j) {
                    assert_eq!(out[i * 11 + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c, c2);
    }
}
