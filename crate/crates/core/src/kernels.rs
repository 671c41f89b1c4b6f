//! Numeric kernels behind the graph ops: convolution via chunked im2col + GEMM,
//! average pooling, adaptive average pooling and nearest-neighbour upsampling.
//!
//! All kernels run serially and accumulate in a fixed order, so results are
//! bit-reproducible across runs.

/// Upper bound on the number of `f64` entries in one im2col buffer.
const COL_BUDGET: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.dilation * (self.k - 1) / 2) as isize
    }

    fn ckk(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.ckk() * self.w).max(1)).clamp(1, self.h)
    }
}

unsafe fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (*const f64, isize, isize),
    b: (*const f64, isize, isize),
    beta: f64,
    c: (*mut f64, isize, isize),
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a.0, a.1, a.2, b.0, b.1, b.2, beta, c.0, c.1, c.2);
}

/// Fills `cols` (shape `ckk x rows*w`) for output rows `[y0, y0+rows)` of one image.
fn im2col(g: &ConvGeom, img: &[f64], y0: usize, rows: usize, cols: &mut [f64]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = g.pad();
    let dil = g.dilation as isize;
    let stride = rows * g.w;
    for ci in 0..g.c_in {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut cols[r * stride..(r + 1) * stride];
                let dx = kx as isize * dil - pad;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                for yy in 0..rows {
                    let row = &mut dst[yy * g.w..(yy + 1) * g.w];
                    let iy = (y0 + yy) as isize + ky as isize * dil - pad;
                    if iy < 0 || iy >= h || x_lo >= x_hi {
                        row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    row[..x_lo].fill(0.0);
                    row[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    row[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the image gradient; inverse of [`im2col`].
fn col2im(g: &ConvGeom, cols: &[f64], y0: usize, rows: usize, img: &mut [f64]) {
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let pad = g.pad();
    let dil = g.dilation as isize;
    let stride = rows * g.w;
    for ci in 0..g.c_in {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &cols[r * stride..(r + 1) * stride];
                let dx = kx as isize * dil - pad;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for yy in 0..rows {
                    let iy = (y0 + yy) as isize + ky as isize * dil - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[iy as usize * g.w + s0..iy as usize * g.w + s0 + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[yy * g.w + x_lo..yy * g.w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution. `weight` is `(c_out, c_in, k, k)`.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let hw = g.h * g.w;
    let mut out = vec![0.0; g.n * g.c_out * hw];
    let ckk = g.ckk();
    let rows_per = g.rows_per_chunk();
    let mut cols = if g.k == 1 { Vec::new() } else { vec![0.0; ckk * rows_per * g.w] };
    for n in 0..g.n {
        let img = &x[n * g.c_in * hw..(n + 1) * g.c_in * hw];
        let dst = &mut out[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        if g.k == 1 {
            unsafe {
                gemm(
                    g.c_out,
                    ckk,
                    hw,
                    (weight.as_ptr(), ckk as isize, 1),
                    (img.as_ptr(), hw as isize, 1),
                    0.0,
                    (dst.as_mut_ptr(), hw as isize, 1),
                );
            }
        } else {
            let mut y0 = 0;
            while y0 < g.h {
                let rows = rows_per.min(g.h - y0);
                let ncols = rows * g.w;
                im2col(g, img, y0, rows, &mut cols);
                unsafe {
                    gemm(
                        g.c_out,
                        ckk,
                        ncols,
                        (weight.as_ptr(), ckk as isize, 1),
                        (cols.as_ptr(), ncols as isize, 1),
                        0.0,
                        (dst.as_mut_ptr().add(y0 * g.w), hw as isize, 1),
                    );
                }
                y0 += rows;
            }
        }
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_mut(hw).enumerate() {
                for v in plane {
                    *v += b[co];
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each requested output is accumulated into
/// the corresponding buffer.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let hw = g.h * g.w;
    let ckk = g.ckk();
    if let Some(db) = db {
        for n in 0..g.n {
            for (co, plane) in dy[n * g.c_out * hw..(n + 1) * g.c_out * hw].chunks(hw).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut dx = dx;
    let mut dw = dw;
    let rows_per = if g.k == 1 { g.h } else { g.rows_per_chunk() };
    let mut cols = if g.k == 1 { Vec::new() } else { vec![0.0; ckk * rows_per * g.w] };
    let mut dcols = vec![0.0; if dx.is_some() { ckk * rows_per * g.w } else { 0 }];
    for n in 0..g.n {
        let img = &x[n * g.c_in * hw..(n + 1) * g.c_in * hw];
        let gout = &dy[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        let mut y0 = 0;
        while y0 < g.h {
            let rows = rows_per.min(g.h - y0);
            let ncols = rows * g.w;
            let gout_ptr = unsafe { gout.as_ptr().add(y0 * g.w) };
            if let Some(dw) = dw.as_deref_mut() {
                let (cptr, crs) = if g.k == 1 {
                    (unsafe { img.as_ptr().add(y0 * g.w) }, hw as isize)
                } else {
                    im2col(g, img, y0, rows, &mut cols);
                    (cols.as_ptr(), ncols as isize)
                };
                // dW += dY (c_out x ncols) * cols^T (ncols x ckk)
                unsafe {
                    gemm(
                        g.c_out,
                        ncols,
                        ckk,
                        (gout_ptr, hw as isize, 1),
                        (cptr, 1, crs),
                        1.0,
                        (dw.as_mut_ptr(), ckk as isize, 1),
                    );
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dimg = &mut dx[n * g.c_in * hw..(n + 1) * g.c_in * hw];
                if g.k == 1 {
                    // dX += W^T (c_in x c_out) * dY
                    unsafe {
                        gemm(
                            ckk,
                            g.c_out,
                            ncols,
                            (weight.as_ptr(), 1, ckk as isize),
                            (gout_ptr, hw as isize, 1),
                            1.0,
                            (dimg.as_mut_ptr().add(y0 * g.w), hw as isize, 1),
                        );
                    }
                } else {
                    unsafe {
                        gemm(
                            ckk,
                            g.c_out,
                            ncols,
                            (weight.as_ptr(), 1, ckk as isize),
                            (gout_ptr, hw as isize, 1),
                            0.0,
                            (dcols.as_mut_ptr(), ncols as isize, 1),
                        );
                    }
                    col2im(g, &dcols[..ckk * ncols], y0, rows, dimg);
                }
            }
            y0 += rows;
        }
    }
}

/// Output size of a `k`-window pool with the given stride (floor mode).
pub fn pool_out(size: usize, k: usize, stride: usize) -> usize {
    if size < k {
        0
    } else {
        (size - k) / stride + 1
    }
}

pub fn avg_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, k: usize, stride: usize) -> Vec<f64> {
    let (oh, ow) = (pool_out(h, k, stride), pool_out(w, k, stride));
    let inv = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in x.chunks(h * w).take(planes) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ky in 0..k {
                    let row = &p[(oy * stride + ky) * w + ox * stride..];
                    s += row[..k].iter().sum::<f64>();
                }
                out.push(s * inv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_backward(dy: &[f64], dx: &mut [f64], planes: usize, h: usize, w: usize, k: usize, stride: usize) {
    let (oh, ow) = (pool_out(h, k, stride), pool_out(w, k, stride));
    let inv = 1.0 / (k * k) as f64;
    for pi in 0..planes {
        let gp = &dy[pi * oh * ow..(pi + 1) * oh * ow];
        let dp = &mut dx[pi * h * w..(pi + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gp[oy * ow + ox] * inv;
                for ky in 0..k {
                    let base = (oy * stride + ky) * w + ox * stride;
                    for v in &mut dp[base..base + k] {
                        *v += gv;
                    }
                }
            }
        }
    }
}

fn adaptive_bounds(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end.max(start + 1))
}

pub fn adaptive_avg_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in x.chunks(h * w).take(planes) {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bounds(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bounds(ox, w, ow);
                let mut s = 0.0;
                for y in y0..y1 {
                    s += p[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn adaptive_avg_pool_backward(dy: &[f64], dx: &mut [f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) {
    for pi in 0..planes {
        let gp = &dy[pi * oh * ow..(pi + 1) * oh * ow];
        let dp = &mut dx[pi * h * w..(pi + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bounds(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bounds(ox, w, ow);
                let gv = gp[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut dp[y * w + x0..y * w + x1] {
                        *v += gv;
                    }
                }
            }
        }
    }
}

pub fn upsample_nearest_forward(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in x.chunks(h * w).take(planes) {
        for oy in 0..oh {
            let row = &p[(oy / f) * w..(oy / f + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / f]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(dy: &[f64], dx: &mut [f64], planes: usize, h: usize, w: usize, f: usize) {
    let (oh, ow) = (h * f, w * f);
    for pi in 0..planes {
        let gp = &dy[pi * oh * ow..(pi + 1) * oh * ow];
        let dp = &mut dx[pi * h * w..(pi + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dp[(oy / f) * w + ox / f] += gp[oy * ow + ox];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the reference.
    fn naive_conv(g: &ConvGeom, x: &[f64], wt: &[f64], b: &[f64]) -> Vec<f64> {
        let pad = (g.dilation * (g.k - 1) / 2) as isize;
        let mut out = vec![0.0; g.n * g.c_out * g.h * g.w];
        for n in 0..g.n {
            for co in 0..g.c_out {
                for y in 0..g.h {
                    for xx in 0..g.w {
                        let mut s = b[co];
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = y as isize + (ky * g.dilation) as isize - pad;
                                    let ix = xx as isize + (kx * g.dilation) as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx]
                                        * x[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * g.h + y) * g.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        let mut s = 0x9E3779B97F4A7C15u64 ^ salt;
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 2001) as f64 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_for_kernels_and_dilations() {
        for &(k, d, h, w) in &[(1, 1, 5, 7), (3, 1, 6, 5), (5, 1, 7, 7), (7, 1, 9, 8), (3, 2, 8, 9), (3, 3, 7, 7)] {
            let g = ConvGeom { n: 2, c_in: 3, c_out: 4, h, w, k, dilation: d };
            let x = pseudo(g.n * g.c_in * h * w, 1);
            let wt = pseudo(g.c_out * g.c_in * k * k, 2);
            let b = pseudo(g.c_out, 3);
            let fast = conv2d_forward(&g, &x, &wt, Some(&b));
            let slow = naive_conv(&g, &x, &wt, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "k={k} d={d}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <dy, conv(x)> == <conv^T(dy), x> for the input path and likewise for weights.
        let g = ConvGeom { n: 1, c_in: 2, c_out: 3, h: 6, w: 5, k: 3, dilation: 1 };
        let x = pseudo(g.c_in * 30, 4);
        let wt = pseudo(g.c_out * g.c_in * 9, 5);
        let dy = pseudo(g.c_out * 30, 6);
        let y = conv2d_forward(&g, &x, &wt, None);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; wt.len()];
        conv2d_backward(&g, &x, &wt, &dy, Some(&mut dx), Some(&mut dw), None);
        let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&wt).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn pooling_shapes() {
        assert_eq!(pool_out(17, 2, 2), 8);
        assert_eq!(pool_out(657, 9, 9), 73);
        assert_eq!(pool_out(64, 9, 9), 7);
        assert_eq!(pool_out(8, 9, 9), 0);
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(avg_pool_forward(&x, 1, 4, 4, 2, 2), vec![2.5, 4.5, 10.5, 12.5]);
        let up = upsample_nearest_forward(&[1.0, 2.0], 1, 1, 2, 2);
        assert_eq!(up, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn adaptive_pool_identity_and_upscale() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        assert_eq!(adaptive_avg_pool_forward(&x, 1, 3, 3, 3, 3), x);
        // 2 -> 3 bins overlap: [0,1), [0,2), [1,2)
        let y = adaptive_avg_pool_forward(&[1.0, 3.0], 1, 1, 2, 1, 3);
        assert_eq!(y, vec![1.0, 2.0, 3.0]);
    }
}
