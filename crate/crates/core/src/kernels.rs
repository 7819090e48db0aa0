//! Raw f64 kernels over contiguous row-major slices.
//!
//! Tensors of any storage precision are widened to f64 before they reach
//! these functions, so every reduction accumulates in double precision.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work (in multiply-adds) below which kernels stay on the calling thread.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
        return;
    }
    c.chunks_mut(n).enumerate().for_each(row);
}

/// Dot product with four independent partial sums (lets the compiler vectorize).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *cv += dot(arow, brow);
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
        return;
    }
    c.chunks_mut(n).enumerate().for_each(row);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of one 2-D convolution window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_h = (h + 2 * pad - k) / stride + 1;
        let out_w = (w + 2 * pad - k) / stride + 1;
        Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Patch matrix `[C·K·K, out_h·out_w]` for a `[C, H, W]` image; zero padding.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.col_cols();
    debug_assert_eq!(x.len(), g.channels * g.h * g.w);
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
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

/// Adjoint of [`im2col`]: scatters-and-adds patch rows back into `[C, H, W]`.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let ncols = g.col_cols();
    debug_assert_eq!(x.len(), g.channels * g.h * g.w);
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (c * g.k + ky) * g.k + kx;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Parameters of a grouped 2-D convolution over an `[N, Cin, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dDims {
    pub fn group_geom(&self) -> ConvGeom {
        ConvGeom::new(
            self.cin / self.groups,
            self.h,
            self.w,
            self.k,
            self.stride,
            self.pad,
        )
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let g = self.group_geom();
        (g.out_h, g.out_w)
    }

    pub fn macs(&self) -> u64 {
        let (oh, ow) = self.out_hw();
        (self.n * self.k * self.k * (self.cin / self.groups) * self.cout * oh * ow) as u64
    }
}

fn for_each_sample<F>(out: &mut [f64], per_sample: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(per_sample)
            .enumerate()
            .for_each(|(n, o)| f(n, o));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(per_sample)
            .enumerate()
            .for_each(|(n, o)| f(n, o));
    }
}

pub fn conv2d_forward(d: &Conv2dDims, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let g = d.group_geom();
    let (cig, cog) = (d.cin / d.groups, d.cout / d.groups);
    let hw = g.col_cols();
    let in_plane = d.h * d.w;
    let wk = cig * d.k * d.k;
    let mut out = vec![0.0; d.n * d.cout * hw];
    for_each_sample(&mut out, d.cout * hw, |n, o| {
        let mut cols = vec![0.0; g.col_rows() * hw];
        for grp in 0..d.groups {
            let xs = &x[(n * d.cin + grp * cig) * in_plane..(n * d.cin + (grp + 1) * cig) * in_plane];
            im2col(xs, &g, &mut cols);
            let wg = &w[grp * cog * wk..(grp + 1) * cog * wk];
            gemm(cog, wk, hw, wg, &cols, &mut o[grp * cog * hw..(grp + 1) * cog * hw]);
        }
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                o[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    d: &Conv2dDims,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let g = d.group_geom();
    let (cig, cog) = (d.cin / d.groups, d.cout / d.groups);
    let hw = g.col_cols();
    let in_plane = d.h * d.w;
    let wk = cig * d.k * d.k;

    let mut db = vec![0.0; d.cout];
    for n in 0..d.n {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = (n * d.cout + co) * hw;
            *acc += dy[base..base + hw].iter().sum::<f64>();
        }
    }

    // Per-sample partial weight gradients, reduced in sample order.
    let per_sample = |n: usize| -> (Vec<f64>, Vec<f64>) {
        let mut cols = vec![0.0; g.col_rows() * hw];
        let mut dcols = vec![0.0; g.col_rows() * hw];
        let mut dw = vec![0.0; w.len()];
        let mut dx = if need_dx {
            vec![0.0; d.cin * in_plane]
        } else {
            Vec::new()
        };
        for grp in 0..d.groups {
            let xs = &x[(n * d.cin + grp * cig) * in_plane..(n * d.cin + (grp + 1) * cig) * in_plane];
            let dys = &dy[(n * d.cout + grp * cog) * hw..(n * d.cout + (grp + 1) * cog) * hw];
            im2col(xs, &g, &mut cols);
            gemm_nt(
                cog,
                hw,
                wk,
                dys,
                &cols,
                &mut dw[grp * cog * wk..(grp + 1) * cog * wk],
            );
            if need_dx {
                dcols.fill(0.0);
                let wg = &w[grp * cog * wk..(grp + 1) * cog * wk];
                gemm_tn(wk, cog, hw, wg, dys, &mut dcols);
                col2im(
                    &dcols,
                    &g,
                    &mut dx[grp * cig * in_plane..(grp + 1) * cig * in_plane],
                );
            }
        }
        (dx, dw)
    };

    #[cfg(feature = "parallel")]
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..d.n).into_par_iter().map(per_sample).collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..d.n).map(per_sample).collect();

    let mut dw = vec![0.0; w.len()];
    let mut dx = if need_dx {
        Some(Vec::with_capacity(d.n * d.cin * in_plane))
    } else {
        None
    };
    for (pdx, pdw) in parts {
        dw.iter_mut().zip(&pdw).for_each(|(a, b)| *a += b);
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&pdx);
        }
    }
    (dx, dw, db)
}

/// Transposed convolution over `[N, Cin, H, W]` with weight `[Cin, Cout, K, K]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvT2dDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT2dDims {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h - 1) * self.stride + self.k - 2 * self.pad,
            (self.w - 1) * self.stride + self.k - 2 * self.pad,
        )
    }

    /// Geometry of the adjoint convolution (output grid → input grid).
    fn geom(&self) -> ConvGeom {
        let (oh, ow) = self.out_hw();
        let g = ConvGeom::new(self.cout, oh, ow, self.k, self.stride, self.pad);
        debug_assert_eq!((g.out_h, g.out_w), (self.h, self.w));
        g
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.k * self.k * self.cin * self.cout * self.h * self.w) as u64
    }
}

pub fn conv_transpose2d_forward(
    d: &ConvT2dDims,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let g = d.geom();
    let hw = d.h * d.w;
    let (oh, ow) = d.out_hw();
    let out_plane = oh * ow;
    let rows = g.col_rows();
    let mut out = vec![0.0; d.n * d.cout * out_plane];
    for_each_sample(&mut out, d.cout * out_plane, |n, o| {
        let mut cols = vec![0.0; rows * hw];
        gemm_tn(rows, d.cin, hw, w, &x[n * d.cin * hw..(n + 1) * d.cin * hw], &mut cols);
        col2im(&cols, &g, o);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                o[co * out_plane..(co + 1) * out_plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv_transpose2d_backward(
    d: &ConvT2dDims,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let g = d.geom();
    let hw = d.h * d.w;
    let (oh, ow) = d.out_hw();
    let out_plane = oh * ow;
    let rows = g.col_rows();

    let mut db = vec![0.0; d.cout];
    for n in 0..d.n {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = (n * d.cout + co) * out_plane;
            *acc += dy[base..base + out_plane].iter().sum::<f64>();
        }
    }

    let per_sample = |n: usize| -> (Vec<f64>, Vec<f64>) {
        let mut dcols = vec![0.0; rows * hw];
        im2col(&dy[n * d.cout * out_plane..(n + 1) * d.cout * out_plane], &g, &mut dcols);
        let xs = &x[n * d.cin * hw..(n + 1) * d.cin * hw];
        let mut dw = vec![0.0; w.len()];
        gemm_nt(d.cin, hw, rows, xs, &dcols, &mut dw);
        let mut dx = Vec::new();
        if need_dx {
            dx = vec![0.0; d.cin * hw];
            gemm(d.cin, rows, hw, w, &dcols, &mut dx);
        }
        (dx, dw)
    };

    #[cfg(feature = "parallel")]
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..d.n).into_par_iter().map(per_sample).collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..d.n).map(per_sample).collect();

    let mut dw = vec![0.0; w.len()];
    let mut dx = if need_dx {
        Some(Vec::with_capacity(d.n * d.cin * hw))
    } else {
        None
    };
    for (pdx, pdw) in parts {
        dw.iter_mut().zip(&pdw).for_each(|(a, b)| *a += b);
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&pdx);
        }
    }
    (dx, dw, db)
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    if inner == 1 {
        for (xs, ys) in x.chunks_exact(len).zip(y.chunks_exact_mut(len)) {
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (yv, &xv) in ys.iter_mut().zip(xs) {
                *yv = (xv - max).exp();
                denom += *yv;
            }
            let r = 1.0 / denom;
            ys.iter_mut().for_each(|v| *v *= r);
        }
        return y;
    }
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                y[idx(j)] = e;
                denom += e;
            }
            for j in 0..len {
                y[idx(j)] /= denom;
            }
        }
    }
    y
}

pub fn softmax_backward(y: &[f64], dy: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    if inner == 1 {
        for ((ys, dys), dxs) in y.chunks_exact(len).zip(dy.chunks_exact(len)).zip(dx.chunks_exact_mut(len)) {
            let dot = dot(ys, dys);
            for ((d, &yv), &g) in dxs.iter_mut().zip(ys).zip(dys) {
                *d = yv * (g - dot);
            }
        }
        return dx;
    }
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| y[idx(j)] * dy[idx(j)]).sum();
            for j in 0..len {
                dx[idx(j)] = y[idx(j)] * (dy[idx(j)] - dot);
            }
        }
    }
    dx
}

/// Normalization statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub struct NormSaved {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Layer norm over rows of length `dim`.
pub fn layer_norm_forward(
    x: &[f64],
    dim: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormSaved) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xs = &x[r * dim..(r + 1) * dim];
        let mean = xs.iter().sum::<f64>() / dim as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (xs[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * gamma[j] + beta[j];
        }
    }
    (y, NormSaved { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    saved: &NormSaved,
    gamma: &[f64],
    dy: &[f64],
    dim: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; dim];
    let mut dbeta = vec![0.0; dim];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let xh = &saved.xhat[r * dim..(r + 1) * dim];
        let g = &dy[r * dim..(r + 1) * dim];
        for j in 0..dim {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
        for j in 0..dim {
            dx[r * dim + j] = saved.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch statistics of an `[N, C, H·W]` tensor: per-channel mean and biased variance.
pub fn channel_stats(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Per-channel affine normalization with the given statistics.
pub fn batch_norm_apply(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormSaved) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let h = (x[i] - mean[ch]) * rstd[ch];
                xhat[i] = h;
                y[i] = h * gamma[ch] + beta[ch];
            }
        }
    }
    (y, NormSaved { xhat, rstd })
}

/// Returns `(dx, dgamma, dbeta)`. In training mode the statistics depend on `x`.
pub fn batch_norm_backward(
    saved: &NormSaved,
    gamma: &[f64],
    dy: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    training: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sg += dy[i];
                sgx += dy[i] * saved.xhat[i];
            }
        }
        dgamma[ch] = sgx;
        dbeta[ch] = sg;
        let scale = gamma[ch] * saved.rstd[ch];
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dx[i] = if training {
                    scale * (dy[i] - sg / m - saved.xhat[i] * sgx / m)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Source index of every output element of a permutation.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut idx = vec![0usize; numel];
    let mut counter = vec![0usize; nd];
    for slot in idx.iter_mut() {
        *slot = counter
            .iter()
            .zip(perm)
            .map(|(&c, &p)| c * in_strides[p])
            .sum();
        for d in (0..nd).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

/// Source index (into `[N, D, H, W]`) of every element of the unfolded
/// `[N·ph·pw, (H/ph)·(W/pw), D]` sequence tensor.
pub fn unfold_index(n: usize, d: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<usize> {
    let (gh, gw) = (h / ph, w / pw);
    let seq = gh * gw;
    let mut idx = vec![0usize; n * d * h * w];
    for b in 0..n {
        for dd in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let src = ((b * d + dd) * h + y) * w + x;
                    let pb = b * ph * pw + (y % ph) * pw + (x % pw);
                    let s = (y / ph) * gw + (x / pw);
                    idx[(pb * seq + s) * d + dd] = src;
                }
            }
        }
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, &b, &mut c);
        let mut c_nt = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c_nt);
        let mut c_tn = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c_tn);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c_nt[i] - want[i]).abs() < 1e-12);
            assert!((c_tn[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1);
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64).sin()).collect();
        let r: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 1.3).cos())
            .collect();
        let mut cols = vec![0.0; r.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&r, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn permute_index_transposes_matrix() {
        let idx = permute_index(&[2, 3], &[1, 0]);
        assert_eq!(idx, vec![0, 3, 1, 4, 2, 5]);
    }
}
