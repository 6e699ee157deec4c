//! Forward and backward kernels on NCHW `f64` buffers.
//!
//! Convolutions lower each sample and group to a column matrix and use a
//! blocked matrix product; everything else is a direct loop.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `dilation * (k - 1) / 2` on every side; preserves
    /// spatial dims at stride 1.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    /// Input and output channels are split into this many independent
    /// groups; `groups == channels` is a depthwise convolution.
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: Padding::Same,
            groups: 1,
        }
    }
}

/// Resolved geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub spec: ConvSpec,
}

impl ConvGeometry {
    /// `input` is (n, c_in, h, w); `weight` is (c_out, c_in / groups, kh, kw).
    pub fn new(input: (usize, usize, usize, usize), weight: (usize, usize, usize, usize), spec: ConvSpec) -> Result<Self> {
        let (n, c_in, h, w) = input;
        let (c_out, cg, kh, kw) = weight;
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return Err(Error::shape("stride, dilation and groups must be at least 1"));
        }
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 || cg != c_in / spec.groups {
            return Err(Error::shape(format!(
                "weight ({c_out}, {cg}, {kh}, {kw}) does not fit {c_in} input channels in {} groups",
                spec.groups
            )));
        }
        let (pad_h, pad_w) = match spec.padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::shape("same padding needs odd kernels"));
                }
                (spec.dilation * (kh - 1) / 2, spec.dilation * (kw - 1) / 2)
            }
        };
        let span_h = spec.dilation * (kh - 1) + 1;
        let span_w = spec.dilation * (kw - 1) + 1;
        if h + 2 * pad_h < span_h || w + 2 * pad_w < span_w {
            return Err(Error::shape(format!("{h}x{w} input is smaller than the {span_h}x{span_w} kernel span")));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho: (h + 2 * pad_h - span_h) / spec.stride + 1,
            wo: (w + 2 * pad_w - span_w) / spec.stride + 1,
            pad_h,
            pad_w,
            spec,
        })
    }

    fn cg(&self) -> usize {
        self.c_in / self.spec.groups
    }

    fn cog(&self) -> usize {
        self.c_out / self.spec.groups
    }

    fn k(&self) -> usize {
        self.cg() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    pub fn output_len(&self) -> usize {
        self.n * self.c_out * self.p()
    }
}

/// `c = a · b + beta · c` for row-major `a` (m×k, or k×m if `a_t`),
/// `b` (k×n, or n×k if `b_t`) and `c` (m×n).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index reachable through the
    // given dimensions and strides.
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

/// Column matrix (k × p) of group `g` of one sample.
fn im2col(x: &[f64], g: &ConvGeometry, group: usize, cols: &mut [f64]) {
    let (s, d) = (g.spec.stride, g.spec.dilation);
    let p = g.p();
    for ci in 0..g.cg() {
        let plane = &x[(group * g.cg() + ci) * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki * d) as isize - g.pad_h as isize;
                    let out = &mut row[oy * g.wo..][..g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kj * d) as isize - g.pad_w as isize;
                        *o = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adds a column matrix back onto the input-gradient planes of one group.
fn col2im(cols: &[f64], g: &ConvGeometry, group: usize, dx: &mut [f64]) {
    let (s, d) = (g.spec.stride, g.spec.dilation);
    let p = g.p();
    for ci in 0..g.cg() {
        let plane = &mut dx[(group * g.cg() + ci) * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..g.ho {
                    let iy = (oy * s + ki * d) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    for (ox, v) in row[oy * g.wo..][..g.wo].iter().enumerate() {
                        let ix = (ox * s + kj * d) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (k, p, cog) = (g.k(), g.p(), g.cog());
    let mut out = vec![0.0; g.output_len()];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.n {
        let xs = &x[n * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w];
        for group in 0..g.spec.groups {
            im2col(xs, g, group, &mut cols);
            let w = &weight[group * cog * k..][..cog * k];
            let o = &mut out[(n * g.c_out + group * cog) * p..][..cog * p];
            gemm(cog, k, p, w, false, &cols, false, o, 0.0);
        }
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for (c, bc) in b.iter().enumerate() {
                out[(n * g.c_out + c) * p..][..p].iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    out
}

/// Returns (d input, d weight, d bias).
pub fn conv2d_backward(x: &[f64], weight: &[f64], dout: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, p, cog) = (g.k(), g.p(), g.cog());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; g.c_out];
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for n in 0..g.n {
        let xs = &x[n * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w];
        let dxs = &mut dx[n * g.c_in * g.h * g.w..][..g.c_in * g.h * g.w];
        for group in 0..g.spec.groups {
            im2col(xs, g, group, &mut cols);
            let dy = &dout[(n * g.c_out + group * cog) * p..][..cog * p];
            gemm(cog, p, k, dy, false, &cols, true, &mut dw[group * cog * k..][..cog * k], 1.0);
            let w = &weight[group * cog * k..][..cog * k];
            gemm(k, cog, p, w, true, dy, false, &mut dcols, 0.0);
            col2im(&dcols, g, group, dxs);
        }
        for c in 0..g.c_out {
            db[c] += dout[(n * g.c_out + c) * p..][..p].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

/// 2×2 stride-2 max pooling; returns the output and the flat input index of
/// every output's maximum (first in scan order on ties).
pub fn max_pool2_forward(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] || (x[i].is_nan() && !x[best].is_nan()) {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(argmax: &[usize], dout: &[f64], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(dout) {
        dx[i] += g;
    }
    dx
}

pub fn avg_pool2_forward(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let p = &x[plane * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let (r, s) = (2 * oy * w, 2 * ox);
                out.push(0.25 * (p[r + s] + p[r + s + 1] + p[r + w + s] + p[r + w + s + 1]));
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dout: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let d = &mut dx[plane * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = 0.25 * dout[(plane * ho + oy) * wo + ox];
                let (r, s) = (2 * oy * w, 2 * ox);
                d[r + s] += g;
                d[r + s + 1] += g;
                d[r + w + s] += g;
                d[r + w + s + 1] += g;
            }
        }
    }
    dx
}

/// Source index pair and weight of the upper neighbour for align-corners
/// interpolation from `n_in` to `n_out` samples.
fn align_corners_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling with aligned corners.
pub fn bilinear_forward(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), ho: usize, wo: usize) -> Vec<f64> {
    let ty = align_corners_taps(h, ho);
    let tx = align_corners_taps(w, wo);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let p = &x[plane * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

pub fn bilinear_backward(dout: &[f64], (n, c, h, w): (usize, usize, usize, usize), ho: usize, wo: usize) -> Vec<f64> {
    let ty = align_corners_taps(h, ho);
    let tx = align_corners_taps(w, wo);
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let d = &mut dx[plane * h * w..][..h * w];
        let g = &dout[plane * ho * wo..][..ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                d[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += v * (1.0 - fy) * fx;
                d[y1 * w + x0] += v * fy * (1.0 - fx);
                d[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel batch statistics over (n, h, w): (mean, biased variance).
pub fn channel_moments(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> (Vec<f64>, Vec<f64>) {
    let m = (n * h * w) as f64;
    let hw = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let s: f64 = (0..n).map(|b| x[(b * c + ch) * hw..][..hw].iter().sum::<f64>()).sum();
        mean[ch] = s / m;
        let q: f64 = (0..n)
            .map(|b| x[(b * c + ch) * hw..][..hw].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>())
            .sum();
        var[ch] = q / m;
    }
    (mean, var)
}

/// Normalizes with the given moments; returns (output, normalized input, 1/std).
pub fn batch_norm_forward(
    x: &[f64],
    dims: (usize, usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                out[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    (out, xhat, inv_std)
}

/// Returns (d input, d gamma, d beta). With `batch_stats` the moments are
/// functions of the input and contribute to its gradient.
pub fn batch_norm_backward(
    dout: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    dims: (usize, usize, usize, usize),
    batch_stats: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dbeta[ch] += dout[i];
                dgamma[ch] += dout[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![0.0; dout.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma[ch] * inv_std[ch];
            for i in off..off + hw {
                dx[i] = if batch_stats {
                    scale * (dout[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                } else {
                    scale * dout[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-cell softmax over the channel axis.
pub fn softmax_channels(logits: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; logits.len()];
    for b in 0..n {
        for cell in 0..hw {
            let at = |k: usize| (b * c + k) * hw + cell;
            let max = (0..c).map(|k| logits[at(k)]).fold(f64::NEG_INFINITY, |m, v| if v > m || v.is_nan() { v } else { m });
            let mut sum = 0.0;
            for k in 0..c {
                let e = (logits[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..c {
                out[at(k)] /= sum;
            }
        }
    }
    out
}
