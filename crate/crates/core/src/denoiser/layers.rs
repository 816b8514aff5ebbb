//! Forward/backward kernels on `C x H x W` feature maps.

/// Feature map `C x H x W`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Feat {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc as isize, 1));
    // SAFETY: the asserts above bound every index reachable through the
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
            rsc as isize,
            1,
        );
    }
}

/// Pixels per im2col strip; keeps the column buffer cache resident.
const STRIP_PIXELS: usize = 512;

fn strip_rows(h: usize, w: usize) -> usize {
    (STRIP_PIXELS / w).clamp(1, h)
}

/// Column matrix `[c*9, (y1-y0)*w]` for output rows `y0..y1`.
fn im2col3(x: &Feat, y0: usize, y1: usize, cols: &mut Vec<f64>) {
    let (h, w) = (x.h, x.w);
    let sp = (y1 - y0) * w;
    cols.clear();
    cols.resize(x.c * 9 * sp, 0.0);
    for ci in 0..x.c {
        let src = &x.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * sp..][..sp];
                let (x0, x1) = match kx {
                    0 => (1, w),
                    1 => (0, w),
                    _ => (0, w - 1),
                };
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w + kx;
                    let d = (y - y0) * w;
                    row[d + x0..d + x1].copy_from_slice(&src[s + x0 - 1..s + x1 - 1]);
                }
            }
        }
    }
}

/// Scatter-adds a strip column matrix back into `dx`.
fn col2im3_add(cols: &[f64], dx: &mut Feat, y0: usize, y1: usize) {
    let (h, w) = (dx.h, dx.w);
    let sp = (y1 - y0) * w;
    for ci in 0..dx.c {
        let dst = &mut dx.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * sp..][..sp];
                let (x0, x1) = match kx {
                    0 => (1, w),
                    1 => (0, w),
                    _ => (0, w - 1),
                };
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = sy as usize * w + kx;
                    let d = (y - y0) * w;
                    for (o, &v) in dst[s + x0 - 1..s + x1 - 1].iter_mut().zip(&row[d + x0..d + x1]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `[out, in, 3, 3]`.
pub fn conv3x3(x: &Feat, weight: &[f64], bias: &[f64], out_c: usize) -> Feat {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let k = x.c * 9;
    let mut out = Feat::zeros(out_c, h, w);
    for (co, chunk) in out.data.chunks_mut(hw).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[co]);
    }
    let rows = strip_rows(h, w);
    let mut cols = Vec::new();
    for y0 in (0..h).step_by(rows) {
        let y1 = (y0 + rows).min(h);
        let sp = (y1 - y0) * w;
        im2col3(x, y0, y1, &mut cols);
        gemm(
            out_c,
            k,
            sp,
            weight,
            (k as isize, 1),
            &cols,
            (sp as isize, 1),
            1.0,
            &mut out.data[y0 * w..],
            hw,
        );
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv3x3_backward(
    x: &Feat,
    weight: &[f64],
    dout: &Feat,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Feat {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let k = x.c * 9;
    let out_c = dout.c;
    for (co, chunk) in dout.data.chunks(hw).enumerate() {
        dbias[co] += chunk.iter().sum::<f64>();
    }
    let mut dx = Feat::zeros(x.c, h, w);
    let rows = strip_rows(h, w);
    let (mut cols, mut dcols) = (Vec::new(), vec![0.0; k * rows * w]);
    for y0 in (0..h).step_by(rows) {
        let y1 = (y0 + rows).min(h);
        let sp = (y1 - y0) * w;
        im2col3(x, y0, y1, &mut cols);
        let d = &dout.data[y0 * w..];
        // dW[co, k] += dout[co, p] * cols[k, p]
        gemm(out_c, sp, k, d, (hw as isize, 1), &cols, (1, sp as isize), 1.0, dweight, k);
        // dcols[k, p] = W[co, k] * dout[co, p]
        gemm(k, out_c, sp, weight, (1, k as isize), d, (hw as isize, 1), 0.0, &mut dcols, sp);
        col2im3_add(&dcols[..k * sp], &mut dx, y0, y1);
    }
    dx
}

/// 1x1 convolution. `weight` is `[out, in]`.
pub fn conv1x1(x: &Feat, weight: &[f64], bias: &[f64], out_c: usize) -> Feat {
    let hw = x.plane();
    let mut out = Feat::zeros(out_c, x.h, x.w);
    for (co, chunk) in out.data.chunks_mut(hw).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[co]);
    }
    gemm(out_c, x.c, hw, weight, (x.c as isize, 1), &x.data, (hw as isize, 1), 1.0, &mut out.data, hw);
    out
}

pub fn conv1x1_backward(
    x: &Feat,
    weight: &[f64],
    dout: &Feat,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Feat {
    let hw = x.plane();
    for (co, chunk) in dout.data.chunks(hw).enumerate() {
        dbias[co] += chunk.iter().sum::<f64>();
    }
    gemm(dout.c, hw, x.c, &dout.data, (hw as isize, 1), &x.data, (1, hw as isize), 1.0, dweight, x.c);
    let mut dx = Feat::zeros(x.c, x.h, x.w);
    gemm(x.c, dout.c, hw, weight, (1, x.c as isize), &dout.data, (hw as isize, 1), 0.0, &mut dx.data, hw);
    dx
}

pub const GN_EPS: f64 = 1e-5;

/// Group normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub xhat: Feat,
    pub rstd: Vec<f64>,
}

pub fn group_norm(x: &Feat, groups: usize, gamma: &[f64], beta: &[f64]) -> (Feat, GroupNormCache) {
    let hw = x.plane();
    let per = x.c / groups;
    let n = (per * hw) as f64;
    let mut xhat = Feat::zeros(x.c, x.h, x.w);
    let mut out = Feat::zeros(x.c, x.h, x.w);
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let range = g * per * hw..(g + 1) * per * hw;
        let src = &x.data[range.clone()];
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + GN_EPS).sqrt();
        rstd.push(r);
        for (d, s) in xhat.data[range].iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        for c in g * per..(g + 1) * per {
            let (xs, os) = (
                &xhat.data[c * hw..(c + 1) * hw],
                &mut out.data[c * hw..(c + 1) * hw],
            );
            for (o, &v) in os.iter_mut().zip(xs) {
                *o = gamma[c] * v + beta[c];
            }
        }
    }
    (out, GroupNormCache { xhat, rstd })
}

pub fn group_norm_backward(
    cache: &GroupNormCache,
    groups: usize,
    gamma: &[f64],
    dout: &Feat,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Feat {
    let xhat = &cache.xhat;
    let hw = xhat.plane();
    let per = xhat.c / groups;
    let n = (per * hw) as f64;
    let mut dx = Feat::zeros(xhat.c, xhat.h, xhat.w);
    for g in 0..groups {
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for c in g * per..(g + 1) * per {
            let xs = &xhat.data[c * hw..(c + 1) * hw];
            let ds = &dout.data[c * hw..(c + 1) * hw];
            let (mut dg, mut db) = (0.0, 0.0);
            for (&d, &v) in ds.iter().zip(xs) {
                dg += d * v;
                db += d;
            }
            dgamma[c] += dg;
            dbeta[c] += db;
            sum_d += gamma[c] * db;
            sum_dx += gamma[c] * dg;
        }
        let r = cache.rstd[g];
        for c in g * per..(g + 1) * per {
            let xs = &xhat.data[c * hw..(c + 1) * hw];
            let ds = &dout.data[c * hw..(c + 1) * hw];
            let out = &mut dx.data[c * hw..(c + 1) * hw];
            for ((o, &d), &v) in out.iter_mut().zip(ds).zip(xs) {
                *o = r / n * (n * gamma[c] * d - sum_d - v * sum_dx);
            }
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avg_pool2(x: &Feat) -> Feat {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Feat::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = &x.data[c * x.h * x.w..];
        let dst = &mut out.data[c * h2 * w2..(c + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * w2 + xx] =
                    0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dout: &Feat) -> Feat {
    let (h, w) = (dout.h * 2, dout.w * 2);
    let mut dx = Feat::zeros(dout.c, h, w);
    for c in 0..dout.c {
        for y in 0..h {
            for xx in 0..w {
                dx.data[c * h * w + y * w + xx] =
                    0.25 * dout.data[c * dout.h * dout.w + (y / 2) * dout.w + xx / 2];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Feat) -> Feat {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Feat::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[c * h * w + y * w + xx] = x.data[c * x.h * x.w + (y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &Feat) -> Feat {
    let (h2, w2) = (dout.h / 2, dout.w / 2);
    let mut dx = Feat::zeros(dout.c, h2, w2);
    for c in 0..dout.c {
        for y in 0..dout.h {
            for xx in 0..dout.w {
                dx.data[c * h2 * w2 + (y / 2) * w2 + xx / 2] +=
                    dout.data[c * dout.h * dout.w + y * dout.w + xx];
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Feat, b: &Feat) -> Feat {
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feat {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split_channels(x: &Feat, first: usize) -> (Feat, Feat) {
    let cut = first * x.plane();
    (
        Feat {
            c: first,
            h: x.h,
            w: x.w,
            data: x.data[..cut].to_vec(),
        },
        Feat {
            c: x.c - first,
            h: x.h,
            w: x.w,
            data: x.data[cut..].to_vec(),
        },
    )
}

/// Dense layer `y = W x + b` with `W` as `[out, in]`.
pub fn linear(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

/// Accumulates into `dweight`/`dbias` and returns `dx`.
pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (o, &d) in dout.iter().enumerate() {
        dbias[o] += d;
        let row = &weight[o * n_in..(o + 1) * n_in];
        let drow = &mut dweight[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += d * x[i];
            dx[i] += d * row[i];
        }
    }
    dx
}
