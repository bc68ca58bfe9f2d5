//! Raw numeric kernels behind the tape operations.

use rayon::prelude::*;

/// Samples per work unit in convolution. Fixed so the order of the weight
/// gradient reduction does not depend on the thread count.
const CONV_GROUP: usize = 8;

/// `c = alpha * a·b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every offset the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_area(&self) -> usize {
        self.oh * self.ow
    }
}

/// Writes the patches of one sample into `cols`, whose rows are `ld` apart.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize) {
    let area = g.out_area();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld..row * ld + area];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
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

/// Scatters one sample's patch gradients (rows `ld` apart) back onto `dx`.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64], ld: usize) {
    let area = g.out_area();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld..row * ld + area];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Each group of up to `CONV_GROUP` samples is one GEMM over a `(patch, group·area)` column matrix.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let in_len = g.c * g.h * g.w;
    let area = g.out_area();
    let out_len = g.oc * area;
    let mut out = vec![0.0; g.n * out_len];
    out.par_chunks_mut(CONV_GROUP * out_len)
        .enumerate()
        .for_each(|(gi, out_group)| {
            let count = out_group.len() / out_len;
            let ld = count * area;
            let mut cols = vec![0.0; g.patch() * ld];
            for j in 0..count {
                let n = gi * CONV_GROUP + j;
                im2col(
                    &x[n * in_len..(n + 1) * in_len],
                    g,
                    &mut cols[j * area..],
                    ld,
                );
            }
            let mut tmp = vec![0.0; g.oc * ld];
            gemm(
                g.oc,
                g.patch(),
                ld,
                1.0,
                w,
                (g.patch(), 1),
                &cols,
                (ld, 1),
                0.0,
                &mut tmp,
                (ld, 1),
            );
            for (j, out_n) in out_group.chunks_mut(out_len).enumerate() {
                for (o, dst) in out_n.chunks_mut(area).enumerate() {
                    let b = bias.map_or(0.0, |b| b[o]);
                    let src = &tmp[o * ld + j * area..o * ld + (j + 1) * area];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + b);
                }
            }
        });
    out
}

/// Returns `(dx, dw, db)` for the given output gradient; `dx` is empty unless `need_dx`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let in_len = g.c * g.h * g.w;
    let area = g.out_area();
    let out_len = g.oc * area;
    let wlen = g.oc * g.patch();
    let groups = g.n.div_ceil(CONV_GROUP);
    let mut dx = if need_dx {
        vec![0.0; g.n * in_len]
    } else {
        Vec::new()
    };
    let group_grad = |gi: usize, dx_group: Option<&mut [f64]>| {
        let first = gi * CONV_GROUP;
        let count = CONV_GROUP.min(g.n - first);
        let ld = count * area;
        let mut cols = vec![0.0; g.patch() * ld];
        let mut dgrp = vec![0.0; g.oc * ld];
        for j in 0..count {
            let n = first + j;
            im2col(
                &x[n * in_len..(n + 1) * in_len],
                g,
                &mut cols[j * area..],
                ld,
            );
            for o in 0..g.oc {
                let src = &dout[n * out_len + o * area..n * out_len + (o + 1) * area];
                dgrp[o * ld + j * area..o * ld + (j + 1) * area].copy_from_slice(src);
            }
        }
        // dw = dgrp · colsᵀ
        let mut dw = vec![0.0; wlen];
        gemm(
            g.oc,
            ld,
            g.patch(),
            1.0,
            &dgrp,
            (ld, 1),
            &cols,
            (1, ld),
            0.0,
            &mut dw,
            (g.patch(), 1),
        );
        let db: Vec<f64> = dgrp.chunks(ld).map(|r| r.iter().sum()).collect();
        if let Some(dx_group) = dx_group {
            // dcols = wᵀ · dgrp, reusing the column buffer
            gemm(
                g.patch(),
                g.oc,
                ld,
                1.0,
                w,
                (1, g.patch()),
                &dgrp,
                (ld, 1),
                0.0,
                &mut cols,
                (ld, 1),
            );
            for (j, dx_n) in dx_group.chunks_mut(in_len).enumerate() {
                col2im(&cols[j * area..], g, dx_n, ld);
            }
        }
        (dw, db)
    };
    let partials: Vec<(Vec<f64>, Vec<f64>)> = if need_dx {
        dx.par_chunks_mut(CONV_GROUP * in_len)
            .enumerate()
            .map(|(gi, d)| group_grad(gi, Some(d)))
            .collect()
    } else {
        (0..groups)
            .into_par_iter()
            .map(|gi| group_grad(gi, None))
            .collect()
    };
    let mut dw = vec![0.0; wlen];
    let mut db = vec![0.0; g.oc];
    for (pw, pb) in &partials {
        dw.iter_mut().zip(pw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub size: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Max pooling; returns outputs and, per output, the flat input index of the max.
pub(crate) fn max_pool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base;
                for i in 0..g.size {
                    for j in 0..g.size {
                        let idx = base + (oy * g.stride + i) * g.w + ox * g.stride + j;
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

pub(crate) fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let norm = 1.0 / (g.size * g.size) as f64;
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for i in 0..g.size {
                    let row = base + (oy * g.stride + i) * g.w + ox * g.stride;
                    acc += x[row..row + g.size].iter().sum::<f64>();
                }
                out.push(acc * norm);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dout: &[f64], g: &PoolGeom) -> Vec<f64> {
    let norm = 1.0 / (g.size * g.size) as f64;
    let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = dout[(plane * g.oh + oy) * g.ow + ox] * norm;
                for i in 0..g.size {
                    let row = base + (oy * g.stride + i) * g.w + ox * g.stride;
                    dx[row..row + g.size].iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }
    dx
}

/// Channel layout of a batch-norm input: `outer` samples, `channels`, `inner` positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl NormLayout {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match *shape {
            [n, c] => Some(NormLayout {
                outer: n,
                channels: c,
                inner: 1,
            }),
            [n, c, h, w] => Some(NormLayout {
                outer: n,
                channels: c,
                inner: h * w,
            }),
            _ => None,
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn for_channel(&self, x: &[f64], c: usize, mut f: impl FnMut(usize, f64)) {
        for n in 0..self.outer {
            let start = (n * self.channels + c) * self.inner;
            for (i, &v) in x[start..start + self.inner].iter().enumerate() {
                f(start + i, v);
            }
        }
    }
}

pub(crate) struct NormForward {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn batch_norm_train(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    layout: NormLayout,
    eps: f64,
) -> NormForward {
    let m = layout.count() as f64;
    let mut mean = vec![0.0; layout.channels];
    let mut var = vec![0.0; layout.channels];
    let mut inv_std = vec![0.0; layout.channels];
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for c in 0..layout.channels {
        let mut s = 0.0;
        layout.for_channel(x, c, |_, v| s += v);
        let mu = s / m;
        let mut ss = 0.0;
        layout.for_channel(x, c, |_, v| ss += (v - mu) * (v - mu));
        let v = ss / m;
        let is = 1.0 / (v + eps).sqrt();
        layout.for_channel(x, c, |i, val| {
            xhat[i] = (val - mu) * is;
            out[i] = gamma[c] * xhat[i] + beta[c];
        });
        mean[c] = mu;
        var[c] = v;
        inv_std[c] = is;
    }
    NormForward {
        out,
        xhat,
        inv_std,
        mean,
        var,
    }
}

/// Returns `(dx, dgamma, dbeta)` for train-mode batch norm.
pub(crate) fn batch_norm_train_backward(
    dout: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    layout: NormLayout,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = layout.count() as f64;
    let mut dx = vec![0.0; dout.len()];
    let mut dgamma = vec![0.0; layout.channels];
    let mut dbeta = vec![0.0; layout.channels];
    for c in 0..layout.channels {
        let (mut sd, mut sdx) = (0.0, 0.0);
        layout.for_channel(dout, c, |i, d| {
            sd += d;
            sdx += d * xhat[i];
        });
        dgamma[c] = sdx;
        dbeta[c] = sd;
        let k = gamma[c] * inv_std[c] / m;
        layout.for_channel(dout, c, |i, d| {
            dx[i] = k * (m * d - sd - xhat[i] * sdx);
        });
    }
    (dx, dgamma, dbeta)
}
