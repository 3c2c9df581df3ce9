//! NCHW network ops: convolution, pooling, resampling, normalization and
//! dropout.

use std::rc::Rc;

use rand::Rng;

use super::{Backprop, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Out-of-range reads take the nearest edge value.
    Replicate,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    oh: usize,
    ow: usize,
    mode: Padding,
}

impl ConvGeom {
    /// Visits every (output, input) pixel pair of one (out plane, in
    /// plane, tap) triple as row runs: `f(out_start, in_start, len)` covers
    /// outputs `out_start..out_start + len` reading inputs
    /// `in_start, in_start + stride, ...`.
    #[inline]
    fn for_each_run(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let (h, w) = (self.h as isize, self.w as isize);
        match self.mode {
            Padding::Zero => {
                // valid ox range: 0 <= ox*s + kx - p < w
                let kx = kx as isize;
                let lo = ((p - kx).max(0) + s - 1) / s;
                let hi = if w - 1 + p - kx < 0 {
                    0
                } else {
                    ((w - 1 + p - kx) / s + 1).min(self.ow as isize)
                };
                if lo >= hi {
                    return;
                }
                let len = (hi - lo) as usize;
                for oy in 0..self.oh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let ix = (lo * s + kx - p) as usize;
                    f(oy * self.ow + lo as usize, iy as usize * self.w + ix, len);
                }
            }
            Padding::Replicate => {
                for oy in 0..self.oh {
                    let iy = (oy as isize * s + ky as isize - p).clamp(0, h - 1) as usize;
                    for ox in 0..self.ow {
                        let ix = (ox as isize * s + kx as isize - p).clamp(0, w - 1) as usize;
                        f(oy * self.ow + ox, iy * self.w + ix, 1);
                    }
                }
            }
        }
    }
}

/// `dst[i] += a * src[i * step]`.
#[inline]
fn axpy_strided(dst: &mut [f64], a: f64, src: &[f64], step: usize) {
    if step == 1 {
        let n = dst.len();
        for (d, s) in dst.iter_mut().zip(&src[..n]) {
            *d += a * s;
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src.iter().step_by(step)) {
            *d += a * s;
        }
    }
}

/// `dst[i * step] += a * src[i]`.
#[inline]
fn scatter_strided(dst: &mut [f64], a: f64, src: &[f64], step: usize) {
    if step == 1 {
        for (d, s) in dst[..src.len()].iter_mut().zip(src) {
            *d += a * s;
        }
    } else {
        for (d, s) in dst.iter_mut().step_by(step).zip(src) {
            *d += a * s;
        }
    }
}

/// `sum_i a[i] * b[i * step]`.
#[inline]
fn dot_strided(a: &[f64], b: &[f64], step: usize) -> f64 {
    if step == 1 {
        a.iter().zip(&b[..a.len()]).map(|(x, y)| x * y).sum()
    } else {
        a.iter().zip(b.iter().step_by(step)).map(|(x, y)| x * y).sum()
    }
}

fn expect_4d(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(op, format!("expected NCHW, got {:?}", t.shape()))),
    }
}

impl<'t> Var<'t> {
    /// 2D cross-correlation. `weight` is `(Cout, Cin/groups, KH, KW)`,
    /// `bias` is `(Cout)`. Padding is symmetric by `pad` pixels.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
        mode: Padding,
        groups: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let wt = weight.value();
        let [n, cin, h, w] = expect_4d("conv2d", &x)?;
        let [cout, cin_g, kh, kw] = expect_4d("conv2d", &wt)?;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![cout],
                    rhs: b.shape(),
                });
            }
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{w} with pad {pad}"),
            ));
        }
        let g = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            mode,
        };
        let bias_val = bias.map(|b| b.value());
        let out = conv_forward(&g, x.data(), wt.data(), bias_val.as_deref().map(|b| b.data()));
        let out = Tensor::from_parts(vec![n, cout, g.oh, g.ow], out, x.dtype());
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.tape.record(
            "conv2d",
            &inputs,
            out,
            Box::new(move |bp: &Backprop| {
                let (gx, gw, gb) = conv_backward(
                    &g,
                    bp.inputs[0].data(),
                    bp.inputs[1].data(),
                    bp.grad,
                    bp.needs,
                );
                let mut v = vec![gx, gw];
                if bp.inputs.len() == 3 {
                    v.push(gb);
                }
                v
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = expect_4d("upsample2x", &x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], out, x.dtype());
        self.tape.record(
            "upsample2x",
            &[self],
            out,
            Box::new(move |bp: &Backprop| {
                let mut g = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &bp.grad[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut g[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// 3x3 stride-1 max pool with replicate padding.
    pub fn max_pool3(self) -> Result<Var<'t>> {
        self.extremum_pool3("max_pool3", |a, b| a > b)
    }

    /// 3x3 stride-1 min pool with replicate padding.
    pub fn min_pool3(self) -> Result<Var<'t>> {
        self.extremum_pool3("min_pool3", |a, b| a < b)
    }

    fn extremum_pool3(self, op: &'static str, better: fn(f64, f64) -> bool) -> Result<Var<'t>> {
        let x = self.value();
        let (planes, h, w) = x.planes()?;
        let mut out = vec![0.0; x.len()];
        let mut arg = vec![0usize; x.len()];
        for p in 0..planes {
            let base = p * h * w;
            let src = &x.data()[base..base + h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut best = y * w + xx;
                    for dy in -1isize..=1 {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        for dx in -1isize..=1 {
                            let xc = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                            let j = yy * w + xc;
                            if better(src[j], src[best]) {
                                best = j;
                            }
                        }
                    }
                    out[base + y * w + xx] = src[best];
                    arg[base + y * w + xx] = base + best;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out, x.dtype());
        let len = x.len();
        self.tape.record(
            op,
            &[self],
            out,
            Box::new(move |bp: &Backprop| {
                let mut g = vec![0.0; len];
                for (i, &a) in arg.iter().enumerate() {
                    g[a] += bp.grad[i];
                }
                vec![Some(g)]
            }),
        )
    }

    /// Non-overlapping `q`x`q` average pooling over the last two axes;
    /// trailing rows/columns that do not fill a window are dropped.
    pub fn avg_pool(self, q: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (planes, h, w) = x.planes()?;
        if q == 0 || h < q || w < q {
            return Err(Error::invalid(
                "avg_pool",
                format!("window {q} does not fit {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / q, w / q);
        let norm = 1.0 / (q * q) as f64;
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh * q {
                for xx in 0..ow * q {
                    out[p * oh * ow + (y / q) * ow + xx / q] += x.data()[p * h * w + y * w + xx] * norm;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        let nd = shape.len();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let out = Tensor::from_parts(shape, out, x.dtype());
        let len = x.len();
        self.tape.record(
            "avg_pool",
            &[self],
            out,
            Box::new(move |bp: &Backprop| {
                let mut g = vec![0.0; len];
                for p in 0..planes {
                    for y in 0..oh * q {
                        for xx in 0..ow * q {
                            g[p * h * w + y * w + xx] = bp.grad[p * oh * ow + (y / q) * ow + xx / q] * norm;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Global average over H and W: `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn mean_hw(self) -> Result<Var<'t>> {
        let x = self.value();
        let [n, c, h, w] = expect_4d("mean_hw", &x)?;
        let hw = h * w;
        let out: Vec<f64> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_parts(vec![n, c, 1, 1], out, x.dtype());
        self.tape.record(
            "mean_hw",
            &[self],
            out,
            Box::new(move |bp: &Backprop| {
                let g = bp
                    .grad
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Normalizes an NCHW tensor over `axes` and applies a per-channel affine
    /// map. For [`NormAxes::Batch`] the per-channel batch mean and biased
    /// variance are also returned.
    pub fn normalize(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        axes: NormAxes,
        eps: f64,
    ) -> Result<(Var<'t>, Option<(Vec<f64>, Vec<f64>)>)> {
        let x = self.value();
        let [n, c, h, w] = expect_4d("normalize", &x)?;
        for p in [gamma, beta] {
            if p.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "normalize",
                    lhs: vec![c],
                    rhs: p.shape(),
                });
            }
        }
        let hw = h * w;
        let group_of: Rc<dyn Fn(usize) -> usize> = match axes {
            NormAxes::Batch => Rc::new(move |i| (i / hw) % c),
            NormAxes::Channels => Rc::new(move |i| (i / (c * hw)) * hw + i % hw),
            NormAxes::Sample => Rc::new(move |i| i / (c * hw)),
        };
        let (groups, members) = match axes {
            NormAxes::Batch => (c, n * hw),
            NormAxes::Channels => (n * hw, c),
            NormAxes::Sample => (n, c * hw),
        };
        let xd = x.data();
        let mut mean = vec![0.0; groups];
        for (i, &v) in xd.iter().enumerate() {
            mean[group_of(i)] += v;
        }
        mean.iter_mut().for_each(|m| *m /= members as f64);
        let mut var = vec![0.0; groups];
        for (i, &v) in xd.iter().enumerate() {
            let d = v - mean[group_of(i)];
            var[group_of(i)] += d * d;
        }
        var.iter_mut().for_each(|v| *v /= members as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat: Rc<Vec<f64>> = Rc::new(
            xd.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let g = group_of(i);
                    (v - mean[g]) * inv_std[g]
                })
                .collect(),
        );
        let gv = gamma.value();
        let bv = beta.value();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| {
                let ch = (i / hw) % c;
                gv.data()[ch] * xh + bv.data()[ch]
            })
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), out, x.dtype());
        let stats = matches!(axes, NormAxes::Batch).then(|| (mean.clone(), var.clone()));
        let var_out = self.tape.record(
            "normalize",
            &[self, gamma, beta],
            out,
            Box::new(move |bp: &Backprop| {
                let gd = bp.inputs[1].data();
                let mut s1 = vec![0.0; groups];
                let mut s2 = vec![0.0; groups];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, &g) in bp.grad.iter().enumerate() {
                    let ch = (i / hw) % c;
                    let dxh = g * gd[ch];
                    let grp = group_of(i);
                    s1[grp] += dxh;
                    s2[grp] += dxh * xhat[i];
                    dgamma[ch] += g * xhat[i];
                    dbeta[ch] += g;
                }
                let m = members as f64;
                let dx = bp.needs[0].then(|| {
                    bp.grad
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| {
                            let ch = (i / hw) % c;
                            let grp = group_of(i);
                            let dxh = g * gd[ch];
                            inv_std[grp] / m * (m * dxh - s1[grp] - xhat[i] * s2[grp])
                        })
                        .collect()
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }),
        )?;
        Ok((var_out, stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_fixed(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let [_, c, h, w] = expect_4d("batch_norm", &x)?;
        if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![c],
                rhs: gamma.shape(),
            });
        }
        let hw = h * w;
        let mean: Rc<Vec<f64>> = Rc::new(running_mean.to_vec());
        let inv: Rc<Vec<f64>> = Rc::new(running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect());
        let gv = gamma.value();
        let bv = beta.value();
        let out = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - mean[ch]) * inv[ch] * gv.data()[ch] + bv.data()[ch]
            })
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), out, x.dtype());
        self.tape.record(
            "batch_norm",
            &[self, gamma, beta],
            out,
            Box::new(move |bp: &Backprop| {
                let xd = bp.inputs[0].data();
                let gd = bp.inputs[1].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = bp.needs[0].then(|| Vec::with_capacity(xd.len()));
                for (i, &g) in bp.grad.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += g * (xd[i] - mean[ch]) * inv[ch];
                    dbeta[ch] += g;
                    if let Some(dx) = &mut dx {
                        dx.push(g * gd[ch] * inv[ch]);
                    }
                }
                vec![dx, Some(dgamma), Some(dbeta)]
            }),
        )
    }

    /// Inverted dropout: keeps each element with probability `1 - p` and
    /// scales survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng>(self, p: f64, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p = {p} outside [0, 1)")));
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Rc<Vec<f64>> = Rc::new(
            (0..x.len())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect(),
        );
        let out = x.data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), out, x.dtype());
        self.tape.record(
            "dropout",
            &[self],
            out,
            Box::new(move |bp: &Backprop| {
                vec![Some(bp.grad.iter().zip(mask.iter()).map(|(g, m)| g * m).collect())]
            }),
        )
    }
}

/// Which elements share normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxes {
    /// One group per channel over (N, H, W): batch norm.
    Batch,
    /// One group per (n, h, w) location over C: layer norm over channels.
    Channels,
    /// One group per sample over (C, H, W).
    Sample,
}

/// `c = op(a) (m x k) * op(b) (k x n) + beta * c`, row-major; `op` transposes
/// a stored `(k x m)` / `(n x k)` operand when its flag is set.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the checked extents.
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

impl ConvGeom {
    /// A pointwise conv reads its input planes directly as the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Patch matrix of one sample: row `(ci, ky, kx)`, column = output pixel.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ohw, hw) = (self.oh * self.ow, self.h * self.w);
        let mut col = vec![0.0; self.cin * self.kh * self.kw * ohw];
        for ci in 0..self.cin {
            let src = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &mut col[r * ohw..(r + 1) * ohw];
                    self.for_each_run(ky, kx, |o, i, len| {
                        for (d, s) in row[o..o + len].iter_mut().zip(src[i..].iter().step_by(self.stride)) {
                            *d = *s;
                        }
                    });
                }
            }
        }
        col
    }

    /// Adjoint of `im2col`, accumulating into `dst`.
    fn col2im(&self, col: &[f64], dst: &mut [f64]) {
        let (ohw, hw) = (self.oh * self.ow, self.h * self.w);
        for ci in 0..self.cin {
            let plane = &mut dst[ci * hw..(ci + 1) * hw];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &col[r * ohw..(r + 1) * ohw];
                    self.for_each_run(ky, kx, |o, i, len| {
                        scatter_strided(&mut plane[i..], 1.0, &row[o..o + len], self.stride)
                    });
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    if g.groups == 1 {
        return dense_conv_forward(g, x, w, b);
    }
    grouped_conv_forward(g, x, w, b)
}

fn dense_conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let (ohw, hw) = (g.oh * g.ow, g.h * g.w);
    let kdim = g.cin * g.kh * g.kw;
    let mut out = vec![0.0; g.n * g.cout * ohw];
    for n in 0..g.n {
        let xs = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        let dst = &mut out[n * g.cout * ohw..(n + 1) * g.cout * ohw];
        if let Some(b) = b {
            for (plane, &bv) in dst.chunks_mut(ohw).zip(b) {
                plane.fill(bv);
            }
        }
        if g.is_pointwise() {
            gemm(g.cout, kdim, ohw, w, false, xs, false, 1.0, dst);
        } else {
            gemm(g.cout, kdim, ohw, w, false, &g.im2col(xs), false, 1.0, dst);
        }
    }
    out
}

fn grouped_conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let (ohw, hw) = (g.oh * g.ow, g.h * g.w);
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let mut out = vec![0.0; g.n * g.cout * ohw];
    for n in 0..g.n {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let plane = &mut out[(n * g.cout + co) * ohw..(n * g.cout + co + 1) * ohw];
            if let Some(b) = b {
                plane.fill(b[co]);
            }
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let src = &x[(n * g.cin + ci) * hw..(n * g.cin + ci + 1) * hw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((co * cin_g + cl) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        g.for_each_run(ky, kx, |o, i, len| {
                            axpy_strided(&mut plane[o..o + len], wv, &src[i..], g.stride)
                        });
                    }
                }
            }
        }
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

fn conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], gout: &[f64], needs: &[bool]) -> ConvGrads {
    let (gx, gw) = if g.groups == 1 {
        dense_conv_backward(g, x, w, gout, needs)
    } else {
        grouped_conv_backward(g, x, w, gout, needs)
    };
    let gb = needs.get(2).copied().unwrap_or(false).then(|| {
        let ohw = g.oh * g.ow;
        let mut gb = vec![0.0; g.cout];
        for n in 0..g.n {
            for (co, b) in gb.iter_mut().enumerate() {
                *b += gout[(n * g.cout + co) * ohw..(n * g.cout + co + 1) * ohw]
                    .iter()
                    .sum::<f64>();
            }
        }
        gb
    });
    (gx, gw, gb)
}

type InputWeightGrads = (Option<Vec<f64>>, Option<Vec<f64>>);

fn dense_conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], gout: &[f64], needs: &[bool]) -> InputWeightGrads {
    let (ohw, hw) = (g.oh * g.ow, g.h * g.w);
    let kdim = g.cin * g.kh * g.kw;
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gw = needs[1].then(|| vec![0.0; w.len()]);
    let mut gcol = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * ohw] };
    for n in 0..g.n {
        let xs = &x[n * g.cin * hw..(n + 1) * g.cin * hw];
        let go = &gout[n * g.cout * ohw..(n + 1) * g.cout * ohw];
        if let Some(gw) = &mut gw {
            if g.is_pointwise() {
                gemm(g.cout, ohw, kdim, go, false, xs, true, 1.0, gw);
            } else {
                gemm(g.cout, ohw, kdim, go, false, &g.im2col(xs), true, 1.0, gw);
            }
        }
        if let Some(gx) = &mut gx {
            let dst = &mut gx[n * g.cin * hw..(n + 1) * g.cin * hw];
            if g.is_pointwise() {
                gemm(kdim, g.cout, ohw, w, true, go, false, 1.0, dst);
            } else {
                gemm(kdim, g.cout, ohw, w, true, go, false, 0.0, &mut gcol);
                g.col2im(&gcol, dst);
            }
        }
    }
    (gx, gw)
}

fn grouped_conv_backward(g: &ConvGeom, x: &[f64], w: &[f64], gout: &[f64], needs: &[bool]) -> InputWeightGrads {
    let (ohw, hw) = (g.oh * g.ow, g.h * g.w);
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gw = needs[1].then(|| vec![0.0; w.len()]);
    for n in 0..g.n {
        for co in 0..g.cout {
            let grp = co / cout_g;
            let go = &gout[(n * g.cout + co) * ohw..(n * g.cout + co + 1) * ohw];
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let xoff = (n * g.cin + ci) * hw;
                let src = &x[xoff..xoff + hw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((co * cin_g + cl) * g.kh + ky) * g.kw + kx;
                        if let Some(gw) = &mut gw {
                            let mut acc = 0.0;
                            g.for_each_run(ky, kx, |o, i, len| acc += dot_strided(&go[o..o + len], &src[i..], g.stride));
                            gw[widx] += acc;
                        }
                        if let Some(gx) = &mut gx {
                            let wv = w[widx];
                            if wv != 0.0 {
                                let dst = &mut gx[xoff..xoff + hw];
                                g.for_each_run(ky, kx, |o, i, len| {
                                    scatter_strided(&mut dst[i..], wv, &go[o..o + len], g.stride)
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::{grad_check, Tape};
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct convolution by definition, one output element at a time.
    fn conv_oracle(
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        stride: usize,
        pad: usize,
        mode: Padding,
        groups: usize,
    ) -> Tensor {
        let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [cout, cin_g, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        for bn in 0..n {
            for co in 0..cout {
                let grp = co / (cout / groups);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for cl in 0..cin_g {
                            let ci = grp * cin_g + cl;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    let v = match mode {
                                        Padding::Zero => {
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            x.data()[((bn * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        }
                                        Padding::Replicate => {
                                            let iy = iy.clamp(0, h as isize - 1) as usize;
                                            let ix = ix.clamp(0, wd as isize - 1) as usize;
                                            x.data()[((bn * cin + ci) * h + iy) * wd + ix]
                                        }
                                    };
                                    acc += v * w.data()[((co * cin_g + cl) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((bn * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let cases = [
            // (x shape, w shape, stride, pad, mode, groups)
            ([2, 3, 7, 6], [4, 3, 3, 3], 1, 1, Padding::Zero, 1),
            ([1, 4, 8, 8], [4, 1, 5, 5], 1, 2, Padding::Zero, 4),
            ([1, 2, 8, 8], [3, 2, 3, 3], 2, 1, Padding::Zero, 1),
            ([1, 2, 5, 5], [2, 1, 3, 3], 1, 1, Padding::Replicate, 2),
            ([1, 3, 4, 4], [2, 3, 1, 1], 1, 0, Padding::Zero, 1),
        ];
        for (i, (xs, ws, s, p, mode, groups)) in cases.into_iter().enumerate() {
            let x = rand_tensor(&xs, i as u64);
            let w = rand_tensor(&ws, 100 + i as u64);
            let b = rand_tensor(&[ws[0]], 200 + i as u64);
            let tape = Tape::default();
            let y = tape
                .leaf(x.clone())
                .conv2d(tape.leaf(w.clone()), Some(tape.leaf(b.clone())), s, p, mode, groups)
                .unwrap();
            let expect = conv_oracle(&x, &w, Some(&b), s, p, mode, groups);
            assert_eq!(y.shape(), expect.shape());
            assert!(y.value().max_abs_diff(&expect) < 1e-12, "case {i}");
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = rand_tensor(&[1, 1, 5, 4], 9);
        let mut k = Tensor::zeros([1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let tape = Tape::default();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(k), None, 1, 1, Padding::Zero, 1)
            .unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn box_kernel_on_constant_with_replicate_padding() {
        let c = 0.37;
        let x = Tensor::full([1, 3, 6, 6], c);
        let k = Tensor::full([3, 1, 3, 3], 1.0 / 9.0);
        let tape = Tape::default();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(k.clone()), None, 1, 1, Padding::Replicate, 3)
            .unwrap();
        let oracle = conv_oracle(&x, &k, None, 1, 1, Padding::Replicate, 3);
        assert!(y.value().max_abs_diff(&oracle) < 1e-15);
        assert!(y.value().data().iter().all(|v| (v - c).abs() < 1e-15));
    }

    #[test]
    fn conv_gradients() {
        for (xs, ws, s, p, groups) in [
            ([2, 2, 6, 6], [3, 2, 3, 3], 1, 1, 1),
            ([1, 3, 8, 8], [3, 1, 7, 7], 1, 3, 3),
            ([1, 2, 8, 8], [2, 2, 3, 3], 2, 1, 1),
        ] {
            let w = rand_tensor(&ws, 1);
            let b = rand_tensor(&[ws[0]], 2);
            let x = rand_tensor(&xs, 3);
            let err = grad_check(
                |tape, x| {
                    let w = tape.constant(w.clone());
                    let b = tape.constant(b.clone());
                    x.conv2d(w, Some(b), s, p, Padding::Zero, groups)?.square()?.sum()
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "input grad {err}");
            let err = grad_check(
                |tape, w| {
                    let x = tape.constant(x.clone());
                    let b = tape.constant(b.clone());
                    x.conv2d(w, Some(b), s, p, Padding::Zero, groups)?.square()?.sum()
                },
                &w,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "weight grad {err}");
        }
    }

    #[test]
    fn norm_gradients() {
        let x = rand_tensor(&[2, 3, 4, 4], 4);
        let gamma = rand_tensor(&[3], 5);
        let beta = rand_tensor(&[3], 6);
        let probe = rand_tensor(&[2, 3, 4, 4], 7);
        for axes in [NormAxes::Batch, NormAxes::Channels, NormAxes::Sample] {
            let err = grad_check(
                |tape, x| {
                    let (y, _) = x.normalize(
                        tape.constant(gamma.clone()),
                        tape.constant(beta.clone()),
                        axes,
                        1e-5,
                    )?;
                    y.mul(tape.constant(probe.clone()))?.sum()
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{axes:?}: {err}");
            let err = grad_check(
                |tape, g| {
                    let (y, _) = tape.constant(x.clone()).normalize(
                        g,
                        tape.constant(beta.clone()),
                        axes,
                        1e-5,
                    )?;
                    y.mul(tape.constant(probe.clone()))?.sum()
                },
                &gamma,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{axes:?} gamma: {err}");
        }
        let err = grad_check(
            |tape, x| {
                x.batch_norm_fixed(
                    tape.constant(gamma.clone()),
                    tape.constant(beta.clone()),
                    &[0.1, -0.2, 0.3],
                    &[1.5, 0.5, 2.0],
                    1e-5,
                )?
                .mul(tape.constant(probe.clone()))?
                .sum()
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let tape = Tape::default();
        let x = tape.leaf(rand_tensor(&[4, 2, 3, 3], 11));
        let (y, stats) = x
            .normalize(
                tape.constant(Tensor::ones([2])),
                tape.constant(Tensor::zeros([2])),
                NormAxes::Batch,
                0.0,
            )
            .unwrap();
        assert!(stats.is_some());
        let y = y.value();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.data()[(n * 2 + ch) * 9..(n * 2 + ch + 1) * 9].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pool_and_resample_gradients() {
        let x = rand_tensor(&[1, 2, 8, 8], 12);
        let probe = rand_tensor(&[1, 2, 16, 16], 13);
        let err = grad_check(
            |tape, x| x.upsample2x()?.mul(tape.constant(probe.clone()).add_scalar(3.0)?)?.sum(),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);
        for q in [1, 2, 4] {
            let err = grad_check(|_, x| x.avg_pool(q)?.add_scalar(3.0)?.square()?.sum(), &x, 1e-6).unwrap();
            assert!(err < 1e-6, "avg_pool {q}: {err}");
        }
        let err = grad_check(|_, x| x.mean_hw()?.add_scalar(3.0)?.square()?.sum(), &x, 1e-6).unwrap();
        assert!(err < 1e-6);
        // random values are distinct, so the argmax is locally constant
        let err = grad_check(|_, x| x.max_pool3()?.add_scalar(3.0)?.square()?.sum(), &x, 1e-7).unwrap();
        assert!(err < 1e-6);
        let err = grad_check(|_, x| x.min_pool3()?.add_scalar(3.0)?.square()?.sum(), &x, 1e-7).unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn dropout_statistics_and_gradient() {
        let tape = Tape::default();
        let x = tape.leaf(Tensor::ones([1, 1, 100, 100]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = x.dropout(0.1, &mut rng).unwrap();
        let kept = y.value().data().iter().filter(|&&v| v != 0.0).count();
        assert!((8800..9200).contains(&kept), "{kept}");
        assert!((y.value().sum() / 10_000.0 - 1.0).abs() < 0.03);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), y.value().data());
    }
}
