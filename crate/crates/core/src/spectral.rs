//! 2D Fourier machinery for the spectral token-mixing branch.
//!
//! Conventions: the forward DFT is unnormalized and the inverse scales by
//! `1/(HW)`. After a forward [`center_shift`] the DC bin sits at
//! `(H/2, W/2)` (floor division), and a `k`x`k` crop keeps rows
//! `[H/2 - k/2, H/2 - k/2 + k)` and likewise for columns.

use std::cell::RefCell;
use std::rc::Rc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backprop, Var};
use crate::error::{Error, Result};
use crate::tensor::{ComplexTensor, Tensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2D DFT of every `h`x`w` plane in `buf`.
fn fft2_planes(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    if buf.is_empty() {
        return;
    }
    let (row, col) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            (p.plan_fft_inverse(w), p.plan_fft_inverse(h))
        } else {
            (p.plan_fft_forward(w), p.plan_fft_forward(h))
        }
    });
    // rows are contiguous; process() walks consecutive chunks of length w
    row.process(buf);
    let mut scratch = vec![Complex64::default(); h * w];
    for plane in buf.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                scratch[x * h + y] = plane[y * w + x];
            }
        }
        col.process(&mut scratch);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = scratch[x * h + y];
            }
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        _ => Err(Error::invalid(
            "fft2d",
            format!("need trailing H, W >= 1, got {shape:?}"),
        )),
    }
}

fn to_complex(c: &ComplexTensor) -> Vec<Complex64> {
    c.re.iter().zip(&c.im).map(|(&r, &i)| Complex64::new(r, i)).collect()
}

fn from_complex(shape: &[usize], buf: &[Complex64]) -> ComplexTensor {
    ComplexTensor::new(
        shape.to_vec(),
        buf.iter().map(|c| c.re).collect(),
        buf.iter().map(|c| c.im).collect(),
    )
    .expect("length preserved")
}

/// Unnormalized forward DFT over the last two axes.
pub fn fft2d(x: &Tensor) -> Result<ComplexTensor> {
    let (h, w) = plane_dims(x.shape())?;
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_planes(&mut buf, h, w, false);
    Ok(from_complex(x.shape(), &buf))
}

/// Inverse DFT over the last two axes, scaled by `1/(HW)`.
pub fn ifft2d(x: &ComplexTensor) -> Result<ComplexTensor> {
    let (h, w) = plane_dims(x.shape())?;
    let mut buf = to_complex(x);
    fft2_planes(&mut buf, h, w, true);
    Ok(from_complex(x.shape(), &buf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftDirection {
    /// DC moves from `(0, 0)` to `(H/2, W/2)`.
    Forward,
    Inverse,
}

/// Circular shift of every plane moving the DC bin to the centre (or back).
pub fn center_shift(x: &ComplexTensor, dir: ShiftDirection) -> Result<ComplexTensor> {
    let (h, w) = plane_dims(x.shape())?;
    let (sh, sw) = match dir {
        ShiftDirection::Forward => (h / 2, w / 2),
        ShiftDirection::Inverse => (h - h / 2, w - w / 2),
    };
    let mut out = ComplexTensor::zeros(x.shape().to_vec());
    for p in 0..x.len() / (h * w) {
        let base = p * h * w;
        for y in 0..h {
            let ny = (y + sh) % h;
            for xx in 0..w {
                let nx = (xx + sw) % w;
                out.re[base + ny * w + nx] = x.re[base + y * w + xx];
                out.im[base + ny * w + nx] = x.im[base + y * w + xx];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropPad {
    /// Extract the centred `k`x`k` window.
    Crop,
    /// Embed a `k`x`k` block at the centre of a zero `h`x`w` grid.
    PadTo(usize, usize),
}

fn window_origin(h: usize, w: usize, k: usize) -> (usize, usize) {
    (h / 2 - k / 2, w / 2 - k / 2)
}

/// Centred crop or zero-pad of every plane (see module docs for the window).
pub fn crop_pad(x: &ComplexTensor, k: usize, mode: CropPad) -> Result<ComplexTensor> {
    let (h, w) = plane_dims(x.shape())?;
    let planes = x.len() / (h * w);
    let prefix = &x.shape()[..x.shape().len() - 2];
    match mode {
        CropPad::Crop => {
            if k == 0 || k > h.min(w) {
                return Err(Error::invalid(
                    "crop_pad",
                    format!(
                        "truncation k={k} exceeds min(H, W)={} ; clamp k per stage (k = min(k, H, W))",
                        h.min(w)
                    ),
                ));
            }
            let (oy, ox) = window_origin(h, w, k);
            let mut shape = prefix.to_vec();
            shape.extend([k, k]);
            let mut out = ComplexTensor::zeros(shape);
            for p in 0..planes {
                for a in 0..k {
                    for b in 0..k {
                        let src = p * h * w + (oy + a) * w + ox + b;
                        let dst = p * k * k + a * k + b;
                        out.re[dst] = x.re[src];
                        out.im[dst] = x.im[src];
                    }
                }
            }
            Ok(out)
        }
        CropPad::PadTo(th, tw) => {
            if h != k || w != k {
                return Err(Error::invalid(
                    "crop_pad",
                    format!("pad expects {k}x{k} planes, got {h}x{w}"),
                ));
            }
            if th < k || tw < k {
                return Err(Error::invalid(
                    "crop_pad",
                    format!("pad target {th}x{tw} smaller than k={k}"),
                ));
            }
            let (oy, ox) = window_origin(th, tw, k);
            let mut shape = prefix.to_vec();
            shape.extend([th, tw]);
            let mut out = ComplexTensor::zeros(shape);
            for p in 0..planes {
                for a in 0..k {
                    for b in 0..k {
                        let dst = p * th * tw + (oy + a) * tw + ox + b;
                        let src = p * k * k + a * k + b;
                        out.re[dst] = x.re[src];
                        out.im[dst] = x.im[src];
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Learnable complex filter over the centred `k`x`k` low-frequency window,
/// one `k`x`k` plane per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFilter {
    pub k: usize,
    pub channels: usize,
    pub weights: ComplexTensor,
}

impl SpectralFilter {
    /// All-pass initialization: real part 1, imaginary part 0.
    pub fn identity(k: usize, channels: usize) -> Self {
        let n = channels * k * k;
        SpectralFilter {
            k,
            channels,
            weights: ComplexTensor::new([channels, k, k], vec![1.0; n], vec![0.0; n])
                .expect("sizes match"),
        }
    }

    pub fn real_tensor(&self) -> Tensor {
        Tensor::new([self.channels, self.k, self.k], self.weights.re.clone()).expect("sizes match")
    }

    pub fn imag_tensor(&self) -> Tensor {
        Tensor::new([self.channels, self.k, self.k], self.weights.im.clone()).expect("sizes match")
    }
}

/// Filters the truncated spectrum of one set of planes; `filter` is
/// broadcast over any leading batch dimension. Returns the complex result
/// before the real projection.
fn filter_spectrum(
    x: &ComplexTensor,
    w_re: &[f64],
    w_im: &[f64],
    k: usize,
    channels: usize,
) -> Result<ComplexTensor> {
    let (h, w) = plane_dims(x.shape())?;
    let shifted = center_shift(x, ShiftDirection::Forward)?;
    let mut crop = crop_pad(&shifted, k, CropPad::Crop)?;
    let kk = k * k;
    for p in 0..crop.len() / kk {
        let c = p % channels;
        for j in 0..kk {
            let (a, b) = (crop.re[p * kk + j], crop.im[p * kk + j]);
            let (wr, wi) = (w_re[c * kk + j], w_im[c * kk + j]);
            crop.re[p * kk + j] = a * wr - b * wi;
            crop.im[p * kk + j] = a * wi + b * wr;
        }
    }
    let padded = crop_pad(&crop, k, CropPad::PadTo(h, w))?;
    center_shift(&padded, ShiftDirection::Inverse)
}

fn real_part(c: &ComplexTensor, dtype: crate::DType) -> Tensor {
    Tensor::from_parts(c.shape().to_vec(), c.re.clone(), dtype)
}

/// Spectral branch of the token mixer:
/// `Re(IFFT(ishift(pad(crop(shift(FFT(x))) * W))))` per channel.
///
/// `x` is `(N, C, H, W)`; `w_re`, `w_im` are `(C, k, k)` and receive
/// gradients as independent real parameters.
pub fn spectral_branch<'t>(x: Var<'t>, w_re: Var<'t>, w_im: Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let [_, c, h, w] = shape[..] else {
        return Err(Error::invalid(
            "spectral_branch",
            format!("expected NCHW, got {shape:?}"),
        ));
    };
    let ws = w_re.shape();
    if ws.len() != 3 || ws[0] != c || ws[1] != ws[2] || w_im.shape() != ws {
        return Err(Error::ShapeMismatch {
            op: "spectral_branch",
            lhs: shape,
            rhs: ws,
        });
    }
    let k = ws[1];
    if k > h.min(w) {
        return Err(Error::invalid(
            "spectral_branch",
            format!("truncation k={k} exceeds min(H, W)={}; clamp k per stage", h.min(w)),
        ));
    }
    let spec = Rc::new(fft2d(&xv)?);
    let (wr, wi) = (w_re.value(), w_im.value());
    let filtered = filter_spectrum(&spec, wr.data(), wi.data(), k, c)?;
    let out = real_part(&ifft2d(&filtered)?, xv.dtype());
    x.tape().record(
        "spectral_branch",
        &[x, w_re, w_im],
        out,
        Box::new(move |bp: &Backprop| {
            let g = Tensor::from_parts(shape.clone(), bp.grad.to_vec(), crate::DType::F64);
            let g_hat = ifft2d(&ComplexTensor::from_real(&g)).expect("valid shape");
            let (wr, wi) = (bp.inputs[1].data(), bp.inputs[2].data());
            let gx = bp.needs[0].then(|| {
                let filt = filter_spectrum(&g_hat, wr, wi, k, c).expect("valid shape");
                fft2d_complex(&filt).re
            });
            let (gw_re, gw_im) = if bp.needs[1] || bp.needs[2] {
                let xs = crop_pad(
                    &center_shift(&spec, ShiftDirection::Forward).expect("valid"),
                    k,
                    CropPad::Crop,
                )
                .expect("valid");
                let gs = crop_pad(
                    &center_shift(&g_hat, ShiftDirection::Forward).expect("valid"),
                    k,
                    CropPad::Crop,
                )
                .expect("valid");
                let kk = k * k;
                let mut gre = vec![0.0; c * kk];
                let mut gim = vec![0.0; c * kk];
                for p in 0..xs.len() / kk {
                    let ch = p % c;
                    for j in 0..kk {
                        let i = p * kk + j;
                        // product X * G
                        let pr = xs.re[i] * gs.re[i] - xs.im[i] * gs.im[i];
                        let pi = xs.re[i] * gs.im[i] + xs.im[i] * gs.re[i];
                        gre[ch * kk + j] += pr;
                        gim[ch * kk + j] -= pi;
                    }
                }
                (Some(gre), Some(gim))
            } else {
                (None, None)
            };
            vec![gx, gw_re, gw_im]
        }),
    )
}

/// Unnormalized forward DFT of a complex array.
fn fft2d_complex(x: &ComplexTensor) -> ComplexTensor {
    let (h, w) = plane_dims(x.shape()).expect("valid shape");
    let mut buf = to_complex(x);
    fft2_planes(&mut buf, h, w, false);
    from_complex(x.shape(), &buf)
}

/// Spectral energy inside the centred `k`x`k` window versus the whole
/// spectrum, summed over all planes of `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    pub total_energy: f64,
    pub retained_energy: f64,
    pub retention_ratio: f64,
    pub k: usize,
}

pub fn energy_retention(x: &Tensor, k: usize) -> Result<SpectrumStats> {
    let spec = fft2d(x)?;
    let crop = crop_pad(&center_shift(&spec, ShiftDirection::Forward)?, k, CropPad::Crop)?;
    let total: f64 = (0..spec.len()).map(|i| spec.norm_sqr(i)).sum();
    let retained: f64 = (0..crop.len()).map(|i| crop.norm_sqr(i)).sum();
    Ok(SpectrumStats {
        total_energy: total,
        retained_energy: retained,
        retention_ratio: retained / (total + f64::MIN_POSITIVE),
        k,
    })
}
