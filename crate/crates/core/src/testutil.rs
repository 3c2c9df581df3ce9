//! Plain-loop reference kernels for oracle tests. Nothing here touches the
//! tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// NCHW array with explicit dimensions.
#[derive(Debug, Clone)]
pub struct Arr {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn from(t: &Tensor) -> Self {
        let s = t.shape();
        Arr {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            d: t.data().to_vec(),
        }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Arr {
            n,
            c,
            h,
            w,
            d: vec![0.0; n * c * h * w],
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = ((n * self.c + c) * self.h + y) * self.w + x;
        self.d[i] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut o = self.clone();
        o.d.iter_mut().for_each(|v| *v = f(*v));
        o
    }

    pub fn zip(&self, other: &Arr, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut o = self.clone();
        for (a, b) in o.d.iter_mut().zip(&other.d) {
            *a = f(*a, *b);
        }
        o
    }

    pub fn concat_channels(parts: &[&Arr]) -> Self {
        let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut o = Arr::zeros(n, c, h, w);
        for b in 0..n {
            let mut base = 0;
            for p in parts {
                for ch in 0..p.c {
                    for y in 0..h {
                        for x in 0..w {
                            o.set(b, base + ch, y, x, p.at(b, ch, y, x));
                        }
                    }
                }
                base += p.c;
            }
        }
        o
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.n, self.c, self.h, self.w], self.d.clone()).unwrap()
    }
}

pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp() - 1.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Grouped "same" convolution with zero padding and the given stride.
pub fn conv(x: &Arr, w: &Tensor, b: &Tensor, stride: usize, groups: usize) -> Arr {
    let ws = w.shape();
    let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
    let pad = k / 2;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let cout_g = cout / groups;
    let mut o = Arr::zeros(x.n, cout, oh, ow);
    for n in 0..x.n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[co];
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wv = w.data()[((co * cin_g + ci) * k + ky) * k + kx];
                                s += wv * x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    o.set(n, co, oy, ox, s);
                }
            }
        }
    }
    o
}

/// Per-channel affine normalization with fixed statistics.
pub fn bn_fixed(x: &Arr, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Arr {
    let mut o = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.at(n, c, y, xx) - mean[c]) / (var[c] + eps).sqrt() * gamma[c] + beta[c];
                    o.set(n, c, y, xx, v);
                }
            }
        }
    }
    o
}

pub fn mean_hw(x: &Arr) -> Arr {
    let mut o = Arr::zeros(x.n, x.c, 1, 1);
    for n in 0..x.n {
        for c in 0..x.c {
            let mut s = 0.0;
            for y in 0..x.h {
                for xx in 0..x.w {
                    s += x.at(n, c, y, xx);
                }
            }
            o.set(n, c, 0, 0, s / (x.h * x.w) as f64);
        }
    }
    o
}

pub fn upsample2x(x: &Arr) -> Arr {
    let mut o = Arr::zeros(x.n, x.c, 2 * x.h, 2 * x.w);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..2 * x.h {
                for xx in 0..2 * x.w {
                    o.set(n, c, y, xx, x.at(n, c, y / 2, xx / 2));
                }
            }
        }
    }
    o
}
