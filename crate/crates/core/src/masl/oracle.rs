//! Scalar-loop reference for the morphology features and every loss term.
//! Written against plain slices with no dependency on the tape so it can be
//! shared by unit tests and the acceptance suite.
#![allow(dead_code)]

const EPS: f64 = 1e-7;

pub struct Plane<'a> {
    pub h: usize,
    pub w: usize,
    pub d: &'a [f64],
}

impl Plane<'_> {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.d[y * self.w + x]
    }
}

fn window(y: &Plane, take_max: bool) -> Vec<f64> {
    let mut out = vec![0.0; y.h * y.w];
    for i in 0..y.h {
        for j in 0..y.w {
            let mut best = if take_max { f64::NEG_INFINITY } else { f64::INFINITY };
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let ii = (i as i64 + di).clamp(0, y.h as i64 - 1) as usize;
                    let jj = (j as i64 + dj).clamp(0, y.w as i64 - 1) as usize;
                    let v = y.at(ii, jj);
                    best = if take_max { best.max(v) } else { best.min(v) };
                }
            }
            out[i * y.w + j] = best;
        }
    }
    out
}

pub fn dilate(y: &Plane) -> Vec<f64> {
    window(y, true)
}

pub fn erode(y: &Plane) -> Vec<f64> {
    window(y, false)
}

pub fn band(y: &Plane) -> Vec<f64> {
    let d = dilate(y);
    let e = erode(y);
    d.iter().zip(&e).map(|(a, b)| (a - b).clamp(0.0, 1.0)).collect()
}

/// Sum of absolute forward differences over the valid region.
pub fn perimeter(u: &Plane) -> f64 {
    let mut s = 0.0;
    for i in 0..u.h {
        for j in 0..u.w {
            if j + 1 < u.w {
                s += (u.at(i, j + 1) - u.at(i, j)).abs();
            }
            if i + 1 < u.h {
                s += (u.at(i + 1, j) - u.at(i, j)).abs();
            }
        }
    }
    s
}

/// `[tau, c, iota, s]`.
pub fn features(y: &Plane) -> [f64; 4] {
    let hw = (y.h * y.w) as f64;
    let a: f64 = y.d.iter().sum();
    let s = a / hw;
    let b = band(y);
    let bp = Plane { h: y.h, w: y.w, d: &b };
    let mut lap = 0.0;
    for i in 0..y.h {
        for j in 0..y.w {
            let get = |ii: i64, jj: i64| {
                if ii < 0 || jj < 0 || ii >= y.h as i64 || jj >= y.w as i64 {
                    0.0
                } else {
                    bp.at(ii as usize, jj as usize)
                }
            };
            let (ii, jj) = (i as i64, j as i64);
            let l = get(ii - 1, jj) + get(ii + 1, jj) + get(ii, jj - 1) + get(ii, jj + 1) - 4.0 * get(ii, jj);
            lap += l.abs();
        }
    }
    let iota = lap / hw;
    if a == 0.0 {
        return [0.0, 0.0, iota, s];
    }
    let tau = erode(y).iter().sum::<f64>() / (a + EPS);
    let p = perimeter(y);
    let c = (4.0 * std::f64::consts::PI * a / (p * p + EPS)).clamp(0.0, 1.0);
    [tau, c, iota, s]
}

pub fn alphas(f: [f64; 4]) -> [f64; 5] {
    let [tau, c, iota, _] = f;
    [1.0 + 0.5 * c, 1.0 + 1.5 * tau + c, 1.0 + tau, 1.0 + 1.5 * iota, 1.0 + iota]
}

fn clampp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

pub fn core(y: &Plane, p: &[f64], lambda_b: f64) -> f64 {
    let (mut sy, mut sp, mut syp) = (0.0, 0.0, 0.0);
    for i in 0..y.d.len() {
        sy += y.d[i];
        sp += p[i];
        syp += y.d[i] * p[i];
    }
    let dice = 1.0 - (2.0 * syp + EPS) / (sy + sp + EPS);
    let iou = 1.0 - (syp + EPS) / (sy + sp - syp + EPS);
    let b = band(y);
    let mut wbce = 0.0;
    for i in 0..y.d.len() {
        let pc = clampp(p[i]);
        let bce = -(y.d[i] * pc.ln() + (1.0 - y.d[i]) * (1.0 - pc).ln());
        wbce += (1.0 + lambda_b * b[i]) * bce;
    }
    wbce /= y.d.len() as f64;
    0.4 * dice + 0.3 * iou + 0.3 * wbce
}

pub fn boundary(y: &Plane, p: &[f64]) -> f64 {
    let diff: Vec<f64> = y.d.iter().zip(p).map(|(a, b)| a - b).collect();
    let mut total = 0.0;
    for (q, omega) in [(1usize, 0.5), (2, 0.3), (4, 0.2)] {
        let (h, w) = (y.h / q, y.w / q);
        let mut pooled = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for a in 0..q {
                    for b in 0..q {
                        s += diff[(i * q + a) * y.w + j * q + b];
                    }
                }
                pooled[i * w + j] = s / (q * q) as f64;
            }
        }
        let (mut gx, mut nx, mut gy, mut ny) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    gx += (pooled[i * w + j + 1] - pooled[i * w + j]).abs();
                    nx += 1;
                }
                if i + 1 < h {
                    gy += (pooled[(i + 1) * w + j] - pooled[i * w + j]).abs();
                    ny += 1;
                }
            }
        }
        let mx = if nx > 0 { gx / nx as f64 } else { 0.0 };
        let my = if ny > 0 { gy / ny as f64 } else { 0.0 };
        total += omega * (mx + my);
    }
    total
}

pub fn structure(y: &Plane, p: &[f64]) -> f64 {
    let kappa = |u: &Plane| {
        let a: f64 = u.d.iter().sum();
        let per = perimeter(u);
        a / (per * per + EPS)
    };
    let pp = Plane { h: y.h, w: y.w, d: p };
    (kappa(y) - kappa(&pp)).abs()
}

pub fn focal_gamma(s: f64) -> f64 {
    if s < 0.05 {
        3.0
    } else if s < 0.2 {
        2.0
    } else {
        1.5
    }
}

pub fn focal(y: &Plane, p: &[f64]) -> f64 {
    let s = y.d.iter().sum::<f64>() / y.d.len() as f64;
    let g = focal_gamma(s);
    let mut acc = 0.0;
    for i in 0..y.d.len() {
        let pc = clampp(p[i]);
        let pt = if y.d[i] == 1.0 { pc } else { 1.0 - pc };
        acc += -(1.0 - pt).powf(g) * pt.ln();
    }
    acc / y.d.len() as f64
}

pub fn texture(y: &Plane, p: &[f64]) -> f64 {
    let d: Vec<f64> = y.d.iter().zip(p).map(|(a, b)| a - b).collect();
    let (h, w) = (y.h, y.w);
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in 0..h {
        for j in 0..w {
            if j + 2 < w {
                sx += (d[i * w + j + 2] - 2.0 * d[i * w + j + 1] + d[i * w + j]).abs();
            }
            if i + 2 < h {
                sy += (d[(i + 2) * w + j] - 2.0 * d[(i + 1) * w + j] + d[i * w + j]).abs();
            }
        }
    }
    (sx + sy) / (h * w) as f64
}

/// Components in the order core, boundary, structure, scale, texture.
pub fn components(y: &Plane, p: &[f64], lambda_b: f64) -> [f64; 5] {
    [
        core(y, p, lambda_b),
        boundary(y, p),
        structure(y, p),
        focal(y, p),
        texture(y, p),
    ]
}

pub fn total(y: &Plane, p: &[f64], weights: [f64; 5], lambda_b: f64) -> f64 {
    let l = components(y, p, lambda_b);
    let a = alphas(features(y));
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..5 {
        num += weights[i] * a[i] * l[i];
        den += weights[i] * a[i];
    }
    num / (den + EPS)
}
