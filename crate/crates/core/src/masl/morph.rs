use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::EPS;

/// Shape descriptors of one binary mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorphFeatures {
    /// Fraction of the area surviving a radius-1 erosion.
    pub tubularity: f64,
    /// Isoperimetric quotient `4 pi A / P^2`, clamped to `[0, 1]`.
    pub compactness: f64,
    /// Mean absolute Laplacian of the boundary band.
    pub irregularity: f64,
    /// Foreground fraction.
    pub scale: f64,
}

pub(crate) fn check_binary(op: &'static str, y: &Tensor) -> Result<()> {
    if let Some(v) = y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(op, format!("mask must be binary, found {v}; threshold first")));
    }
    Ok(())
}

/// 3x3 max (or min) filter with replicate padding, applied to every plane.
/// Done as a row pass followed by a column pass.
fn extremum3(y: &Tensor, take_max: bool) -> Result<Tensor> {
    let (planes, h, w) = y.planes()?;
    let pick = |a: f64, b: f64| if take_max { a.max(b) } else { a.min(b) };
    let mut out = y.clone();
    let mut rows = vec![0.0; h * w];
    for p in 0..planes {
        let src = &y.data()[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let l = src[i * w + j.saturating_sub(1)];
                let r = src[i * w + (j + 1).min(w - 1)];
                rows[i * w + j] = pick(pick(l, src[i * w + j]), r);
            }
        }
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            let up = i.saturating_sub(1);
            let down = (i + 1).min(h - 1);
            for j in 0..w {
                dst[i * w + j] = pick(pick(rows[up * w + j], rows[i * w + j]), rows[down * w + j]);
            }
        }
    }
    Ok(out)
}

pub fn morph_dilate(y: &Tensor) -> Result<Tensor> {
    check_binary("morph_dilate", y)?;
    extremum3(y, true)
}

pub fn morph_erode(y: &Tensor) -> Result<Tensor> {
    check_binary("morph_erode", y)?;
    extremum3(y, false)
}

/// `clip(dilate(y) - erode(y), 0, 1)`.
pub fn boundary_band(y: &Tensor) -> Result<Tensor> {
    let d = morph_dilate(y)?;
    let e = morph_erode(y)?;
    let mut out = d;
    for (a, b) in out.data_mut().iter_mut().zip(e.data()) {
        *a = (*a - b).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// L1 norm of forward differences of one `h`x`w` plane over the valid
/// region.
pub fn perimeter(u: &[f64], h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w.saturating_sub(1) {
            s += (u[i * w + j + 1] - u[i * w + j]).abs();
        }
    }
    for i in 0..h.saturating_sub(1) {
        for j in 0..w {
            s += (u[(i + 1) * w + j] - u[i * w + j]).abs();
        }
    }
    s
}

/// Features of a single binary plane (any leading dimensions must be 1).
pub fn morph_features(y: &Tensor) -> Result<MorphFeatures> {
    let (planes, h, w) = y.planes()?;
    if planes != 1 {
        return Err(Error::invalid(
            "morph_features",
            format!("expected one mask plane, got shape {:?}", y.shape()),
        ));
    }
    check_binary("morph_features", y)?;
    let hw = (h * w) as f64;
    let area = y.sum();
    let band = boundary_band(y)?;
    let b = band.data();
    let at = |i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            b[i as usize * w + j as usize]
        }
    };
    let mut lap = 0.0;
    for i in 0..h as isize {
        for j in 0..w as isize {
            let v = at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * at(i, j);
            lap += v.abs();
        }
    }
    let irregularity = lap / hw;
    let scale = area / hw;
    if area == 0.0 {
        return Ok(MorphFeatures {
            tubularity: 0.0,
            compactness: 0.0,
            irregularity,
            scale,
        });
    }
    let eroded = extremum3(y, false)?.sum();
    let p = perimeter(y.data(), h, w);
    Ok(MorphFeatures {
        tubularity: eroded / (area + EPS),
        compactness: (4.0 * std::f64::consts::PI * area / (p * p + EPS)).clamp(0.0, 1.0),
        irregularity,
        scale,
    })
}
