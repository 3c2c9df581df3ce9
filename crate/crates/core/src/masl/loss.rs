//! The five loss terms. Each takes a binary target `y` and a prediction
//! `p` of identical shape and treats everything as one sample.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::morph::{boundary_band, perimeter};
use super::EPS;

pub const BOUNDARY_SCALES: [(usize, f64); 3] = [(1, 0.5), (2, 0.3), (4, 0.2)];

fn check_pair(op: &'static str, y: &Tensor, p: &Var) -> Result<()> {
    if y.shape() != p.shape().as_slice() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: y.shape().to_vec(),
            rhs: p.shape(),
        });
    }
    if y.ndim() < 2 {
        return Err(Error::invalid(op, format!("need H, W axes, got {:?}", y.shape())));
    }
    Ok(())
}

fn spatial(y: &Tensor) -> (usize, usize) {
    let s = y.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

/// First forward difference along `axis`; `None` if the axis has < 2 entries.
fn diff1<'t>(u: Var<'t>, axis: usize) -> Result<Option<Var<'t>>> {
    let n = u.shape()[axis];
    if n < 2 {
        return Ok(None);
    }
    Ok(Some(u.narrow(axis, 1, n - 1)?.sub(u.narrow(axis, 0, n - 1)?)?))
}

fn diff2<'t>(u: Var<'t>, axis: usize) -> Result<Var<'t>> {
    let n = u.shape()[axis];
    let a = u.narrow(axis, 2, n - 2)?;
    let b = u.narrow(axis, 1, n - 2)?;
    let c = u.narrow(axis, 0, n - 2)?;
    a.sub(b.scale(2.0)?)?.add(c)
}

/// Sum of absolute forward differences in both spatial directions.
fn tv_l1<'t>(u: Var<'t>) -> Result<Var<'t>> {
    let nd = u.shape().len();
    let mut total: Option<Var<'t>> = None;
    for axis in [nd - 1, nd - 2] {
        if let Some(d) = diff1(u, axis)? {
            let s = d.abs()?.sum()?;
            total = Some(match total {
                Some(t) => t.add(s)?,
                None => s,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(u.tape().constant(Tensor::scalar(0.0))),
    }
}

fn check_probability(op: &'static str, p: &Var) -> Result<()> {
    if let Some(v) = p.value().data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(op, format!("prediction {v} outside [0, 1]")));
    }
    Ok(())
}

/// `p` clamped away from 0 and 1 before any logarithm.
fn clamp_prob(p: Var) -> Result<Var> {
    p.clamp(EPS, 1.0 - EPS)
}

/// `0.4 Dice + 0.3 IoU + 0.3 wBCE`, with BCE weighted by
/// `1 + lambda_b * band(y)`.
pub fn loss_core<'t>(y: &Tensor, p: Var<'t>, lambda_b: f64) -> Result<Var<'t>> {
    check_pair("loss_core", y, &p)?;
    check_probability("loss_core", &p)?;
    let tape = p.tape();
    let yv = tape.constant(y.clone());
    let sy = y.sum();
    let sp = p.sum()?;
    let syp = p.mul(yv)?.sum()?;

    let dice = syp.scale(2.0)?.add_scalar(EPS)?.div(sp.add_scalar(sy + EPS)?)?.one_minus()?;
    let union = sp.sub(syp)?.add_scalar(sy + EPS)?;
    let iou = syp.add_scalar(EPS)?.div(union)?.one_minus()?;

    let pc = clamp_prob(p)?;
    let log_fg = pc.ln()?;
    let log_bg = pc.one_minus()?.ln()?;
    let bce = Var::select(y, log_fg, log_bg)?.neg()?;
    let weight = boundary_band(y)?.map(|b| 1.0 + lambda_b * b);
    let wbce = bce.mul(tape.constant(weight))?.mean()?;

    dice.scale(0.4)?.add(iou.scale(0.3)?)?.add(wbce.scale(0.3)?)
}

/// Multi-scale L1 edge mismatch: average-pool `y - p` by q in {1, 2, 4},
/// take forward differences on both axes, mean absolute value, weight
/// 0.5 / 0.3 / 0.2.
pub fn loss_boundary<'t>(y: &Tensor, p: Var<'t>) -> Result<Var<'t>> {
    check_pair("loss_boundary", y, &p)?;
    let (h, w) = spatial(y);
    if h < 4 || w < 4 {
        return Err(Error::invalid(
            "loss_boundary",
            format!("need H, W >= 4 for the coarsest scale, got {h}x{w}"),
        ));
    }
    let diff = p.tape().constant(y.clone()).sub(p)?;
    let nd = y.ndim();
    let mut total = p.tape().constant(Tensor::scalar(0.0));
    for (q, omega) in BOUNDARY_SCALES {
        let pooled = diff.avg_pool(q)?;
        for axis in [nd - 1, nd - 2] {
            if let Some(d) = diff1(pooled, axis)? {
                total = total.add(d.abs()?.mean()?.scale(omega)?)?;
            }
        }
    }
    Ok(total)
}

/// `A / (P^2 + eps)` of a target plane.
pub fn shape_ratio(y: &Tensor) -> f64 {
    let (h, w) = spatial(y);
    let per = perimeter(y.data(), h, w);
    y.sum() / (per * per + EPS)
}

/// `|kappa(y) - kappa(p)|` with `kappa(u) = sum(u) / (|grad u|_1^2 + eps)`.
pub fn loss_structure<'t>(y: &Tensor, p: Var<'t>) -> Result<Var<'t>> {
    check_pair("loss_structure", y, &p)?;
    let ky = shape_ratio(y);
    let per = tv_l1(p)?;
    let kp = p.sum()?.div(per.square()?.add_scalar(EPS)?)?;
    kp.add_scalar(-ky)?.abs()
}

/// Focusing exponent chosen by foreground fraction.
pub fn focal_gamma(scale: f64) -> f64 {
    if scale < 0.05 {
        3.0
    } else if scale < 0.2 {
        2.0
    } else {
        1.5
    }
}

/// Focal loss with a per-sample exponent picked from the target's size.
pub fn loss_focal_scale<'t>(y: &Tensor, p: Var<'t>) -> Result<Var<'t>> {
    check_pair("loss_focal_scale", y, &p)?;
    let gamma = focal_gamma(y.sum() / y.len() as f64);
    let pc = clamp_prob(p)?;
    let pt = Var::select(y, pc, pc.one_minus()?)?;
    pt.one_minus()?.powf(gamma)?.mul(pt.ln()?)?.neg()?.mean()
}

/// Second-difference L1 mismatch on both axes, normalized by pixel count.
pub fn loss_texture<'t>(y: &Tensor, p: Var<'t>) -> Result<Var<'t>> {
    check_pair("loss_texture", y, &p)?;
    let (h, w) = spatial(y);
    if h < 3 || w < 3 {
        return Err(Error::invalid(
            "loss_texture",
            format!("need H, W >= 3 for second differences, got {h}x{w}"),
        ));
    }
    let d = p.tape().constant(y.clone()).sub(p)?;
    let nd = y.ndim();
    let sx = diff2(d, nd - 1)?.abs()?.sum()?;
    let sy = diff2(d, nd - 2)?.abs()?.sum()?;
    sx.add(sy)?.scale(1.0 / (h * w) as f64)
}
