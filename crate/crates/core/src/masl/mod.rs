//! Morphology-aware adaptive segmentation loss (MASL).
//!
//! Five terms (core overlap, boundary, structure, scale-adaptive focal,
//! texture) are combined as `sum(w_i a_i L_i) / (sum(w_i a_i) + eps)`, where
//! `w` are trainable weights kept in `[0.1, 10]` and `a` are per-sample
//! modulations computed from the target's shape.

mod loss;
mod morph;
#[cfg(test)]
mod oracle;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use loss::{
    focal_gamma, loss_boundary, loss_core, loss_focal_scale, loss_structure, loss_texture, shape_ratio,
    BOUNDARY_SCALES,
};
pub use morph::{boundary_band, morph_dilate, morph_erode, morph_features, perimeter, MorphFeatures};

pub const EPS: f64 = 1e-7;
pub const WEIGHT_MIN: f64 = 0.1;
pub const WEIGHT_MAX: f64 = 10.0;
pub const COMPONENTS: [&str; 5] = ["core", "bnd", "str", "sca", "tex"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaslWeights {
    pub core: f64,
    pub bnd: f64,
    pub str: f64,
    pub sca: f64,
    pub tex: f64,
}

impl Default for MaslWeights {
    fn default() -> Self {
        MaslWeights {
            core: 1.0,
            bnd: 1.0,
            str: 1.0,
            sca: 0.5,
            tex: 0.5,
        }
    }
}

impl MaslWeights {
    pub fn to_array(self) -> [f64; 5] {
        [self.core, self.bnd, self.str, self.sca, self.tex]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        MaslWeights {
            core: a[0],
            bnd: a[1],
            str: a[2],
            sca: a[3],
            tex: a[4],
        }
    }

    pub fn to_tensor(self) -> Tensor {
        Tensor::new([5], self.to_array().to_vec()).expect("five weights")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let a: [f64; 5] = t
            .data()
            .try_into()
            .map_err(|_| Error::invalid("masl_weights", format!("need 5 values, got {:?}", t.shape())))?;
        Ok(Self::from_array(a))
    }

    pub fn in_bounds(self) -> bool {
        self.to_array().iter().all(|w| (WEIGHT_MIN..=WEIGHT_MAX).contains(w))
    }
}

/// Projects every weight onto `[0.1, 10]`.
pub fn clip_weights(w: MaslWeights) -> MaslWeights {
    MaslWeights::from_array(w.to_array().map(|v| v.clamp(WEIGHT_MIN, WEIGHT_MAX)))
}

/// Per-term emphasis from the target's shape: core `1 + c/2`, boundary
/// `1 + 1.5 tau + c`, structure `1 + tau`, scale `1 + 1.5 iota`,
/// texture `1 + iota`.
pub fn modulation(f: &MorphFeatures) -> [f64; 5] {
    let (tau, c, iota) = (f.tubularity, f.compactness, f.irregularity);
    [
        1.0 + 0.5 * c,
        1.0 + 1.5 * tau + c,
        1.0 + tau,
        1.0 + 1.5 * iota,
        1.0 + iota,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Extra BCE weight on the boundary band.
    pub lambda_b: f64,
    /// Which of the five terms take part, in [`COMPONENTS`] order.
    pub enabled: [bool; 5],
    /// Apply the shape modulation; otherwise every `a_i = 1`.
    pub modulate: bool,
    /// Whether the optimizer updates the weights.
    pub learn_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_b: 5.0,
            enabled: [true; 5],
            modulate: true,
            learn_weights: true,
        }
    }
}

impl LossConfig {
    /// Only the Dice/IoU/wBCE term, fixed weights, no modulation.
    pub fn core_only() -> Self {
        LossConfig {
            enabled: [true, false, false, false, false],
            modulate: false,
            learn_weights: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled.iter().any(|&e| e) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if !(self.lambda_b >= 0.0 && self.lambda_b.is_finite()) {
            return Err(Error::Config(format!("lambda_b = {} must be >= 0", self.lambda_b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Raw term values; disabled terms are reported as 0.
    pub components: [f64; 5],
    pub alphas: [f64; 5],
    pub weights: [f64; 5],
    pub features: MorphFeatures,
    pub total: f64,
}

fn component<'t>(i: usize, y: &Tensor, p: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    match i {
        0 => loss_core(y, p, cfg.lambda_b),
        1 => loss_boundary(y, p),
        2 => loss_structure(y, p),
        3 => loss_focal_scale(y, p),
        _ => loss_texture(y, p),
    }
}

/// `sum(w_i a_i L_i) / (sum(w_i a_i) + eps)` over the listed `(i, L_i)`.
pub fn combine<'t>(terms: &[(usize, Var<'t>)], weights: Var<'t>, alphas: [f64; 5]) -> Result<Var<'t>> {
    let tape = weights.tape();
    let mut num = tape.constant(Tensor::scalar(0.0));
    let mut den = tape.constant(Tensor::scalar(EPS));
    for &(i, l) in terms {
        let wa = weights.narrow(0, i, 1)?.reshape(Vec::new())?.scale(alphas[i])?;
        num = num.add(wa.mul(l)?)?;
        den = den.add(wa)?;
    }
    num.div(den)
}

/// Loss of one sample. `weights` is a `(5,)` variable so the same call
/// serves fixed and learned weights. Morphology is read from `y` only.
pub fn masl_total<'t>(
    y: &Tensor,
    p: Var<'t>,
    weights: Var<'t>,
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossBreakdown)> {
    if weights.shape() != [5] {
        return Err(Error::ShapeMismatch {
            op: "masl_total",
            lhs: vec![5],
            rhs: weights.shape(),
        });
    }
    let features = morph_features(y)?;
    let alphas = if cfg.modulate { modulation(&features) } else { [1.0; 5] };
    let wv = weights.value();
    let mut terms = Vec::with_capacity(5);
    let mut components = [0.0; 5];
    for i in 0..5 {
        if cfg.enabled[i] {
            let l = component(i, y, p, cfg)?;
            components[i] = l.item();
            terms.push((i, l));
        }
    }
    let total = combine(&terms, weights, alphas)?;
    let breakdown = LossBreakdown {
        components,
        alphas,
        weights: MaslWeights::from_tensor(&wv)?.to_array(),
        features,
        total: total.item(),
    };
    Ok((total, breakdown))
}

/// Mean of [`masl_total`] over the batch axis of `(N, 1, H, W)` tensors.
pub fn masl_batch<'t>(
    y: &Tensor,
    p: Var<'t>,
    weights: Var<'t>,
    cfg: &LossConfig,
) -> Result<(Var<'t>, Vec<LossBreakdown>)> {
    let shape = y.shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || p.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "masl_batch",
            lhs: shape,
            rhs: p.shape(),
        });
    }
    let (n, hw) = (shape[0], shape[2] * shape[3]);
    let mut sum: Option<Var<'t>> = None;
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let yi = Tensor::new(
            [1, 1, shape[2], shape[3]],
            y.data()[i * hw..(i + 1) * hw].to_vec(),
        )?;
        let (l, b) = masl_total(&yi, p.narrow(0, i, 1)?, weights, cfg)?;
        parts.push(b);
        sum = Some(match sum {
            Some(s) => s.add(l)?,
            None => l,
        });
    }
    let sum = sum.ok_or_else(|| Error::invalid("masl_batch", "empty batch"))?;
    Ok((sum.scale(1.0 / n as f64)?, parts))
}
