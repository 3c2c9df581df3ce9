//! Encoder blocks: the multi-receptive-field block with squeeze-excitation
//! (MRF-SE) and the spectral-selective token mixer (SSTM).

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Ctx, ParamInit, ParamKind};
use crate::spectral::{spectral_branch, SpectralFilter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrfSeConfig {
    pub in_channels: usize,
    pub expansion: usize,
    pub kernels: Vec<usize>,
    pub se_reduction: usize,
    /// Channel attention on/off. Without it the block is purely local.
    #[serde(default = "yes")]
    pub se: bool,
}

fn yes() -> bool {
    true
}

impl MrfSeConfig {
    pub fn new(in_channels: usize) -> Self {
        MrfSeConfig {
            in_channels,
            expansion: 6,
            kernels: vec![3, 5, 7],
            se_reduction: 16,
            se: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.expansion == 0 || self.se_reduction == 0 {
            return Err(Error::Config(format!(
                "mrf-se needs positive channels, expansion and reduction: {self:?}"
            )));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "mrf-se kernels must be odd and non-empty: {:?}",
                self.kernels
            )));
        }
        Ok(())
    }

    pub fn expanded(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn concat_channels(&self) -> usize {
        self.expanded() * self.kernels.len()
    }

    pub fn se_hidden(&self) -> usize {
        (self.concat_channels() / self.se_reduction).max(1)
    }

    pub fn init(&self, init: &mut ParamInit, prefix: &str) -> Result<()> {
        self.validate()?;
        let (c, e, cat) = (self.in_channels, self.expanded(), self.concat_channels());
        init.conv(&format!("{prefix}.expand"), e, c, 1)?;
        init.batch_norm(&format!("{prefix}.expand_bn"), e)?;
        for k in &self.kernels {
            init.conv(&format!("{prefix}.dw{k}"), e, 1, *k)?;
            init.batch_norm(&format!("{prefix}.dw{k}_bn"), e)?;
        }
        if self.se {
            init.conv(&format!("{prefix}.se.reduce"), self.se_hidden(), cat, 1)?;
            init.conv(&format!("{prefix}.se.expand"), cat, self.se_hidden(), 1)?;
        }
        init.conv(&format!("{prefix}.project"), c, cat, 1)
    }
}

fn check_channels(op: &'static str, x: &Var, c: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != c {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s,
            rhs: vec![c],
        });
    }
    Ok(())
}

/// Squeeze-excitation gate over the concatenated branches, `(N, C, 1, 1)`.
pub fn se_gate<'t>(ctx: &Ctx<'t, '_>, prefix: &str, feat: Var<'t>) -> Result<Var<'t>> {
    let s = feat.mean_hw()?;
    let s = ctx.conv(&format!("{prefix}.se.reduce"), s, 1, 1)?.elu()?;
    ctx.conv(&format!("{prefix}.se.expand"), s, 1, 1)?.sigmoid()
}

/// Expand, parallel depthwise convs, channel attention, project, residual.
pub fn mrfse_forward<'t>(ctx: &Ctx<'t, '_>, prefix: &str, z: Var<'t>, cfg: &MrfSeConfig) -> Result<Var<'t>> {
    check_channels("mrfse_forward", &z, cfg.in_channels)?;
    let e = cfg.expanded();
    let u = ctx.conv(&format!("{prefix}.expand"), z, 1, 1)?;
    let u = ctx.batch_norm(&format!("{prefix}.expand_bn"), u)?.elu()?;
    let mut branches = Vec::with_capacity(cfg.kernels.len());
    for k in &cfg.kernels {
        let b = ctx.conv(&format!("{prefix}.dw{k}"), u, 1, e)?;
        branches.push(ctx.batch_norm(&format!("{prefix}.dw{k}_bn"), b)?.elu()?);
    }
    let mut feat = Var::concat(&branches, 1)?;
    if cfg.se {
        feat = feat.mul(se_gate(ctx, prefix, feat)?)?;
    }
    let out = ctx.conv(&format!("{prefix}.project"), feat, 1, 1)?;
    z.add(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SstmConfig {
    pub channels: usize,
    /// Truncation size actually used at this stage.
    pub k: usize,
    pub gate_bottleneck: usize,
    pub dropout_p: f64,
}

impl SstmConfig {
    pub fn new(channels: usize, k: usize) -> Self {
        SstmConfig {
            channels,
            k,
            gate_bottleneck: 16,
            dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.k == 0 || self.gate_bottleneck == 0 {
            return Err(Error::Config(format!("sstm needs positive sizes: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    pub fn init(&self, init: &mut ParamInit, prefix: &str) -> Result<()> {
        self.validate()?;
        let c = self.channels;
        let f = SpectralFilter::identity(self.k, c);
        init.tensor(format!("{prefix}.wspec.real"), ParamKind::Weight, f.real_tensor())?;
        init.tensor(format!("{prefix}.wspec.imag"), ParamKind::Weight, f.imag_tensor())?;
        init.conv(&format!("{prefix}.gate.reduce"), self.gate_bottleneck, c, 1)?;
        init.conv(&format!("{prefix}.gate.expand"), c, self.gate_bottleneck, 1)?;
        init.conv(&format!("{prefix}.gate.mix"), c, c, 1)?;
        init.conv(&format!("{prefix}.fuse"), c, 2 * c, 1)?;
        init.layer_norm(&format!("{prefix}.ln"), c)
    }
}

/// `mix(x * sigmoid(expand(elu(reduce(x)))))`: per-location gated channel
/// mixing through a `d`-wide bottleneck.
pub fn content_gate<'t>(ctx: &Ctx<'t, '_>, prefix: &str, x: Var<'t>, cfg: &SstmConfig) -> Result<Var<'t>> {
    check_channels("content_gate", &x, cfg.channels)?;
    let g = ctx.conv(&format!("{prefix}.gate.reduce"), x, 1, 1)?.elu()?;
    let g = ctx.conv(&format!("{prefix}.gate.expand"), g, 1, 1)?.sigmoid()?;
    ctx.conv(&format!("{prefix}.gate.mix"), x.mul(g)?, 1, 1)
}

/// `x + dropout(LN(fuse([spectral(x) || gate(x)])))`.
pub fn sstm_forward<'t>(ctx: &Ctx<'t, '_>, prefix: &str, x: Var<'t>, cfg: &SstmConfig) -> Result<Var<'t>> {
    check_channels("sstm_forward", &x, cfg.channels)?;
    let wr = ctx.param(&format!("{prefix}.wspec.real"))?;
    let wi = ctx.param(&format!("{prefix}.wspec.imag"))?;
    let spec = spectral_branch(x, wr, wi)?;
    let gate = content_gate(ctx, prefix, x, cfg)?;
    let fused = ctx.conv(&format!("{prefix}.fuse"), Var::concat(&[spec, gate], 1)?, 1, 1)?;
    let fused = ctx.layer_norm(&format!("{prefix}.ln"), fused)?;
    x.add(ctx.dropout(fused, cfg.dropout_p)?)
}
