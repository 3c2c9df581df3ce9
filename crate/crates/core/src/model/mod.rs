//! Five-stage encoder (strided stem, MRF-SE, SSTM per stage) and four-stage
//! boundary-focused decoder with skip connections.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{mrfse_forward, sstm_forward, MrfSeConfig, SstmConfig};
use crate::decoder::{decoder_stage, DecoderStageConfig};
use crate::error::{Error, Result};
use crate::layers::{Ctx, Mode, ParamInit, ParamStore};
use crate::tensor::{DType, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};

pub const STAGES: usize = 5;

/// Missing JSON fields take the full-size defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `[H, W]`, both divisible by 32.
    pub input_size: [usize; 2],
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Spectral truncation before the per-stage clamp to the feature size.
    pub k: usize,
    pub expansion: usize,
    pub kernels: Vec<usize>,
    pub se_reduction: usize,
    pub gate_bottleneck: usize,
    pub dropout: f64,
    pub seed: u64,
    pub dtype: DType,
    pub use_mrfse: bool,
    pub use_se: bool,
    pub use_sstm: bool,
    pub boundary_stream: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: [352, 352],
            in_channels: 3,
            stage_channels: vec![24, 32, 64, 80, 128],
            k: 32,
            expansion: 6,
            kernels: vec![3, 5, 7],
            se_reduction: 16,
            gate_bottleneck: 16,
            dropout: 0.1,
            seed: 0,
            dtype: DType::F64,
            use_mrfse: true,
            use_se: true,
            use_sstm: true,
            boundary_stream: true,
        }
    }
}

impl ModelConfig {
    /// Small CPU configuration: channels {8, 12, 16, 24, 32} at 64x64.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: [64, 64],
            stage_channels: vec![8, 12, 16, 24, 32],
            ..Self::default()
        }
    }

    /// Smallest viable configuration: two channels per stage at 32x32.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: [32, 32],
            stage_channels: vec![2; STAGES],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be positive and divisible by 32"
            )));
        }
        if self.stage_channels.len() != STAGES || self.stage_channels.contains(&0) {
            return Err(Error::Config(format!(
                "need {STAGES} positive stage channel counts, got {:?}",
                self.stage_channels
            )));
        }
        if self.in_channels == 0 || self.k == 0 {
            return Err(Error::Config("in_channels and k must be positive".into()));
        }
        self.mrfse(0).validate()?;
        self.sstm(0).validate()
    }

    /// Spatial size after stage `l` (0-based): input / 2^(l+1).
    pub fn stage_resolution(&self, l: usize) -> [usize; 2] {
        let f = 1 << (l + 1);
        [self.input_size[0] / f, self.input_size[1] / f]
    }

    pub fn stage_resolutions(&self) -> Vec<[usize; 2]> {
        (0..STAGES).map(|l| self.stage_resolution(l)).collect()
    }

    /// Truncation used at stage `l`: `min(k, H_l, W_l)`.
    pub fn stage_k(&self, l: usize) -> usize {
        let [h, w] = self.stage_resolution(l);
        self.k.min(h).min(w)
    }

    pub fn mrfse(&self, l: usize) -> MrfSeConfig {
        MrfSeConfig {
            in_channels: self.stage_channels[l],
            expansion: self.expansion,
            kernels: self.kernels.clone(),
            se_reduction: self.se_reduction,
            se: self.use_se,
        }
    }

    pub fn sstm(&self, l: usize) -> SstmConfig {
        SstmConfig {
            channels: self.stage_channels[l],
            k: self.stage_k(l),
            gate_bottleneck: self.gate_bottleneck,
            dropout_p: self.dropout,
        }
    }

    /// Decoder stage `m` (1-based) fuses the running tensor with the skip
    /// from encoder stage `5 - m` and projects to that skip's width.
    pub fn decoder(&self, m: usize) -> DecoderStageConfig {
        let skip = self.stage_channels[STAGES - 1 - m];
        let incoming = self.stage_channels[STAGES - m];
        DecoderStageConfig {
            in_channels: incoming,
            skip_channels: skip,
            out_channels: skip,
            boundary: self.boundary_stream,
        }
    }
}

/// Tensors produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<'t> {
    /// `(B, 1, H, W)` foreground probability.
    pub p: Var<'t>,
    /// Routing maps of decoder stages 1..4 (empty without the boundary
    /// stream).
    pub betas: Vec<Var<'t>>,
    /// Encoder stage outputs, stage 1 first.
    pub skips: Vec<Var<'t>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Deterministic initialization from `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = ParamInit::new(&mut params, cfg.seed, cfg.dtype);
        let mut cin = cfg.in_channels;
        for l in 0..STAGES {
            let c = cfg.stage_channels[l];
            let p = format!("enc.{}", l + 1);
            init.conv(&format!("{p}.stem"), c, cin, 3)?;
            init.batch_norm(&format!("{p}.stem_bn"), c)?;
            if cfg.use_mrfse {
                cfg.mrfse(l).init(&mut init, &format!("{p}.mrfse"))?;
            }
            if cfg.use_sstm {
                cfg.sstm(l).init(&mut init, &format!("{p}.sstm"))?;
            }
            cin = c;
        }
        for m in 1..STAGES {
            cfg.decoder(m).init(&mut init, &format!("dec.{m}"))?;
        }
        init.conv("head", 1, cfg.stage_channels[0], 1)?;
        Ok(Model {
            config: cfg.clone(),
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn dtype(&self) -> DType {
        self.config.dtype
    }

    /// Full network on a `(B, C_in, H, W)` input bound to `ctx`, which must
    /// have been created over `self.params`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<ForwardOutput<'t>> {
        let cfg = &self.config;
        let s = x.shape();
        let [h, w] = cfg.input_size;
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != h || s[3] != w {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: s,
                rhs: vec![0, cfg.in_channels, h, w],
            });
        }
        let mut skips = Vec::with_capacity(STAGES);
        let mut z = x;
        for l in 0..STAGES {
            let p = format!("enc.{}", l + 1);
            z = ctx.conv(&format!("{p}.stem"), z, 2, 1)?;
            z = ctx.batch_norm(&format!("{p}.stem_bn"), z)?.elu()?;
            if cfg.use_mrfse {
                z = mrfse_forward(ctx, &format!("{p}.mrfse"), z, &cfg.mrfse(l))?;
            }
            if cfg.use_sstm {
                z = sstm_forward(ctx, &format!("{p}.sstm"), z, &cfg.sstm(l))?;
            }
            skips.push(z);
        }
        let mut d = skips[STAGES - 1];
        let mut betas = Vec::new();
        for m in 1..STAGES {
            let out = decoder_stage(ctx, &format!("dec.{m}"), d, skips[STAGES - 1 - m], &cfg.decoder(m))?;
            d = out.d_next;
            betas.extend(out.beta);
        }
        let p = ctx.conv("head", d.upsample2x()?, 1, 1)?.sigmoid()?;
        Ok(ForwardOutput { p, betas, skips })
    }

    /// Eval-mode prediction and routing maps as plain tensors.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let tape = Tape::new(self.dtype());
        let ctx = Ctx::new(&tape, &self.params, Mode::Eval, 0);
        let out = self.forward(&ctx, tape.constant(x.clone()))?;
        let p = (*out.p.value()).clone();
        let betas = out.betas.iter().map(|b| (*b.value()).clone()).collect();
        Ok((p, betas))
    }
}
