//! Finite-difference gradient checks of the main building blocks on small
//! deterministic instances. Shared by the `gradcheck` subcommand and tests.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, grad_check_with};
use crate::blocks::{sstm_forward, SstmConfig};
use crate::decoder::{decoder_stage, DecoderStageConfig};
use crate::error::{Error, Result};
use crate::layers::{Ctx, Mode, ParamInit, ParamStore};
use crate::masl::{masl_total, LossConfig, MaslWeights};
use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Sstm,
    Decoder,
    Masl,
    Model,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 4] = [CheckTarget::Sstm, CheckTarget::Decoder, CheckTarget::Masl, CheckTarget::Model];

    pub fn name(self) -> &'static str {
        match self {
            CheckTarget::Sstm => "sstm",
            CheckTarget::Decoder => "decoder",
            CheckTarget::Masl => "masl",
            CheckTarget::Model => "model",
        }
    }

    /// Largest relative error of the check.
    pub fn run(self) -> Result<f64> {
        match self {
            CheckTarget::Sstm => check_sstm(),
            CheckTarget::Decoder => check_decoder(),
            CheckTarget::Masl => check_masl(),
            CheckTarget::Model => check_model(),
        }
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown check `{s}` (sstm, decoder, masl, model)")))
    }
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Replaces every stored value with a random one so no parameter sits at
/// its (often symmetric) initial value; variances stay positive.
fn scramble(store: &mut ParamStore, seed: u64) {
    for (i, e) in store.entries_mut().enumerate() {
        let (lo, hi) = if e.name.ends_with("running_var") { (0.5, 1.5) } else { (-1.0, 1.0) };
        e.value = uniform(e.value.shape(), seed.wrapping_add(i as u64), lo, hi);
    }
}

fn check_sstm() -> Result<f64> {
    let mut worst: f64 = 0.0;
    // Full and truncated spectra.
    for k in [8, 4] {
        let cfg = SstmConfig {
            gate_bottleneck: 4,
            ..SstmConfig::new(4, k)
        };
        let mut s = ParamStore::new();
        cfg.init(&mut ParamInit::new(&mut s, 1, DType::F64), "s")?;
        scramble(&mut s, 100);
        let probe = uniform(&[1, 4, 8, 8], 2, -1.0, 1.0);
        let err = grad_check(
            |tape, x| {
                let ctx = Ctx::new(tape, &s, Mode::Train, 0).without_dropout();
                sstm_forward(&ctx, "s", x, &cfg)?.mul(tape.constant(probe.clone()))?.sum()
            },
            &uniform(&[1, 4, 8, 8], 3, -1.0, 1.0),
            STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_decoder() -> Result<f64> {
    let c1 = DecoderStageConfig {
        in_channels: 3,
        skip_channels: 2,
        out_channels: 2,
        boundary: true,
    };
    let c2 = DecoderStageConfig {
        in_channels: 2,
        ..c1.clone()
    };
    let mut s = ParamStore::new();
    {
        let mut init = ParamInit::new(&mut s, 4, DType::F64);
        c1.init(&mut init, "d1")?;
        c2.init(&mut init, "d2")?;
    }
    scramble(&mut s, 200);
    let sk1 = uniform(&[2, 2, 4, 4], 5, -1.0, 1.0);
    let sk2 = uniform(&[2, 2, 8, 8], 6, -1.0, 1.0);
    let probe = uniform(&[2, 2, 8, 8], 7, -1.0, 1.0);
    grad_check(
        |tape, x| {
            let ctx = Ctx::new(tape, &s, Mode::Train, 0);
            let a = decoder_stage(&ctx, "d1", x, tape.constant(sk1.clone()), &c1)?;
            let b = decoder_stage(&ctx, "d2", a.d_next, tape.constant(sk2.clone()), &c2)?;
            b.d_next.mul(tape.constant(probe.clone()))?.sum()
        },
        &uniform(&[2, 3, 2, 2], 8, -1.0, 1.0),
        STEP,
    )
}

fn check_masl() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let y = Tensor::from_fn([1, 1, 16, 16], |_| if rng.gen::<f64>() < 0.35 { 1.0 } else { 0.0 });
    let p = uniform(&[1, 1, 16, 16], 10, 0.02, 0.98);
    let w = MaslWeights::from_array([1.3, 0.7, 2.0, 0.5, 0.9]).to_tensor();
    let cfg = LossConfig::default();
    let by_p = grad_check(|tape, p| Ok(masl_total(&y, p, tape.constant(w.clone()), &cfg)?.0), &p, STEP)?;
    let by_w = grad_check(|tape, w| Ok(masl_total(&y, tape.constant(p.clone()), w, &cfg)?.0), &w, STEP)?;
    Ok(by_p.max(by_w))
}

/// The smallest configuration end to end, two samples in train mode, input
/// gradient probed on every 7th element.
fn check_model() -> Result<f64> {
    let cfg = ModelConfig::tiny();
    let mut model = Model::build(&cfg)?;
    scramble(&mut model.params, 300);
    let probe = uniform(&[2, 1, 32, 32], 11, -1.0, 1.0);
    grad_check_with(
        |tape, x| {
            let ctx = Ctx::new(tape, &model.params, Mode::Train, 0).without_dropout();
            model.forward(&ctx, x)?.p.mul(tape.constant(probe.clone()))?.sum()
        },
        &uniform(&[2, 3, 32, 32], 12, 0.0, 1.0),
        STEP,
        |i| i % 7 == 0,
    )
}
