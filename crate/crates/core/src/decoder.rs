//! Boundary-focused decoder stage: upsample and fuse the skip, run parallel
//! region and boundary streams, blend them per pixel with a learned map β.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Ctx, ParamInit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderStageConfig {
    /// Channels of the incoming (coarser) decoder tensor.
    pub in_channels: usize,
    pub skip_channels: usize,
    pub out_channels: usize,
    /// When false the boundary stream and β are dropped and `z = r`.
    pub boundary: bool,
}

impl DecoderStageConfig {
    pub fn fused_channels(&self) -> usize {
        self.in_channels + self.skip_channels
    }

    pub fn init(&self, init: &mut ParamInit, prefix: &str) -> Result<()> {
        let v = self.fused_channels();
        if v == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("decoder stage needs channels: {self:?}")));
        }
        for i in 0..2 {
            init.conv(&format!("{prefix}.region.{i}"), v, v, 3)?;
            init.batch_norm(&format!("{prefix}.region.{i}_bn"), v)?;
        }
        if self.boundary {
            init.conv(&format!("{prefix}.boundary.pre"), v, v, 3)?;
            init.conv(&format!("{prefix}.boundary.beta"), 1, v, 1)?;
            init.conv(&format!("{prefix}.boundary.post"), v, v, 3)?;
            init.batch_norm(&format!("{prefix}.boundary.post_bn"), v)?;
        }
        init.conv(&format!("{prefix}.project"), self.out_channels, v, 1)?;
        init.batch_norm(&format!("{prefix}.project_bn"), self.out_channels)
    }
}

/// Intermediate tensors of one stage, kept for diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct StageOutput<'t> {
    pub d_next: Var<'t>,
    pub region: Var<'t>,
    pub boundary: Option<Var<'t>>,
    /// `(N, 1, H, W)` routing map.
    pub beta: Option<Var<'t>>,
    pub routed: Var<'t>,
}

/// `r * (1 - beta) + b * beta`, with `beta` broadcast over channels.
pub fn soft_route<'t>(r: Var<'t>, b: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    if r.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_route",
            lhs: r.shape(),
            rhs: b.shape(),
        });
    }
    if let Some(v) = beta.value().data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid("soft_route", format!("beta value {v} outside [0, 1]")));
    }
    r.mul(beta.one_minus()?)?.add(b.mul(beta)?)
}

pub fn decoder_stage<'t>(
    ctx: &Ctx<'t, '_>,
    prefix: &str,
    d_prev: Var<'t>,
    skip: Var<'t>,
    cfg: &DecoderStageConfig,
) -> Result<StageOutput<'t>> {
    let (ds, ss) = (d_prev.shape(), skip.shape());
    if ds.len() != 4 || ss.len() != 4 || ds[0] != ss[0] || 2 * ds[2] != ss[2] || 2 * ds[3] != ss[3] {
        return Err(Error::ShapeMismatch {
            op: "decoder_stage",
            lhs: ds,
            rhs: ss,
        });
    }
    if ds[1] != cfg.in_channels || ss[1] != cfg.skip_channels {
        return Err(Error::ShapeMismatch {
            op: "decoder_stage",
            lhs: vec![ds[1], ss[1]],
            rhs: vec![cfg.in_channels, cfg.skip_channels],
        });
    }
    let v = Var::concat(&[d_prev.upsample2x()?, skip], 1)?;

    let mut r = v;
    for i in 0..2 {
        r = ctx.conv(&format!("{prefix}.region.{i}"), r, 1, 1)?;
        r = ctx.batch_norm(&format!("{prefix}.region.{i}_bn"), r)?.elu()?;
    }

    let (boundary, beta, routed) = if cfg.boundary {
        let b1 = ctx.conv(&format!("{prefix}.boundary.pre"), r, 1, 1)?.elu()?;
        let beta = ctx.conv(&format!("{prefix}.boundary.beta"), b1, 1, 1)?.sigmoid()?;
        let b = ctx.conv(&format!("{prefix}.boundary.post"), b1.mul(beta)?, 1, 1)?;
        let b = ctx.batch_norm(&format!("{prefix}.boundary.post_bn"), b)?.elu()?;
        (Some(b), Some(beta), soft_route(r, b, beta)?)
    } else {
        (None, None, r)
    };

    let d = ctx.conv(&format!("{prefix}.project"), routed, 1, 1)?;
    let d_next = ctx.batch_norm(&format!("{prefix}.project_bn"), d)?.elu()?;
    Ok(StageOutput {
        d_next,
        region: r,
        boundary,
        beta,
        routed,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::Tape;
    use crate::layers::{Mode, ParamStore, NORM_EPS};
    use crate::testutil::{self, rand_tensor, Arr};
    use crate::{grad_check, DType, Tensor};

    fn cfg(inc: usize, skip: usize, out: usize) -> DecoderStageConfig {
        DecoderStageConfig {
            in_channels: inc,
            skip_channels: skip,
            out_channels: out,
            boundary: true,
        }
    }

    fn store(stages: &[(&str, &DecoderStageConfig)], seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut init = ParamInit::new(&mut s, seed, DType::F64);
        for (p, c) in stages {
            c.init(&mut init, p).unwrap();
        }
        for (i, e) in s.entries_mut().enumerate() {
            let r = rand_tensor(e.value.shape(), seed * 1000 + i as u64);
            e.value = if e.name.ends_with("running_var") {
                r.map(|v| v.abs() + 0.5)
            } else {
                r
            };
        }
        s
    }

    #[test]
    fn soft_route_basics() {
        let tape = Tape::default();
        let r = tape.constant(rand_tensor(&[1, 2, 3, 3], 1));
        let b = tape.constant(rand_tensor(&[1, 2, 3, 3], 2));
        let half = tape.constant(Tensor::full([1, 1, 3, 3], 0.5));
        let z = soft_route(r, b, half).unwrap().value();
        for i in 0..18 {
            let want = (r.value().data()[i] + b.value().data()[i]) / 2.0;
            assert!((z.data()[i] - want).abs() < 1e-15);
        }
        let beta = tape.constant(rand_tensor(&[1, 1, 3, 3], 3).map(|v| v.abs()));
        assert_eq!(*soft_route(r, r, beta).unwrap().value(), *r.value());

        let bad = tape.constant(Tensor::full([1, 1, 3, 3], 1.5));
        assert!(matches!(soft_route(r, b, bad), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn soft_route_matches_scalar_loop() {
        let tape = Tape::default();
        let (rt, bt) = (rand_tensor(&[1, 2, 3, 3], 4), rand_tensor(&[1, 2, 3, 3], 5));
        let bt_map = rand_tensor(&[1, 1, 3, 3], 6).map(|v| (v + 1.0) / 2.0);
        let z = soft_route(
            tape.constant(rt.clone()),
            tape.constant(bt.clone()),
            tape.constant(bt_map.clone()),
        )
        .unwrap()
        .value();
        for c in 0..2 {
            for p in 0..9 {
                let i = c * 9 + p;
                let beta = bt_map.data()[p];
                let want = rt.data()[i] * (1.0 - beta) + bt.data()[i] * beta;
                assert!((z.data()[i] - want).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn soft_route_is_pixelwise_convex(
            r in prop::collection::vec(-5.0f64..5.0, 8),
            b in prop::collection::vec(-5.0f64..5.0, 8),
            beta in prop::collection::vec(0.0f64..=1.0, 4),
        ) {
            let tape = Tape::default();
            let z = soft_route(
                tape.constant(Tensor::new([1, 2, 2, 2], r.clone()).unwrap()),
                tape.constant(Tensor::new([1, 2, 2, 2], b.clone()).unwrap()),
                tape.constant(Tensor::new([1, 1, 2, 2], beta).unwrap()),
            ).unwrap().value();
            for i in 0..8 {
                let (lo, hi) = (r[i].min(b[i]), r[i].max(b[i]));
                prop_assert!(z.data()[i] >= lo - 1e-12 && z.data()[i] <= hi + 1e-12);
            }
        }
    }

    fn bn(s: &ParamStore, name: &str, x: &Arr) -> Arr {
        let g = |p: &str| s.get(&format!("{name}.{p}")).unwrap().data().to_vec();
        testutil::bn_fixed(x, &g("gamma"), &g("beta"), &g("running_mean"), &g("running_var"), NORM_EPS)
    }

    fn conv(s: &ParamStore, name: &str, x: &Arr) -> Arr {
        let w = s.get(&format!("{name}.weight")).unwrap();
        let b = s.get(&format!("{name}.bias")).unwrap();
        testutil::conv(x, w, b, 1, 1)
    }

    fn broadcast_mul(x: &Arr, beta: &Arr) -> Arr {
        let mut o = x.clone();
        for n in 0..x.n {
            for c in 0..x.c {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        o.set(n, c, y, xx, x.at(n, c, y, xx) * beta.at(n, 0, y, xx));
                    }
                }
            }
        }
        o
    }

    #[test]
    fn stage_matches_scalar_oracle() {
        let c = cfg(3, 2, 2);
        let s = store(&[("d", &c)], 7);
        let d0 = rand_tensor(&[1, 3, 2, 2], 8);
        let sk = rand_tensor(&[1, 2, 4, 4], 9);
        let tape = Tape::default();
        let ctx = Ctx::new(&tape, &s, Mode::Eval, 0);
        let out = decoder_stage(&ctx, "d", tape.constant(d0.clone()), tape.constant(sk.clone()), &c).unwrap();

        let v = Arr::concat_channels(&[&testutil::upsample2x(&Arr::from(&d0)), &Arr::from(&sk)]);
        let r = bn(&s, "d.region.0_bn", &conv(&s, "d.region.0", &v)).map(testutil::elu);
        let r = bn(&s, "d.region.1_bn", &conv(&s, "d.region.1", &r)).map(testutil::elu);
        let b1 = conv(&s, "d.boundary.pre", &r).map(testutil::elu);
        let beta = conv(&s, "d.boundary.beta", &b1).map(testutil::sigmoid);
        let b = conv(&s, "d.boundary.post", &broadcast_mul(&b1, &beta));
        let b = bn(&s, "d.boundary.post_bn", &b).map(testutil::elu);
        let one_minus = beta.map(|v| 1.0 - v);
        let z = broadcast_mul(&r, &one_minus).zip(&broadcast_mul(&b, &beta), |a, c| a + c);
        let d = bn(&s, "d.project_bn", &conv(&s, "d.project", &z)).map(testutil::elu);

        assert!(out.beta.unwrap().value().max_abs_diff(&beta.to_tensor()) < 1e-12);
        assert!(out.d_next.value().max_abs_diff(&d.to_tensor()) < 1e-12);
        assert_eq!(out.d_next.shape(), vec![1, 2, 4, 4]);
    }

    fn forced(bias: f64) -> (Tensor, Tensor, Option<Tensor>, Tensor) {
        let c = cfg(3, 2, 2);
        let mut s = store(&[("d", &c)], 10);
        s.get_mut("d.boundary.beta.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        s.get_mut("d.boundary.beta.bias").unwrap().data_mut()[0] = bias;
        let tape = Tape::default();
        let ctx = Ctx::new(&tape, &s, Mode::Train, 0);
        let out = decoder_stage(
            &ctx,
            "d",
            tape.constant(rand_tensor(&[2, 3, 4, 4], 11)),
            tape.constant(rand_tensor(&[2, 2, 8, 8], 12)),
            &c,
        )
        .unwrap();
        (
            (*out.routed.value()).clone(),
            (*out.region.value()).clone(),
            out.boundary.map(|b| (*b.value()).clone()),
            (*out.beta.unwrap().value()).clone(),
        )
    }

    #[test]
    fn routing_endpoints() {
        let (z, r, _, beta) = forced(-20.0);
        assert!(beta.data().iter().all(|&v| v > 0.0 && v < 1e-8));
        assert!(z.max_abs_diff(&r) < 1e-6);
        let (z, _, b, beta) = forced(20.0);
        assert!(beta.data().iter().all(|&v| v < 1.0 && v > 1.0 - 1e-8));
        assert!(z.max_abs_diff(&b.unwrap()) < 1e-6);
    }

    #[test]
    fn beta_head_receives_gradient() {
        let c = cfg(3, 2, 2);
        let s = store(&[("d", &c)], 13);
        let tape = Tape::default();
        let ctx = Ctx::new(&tape, &s, Mode::Train, 0).trainable();
        let out = decoder_stage(
            &ctx,
            "d",
            tape.constant(rand_tensor(&[2, 3, 4, 4], 14)),
            tape.constant(rand_tensor(&[2, 2, 8, 8], 15)),
            &c,
        )
        .unwrap();
        let probe = tape.constant(rand_tensor(&[2, 2, 8, 8], 16));
        out.d_next.mul(probe).unwrap().sum().unwrap().backward().unwrap();
        let g = ctx.param("d.boundary.beta.weight").unwrap().grad().unwrap();
        assert!(g.data().iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn spatial_mismatch_names_shapes() {
        let c = cfg(3, 2, 2);
        let s = store(&[("d", &c)], 17);
        let tape = Tape::default();
        let ctx = Ctx::new(&tape, &s, Mode::Eval, 0);
        let err = decoder_stage(
            &ctx,
            "d",
            tape.constant(Tensor::zeros([1, 3, 4, 4])),
            tape.constant(Tensor::zeros([1, 2, 6, 6])),
            &c,
        )
        .unwrap_err();
        match err {
            Error::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![1, 3, 4, 4]);
                assert_eq!(rhs, vec![1, 2, 6, 6]);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn without_boundary_stream_routes_region() {
        let c = DecoderStageConfig {
            boundary: false,
            ..cfg(3, 2, 2)
        };
        let s = store(&[("d", &c)], 18);
        assert!(!s.contains("d.boundary.beta.weight"));
        let tape = Tape::default();
        let ctx = Ctx::new(&tape, &s, Mode::Eval, 0);
        let out = decoder_stage(
            &ctx,
            "d",
            tape.constant(rand_tensor(&[1, 3, 2, 2], 19)),
            tape.constant(rand_tensor(&[1, 2, 4, 4], 20)),
            &c,
        )
        .unwrap();
        assert!(out.beta.is_none());
        assert_eq!(out.routed.id(), out.region.id());
    }

    #[test]
    fn two_stage_gradient_check() {
        let c1 = cfg(3, 2, 2);
        let c2 = cfg(2, 2, 2);
        let s = store(&[("d1", &c1), ("d2", &c2)], 21);
        let sk1 = rand_tensor(&[2, 2, 4, 4], 22);
        let sk2 = rand_tensor(&[2, 2, 8, 8], 23);
        let probe = rand_tensor(&[2, 2, 8, 8], 24);
        let err = grad_check(
            |tape, x| {
                let ctx = Ctx::new(tape, &s, Mode::Train, 0);
                let a = decoder_stage(&ctx, "d1", x, tape.constant(sk1.clone()), &c1)?;
                let b = decoder_stage(&ctx, "d2", a.d_next, tape.constant(sk2.clone()), &c2)?;
                b.d_next.mul(tape.constant(probe.clone()))?.sum()
            },
            &rand_tensor(&[2, 3, 2, 2], 25),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
