use std::rc::Rc;

use super::{Backprop, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcast_shape, broadcast_strides, Tensor};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    /// (d/da, d/db)
    #[inline]
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            Binary::Add => (1.0, 1.0),
            Binary::Sub => (1.0, -1.0),
            Binary::Mul => (b, a),
            Binary::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

fn sum_to(n: usize, map: &[usize], vals: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (&j, v) in map.iter().zip(vals) {
        out[j] += v;
    }
    out
}

impl<'t> Var<'t> {
    fn binary(self, rhs: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let a = self.value();
        let b = rhs.value();
        let op = kind.name();
        if a.shape() == b.shape() {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| kind.apply(x, y))
                .collect();
            let out = Tensor::from_parts(a.shape().to_vec(), data, a.dtype());
            return self.tape.record(
                op,
                &[self, rhs],
                out,
                Box::new(move |bp: &Backprop| {
                    let (x, y) = (bp.inputs[0].data(), bp.inputs[1].data());
                    let mut ga = bp.needs[0].then(|| Vec::with_capacity(x.len()));
                    let mut gb = bp.needs[1].then(|| Vec::with_capacity(x.len()));
                    for i in 0..x.len() {
                        let (da, db) = kind.partials(x[i], y[i]);
                        if let Some(g) = &mut ga {
                            g.push(bp.grad[i] * da);
                        }
                        if let Some(g) = &mut gb {
                            g.push(bp.grad[i] * db);
                        }
                    }
                    vec![ga, gb]
                }),
            );
        }
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let map_a = Rc::new(broadcast_index_map(
            &shape,
            &broadcast_strides(a.shape(), &shape),
        ));
        let map_b = Rc::new(broadcast_index_map(
            &shape,
            &broadcast_strides(b.shape(), &shape),
        ));
        let data = map_a
            .iter()
            .zip(map_b.iter())
            .map(|(&i, &j)| kind.apply(a.data()[i], b.data()[j]))
            .collect();
        let out = Tensor::from_parts(shape, data, a.dtype());
        self.tape.record(
            op,
            &[self, rhs],
            out,
            Box::new(move |bp: &Backprop| {
                let (x, y) = (bp.inputs[0].data(), bp.inputs[1].data());
                let parts = || {
                    map_a
                        .iter()
                        .zip(map_b.iter())
                        .map(|(&i, &j)| kind.partials(x[i], y[j]))
                };
                let ga = bp.needs[0].then(|| {
                    sum_to(
                        x.len(),
                        &map_a,
                        parts().zip(bp.grad).map(|((da, _), g)| g * da),
                    )
                });
                let gb = bp.needs[1].then(|| {
                    sum_to(
                        y.len(),
                        &map_b,
                        parts().zip(bp.grad).map(|((_, db), g)| g * db),
                    )
                });
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, Binary::Div)
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative given input and
    /// output.
    fn unary(
        self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.map(f);
        self.tape.record(
            op,
            &[self],
            out,
            Box::new(move |bp: &Backprop| {
                let x = bp.inputs[0].data();
                let y = bp.out.data();
                let g = (0..x.len()).map(|i| bp.grad[i] * df(x[i], y[i])).collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// `1 - x`
    pub fn one_minus(self) -> Result<Var<'t>> {
        self.unary("one_minus", |x| 1.0 - x, |_, _| -1.0)
    }

    pub fn powf(self, e: f64) -> Result<Var<'t>> {
        self.unary(
            "powf",
            |x| x.powf(e),
            move |x, _| if e == 0.0 { 0.0 } else { e * x.powf(e - 1.0) },
        )
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(self) -> Result<Var<'t>> {
        self.unary("abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// ELU with alpha = 1.
    pub fn elu(self) -> Result<Var<'t>> {
        self.unary(
            "elu",
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(
            "relu",
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    /// Gradient is 1 on the closed interval `[lo, hi]`, 0 outside.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements, as a shape-`[]` scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = Tensor::from_parts(vec![], vec![x.sum()], x.dtype());
        self.tape.record(
            "sum",
            &[self],
            out,
            Box::new(|bp: &Backprop| vec![Some(vec![bp.grad[0]; bp.inputs[0].len()])]),
        )
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = (*self.value()).clone().reshape(shape)?;
        self.tape.record(
            "reshape",
            &[self],
            out,
            Box::new(|bp: &Backprop| vec![Some(bp.grad.to_vec())]),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data, x.dtype());
        let in_len = x.len();
        self.tape.record(
            "narrow",
            &[self],
            out,
            Box::new(move |bp: &Backprop| {
                let mut g = vec![0.0; in_len];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let src = o * len * inner;
                    g[base..base + len * inner].copy_from_slice(&bp.grad[src..src + len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {} of {:?}", axis, base)));
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                let s = o * w * inner;
                data.extend_from_slice(&v.data()[s..s + w * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data, values[0].dtype());
        first.tape.record(
            "concat",
            parts,
            out,
            Box::new(move |bp: &Backprop| {
                let mut grads: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(outer * w * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (g, &w) in grads.iter_mut().zip(&widths) {
                        g.extend_from_slice(&bp.grad[off..off + w * inner]);
                        off += w * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(bp.needs)
                    .map(|(g, &n)| n.then_some(g))
                    .collect()
            }),
        )
    }

    /// Elementwise `mask ? a : b` for a constant 0/1 mask of the same shape.
    pub fn select(mask: &Tensor, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let av = a.value();
        let bv = b.value();
        if av.shape() != bv.shape() || mask.shape() != av.shape() {
            return Err(Error::ShapeMismatch {
                op: "select",
                lhs: av.shape().to_vec(),
                rhs: if mask.shape() != av.shape() {
                    mask.shape().to_vec()
                } else {
                    bv.shape().to_vec()
                },
            });
        }
        let pick: Rc<Vec<bool>> = Rc::new(mask.data().iter().map(|&m| m != 0.0).collect());
        let data = pick
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&p, (&x, &y))| if p { x } else { y })
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), data, av.dtype());
        a.tape.record(
            "select",
            &[a, b],
            out,
            Box::new(move |bp: &Backprop| {
                let ga = bp.needs[0].then(|| {
                    pick.iter()
                        .zip(bp.grad)
                        .map(|(&p, &g)| if p { g } else { 0.0 })
                        .collect()
                });
                let gb = bp.needs[1].then(|| {
                    pick.iter()
                        .zip(bp.grad)
                        .map(|(&p, &g)| if p { 0.0 } else { g })
                        .collect()
                });
                vec![ga, gb]
            }),
        )
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
