//! Named parameter storage and the per-pass forward context shared by every
//! network block.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NormAxes, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const NORM_EPS: f64 = 1e-5;
/// Fraction of the old running statistic kept at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv kernels and spectral filters; subject to weight decay.
    Weight,
    Bias,
    /// Norm scales and shifts.
    Norm,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Norm => "norm",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weight" => Some(ParamKind::Weight),
            "bias" => Some(ParamKind::Bias),
            "norm" => Some(ParamKind::Norm),
            "buffer" => Some(ParamKind::Buffer),
            _ => None,
        }
    }

    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered collection of named tensors. Insertion order is the checkpoint
/// and optimizer order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|e| &e.value)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.len())
            .sum()
    }
}

/// Deterministic initializer writing into a [`ParamStore`].
pub struct ParamInit<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, dtype: DType) -> Self {
        ParamInit {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    pub fn tensor(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<()> {
        self.store.insert(name, kind, value.to_dtype(self.dtype))
    }

    /// He-uniform kernel `(cout, cin_per_group, k, k)` under `{name}.weight`
    /// plus a zero `{name}.bias`.
    pub fn conv(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) -> Result<()> {
        let fan_in = (cin_per_group * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        let w = Tensor::from_fn([cout, cin_per_group, k, k], |_| rng.gen_range(-bound..bound));
        self.tensor(format!("{name}.weight"), ParamKind::Weight, w)?;
        self.tensor(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros([cout]))
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.tensor(format!("{name}.gamma"), ParamKind::Norm, Tensor::ones([c]))?;
        self.tensor(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros([c]))?;
        self.tensor(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros([c]))?;
        self.tensor(format!("{name}.running_var"), ParamKind::Buffer, Tensor::ones([c]))
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.tensor(format!("{name}.gamma"), ParamKind::Norm, Tensor::ones([c]))?;
        self.tensor(format!("{name}.beta"), ParamKind::Norm, Tensor::zeros([c]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One forward pass: binds stored parameters to tape variables and carries
/// the mode, dropout RNG and collected batch statistics.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    mode: Mode,
    trainable: bool,
    dropout: Cell<bool>,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
    rng: RefCell<ChaCha8Rng>,
    stats: RefCell<Vec<NormStats>>,
}

impl<'t, 's> Ctx<'t, 's> {
    /// Parameters enter the tape as constants; see [`Ctx::trainable`].
    pub fn new(tape: &'t Tape, store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Ctx {
            tape,
            store,
            mode,
            trainable: false,
            dropout: Cell::new(true),
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Makes trainable parameters gradient-carrying leaves.
    pub fn trainable(mut self) -> Self {
        self.trainable = true;
        self
    }

    /// Disables dropout even in train mode (for gradient checks).
    pub fn without_dropout(self) -> Self {
        self.dropout.set(false);
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Tape variable for a stored parameter, created once per pass.
    pub fn param(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let entry = self.store.entry(name)?;
        let v = if self.trainable && entry.kind.trainable() {
            self.tape.leaf(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Every parameter bound so far, in name order.
    pub fn bound(&self) -> Vec<(String, Var<'t>)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn take_stats(&self) -> Vec<NormStats> {
        std::mem::take(&mut self.stats.borrow_mut())
    }

    /// "Same" convolution with `{name}.weight` and `{name}.bias`.
    pub fn conv(&self, name: &str, x: Var<'t>, stride: usize, groups: usize) -> Result<Var<'t>> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let k = w.shape()[2];
        x.conv2d(w, Some(b), stride, k / 2, Padding::Zero, groups)
    }

    /// Batch norm: batch statistics in train mode (per-sample statistics
    /// when the batch has a single element), running statistics in eval.
    pub fn batch_norm(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Eval => {
                let rm = self.store.get(&format!("{name}.running_mean"))?;
                let rv = self.store.get(&format!("{name}.running_var"))?;
                x.batch_norm_fixed(gamma, beta, rm.data(), rv.data(), NORM_EPS)
            }
            Mode::Train if x.shape()[0] < 2 => {
                Ok(x.normalize(gamma, beta, NormAxes::Sample, NORM_EPS)?.0)
            }
            Mode::Train => {
                let (y, stats) = x.normalize(gamma, beta, NormAxes::Batch, NORM_EPS)?;
                if let Some((mean, var)) = stats {
                    self.stats.borrow_mut().push(NormStats {
                        name: name.to_string(),
                        mean,
                        var,
                    });
                }
                Ok(y)
            }
        }
    }

    /// Layer norm over the channel axis at every spatial location.
    pub fn layer_norm(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        Ok(x.normalize(gamma, beta, NormAxes::Channels, NORM_EPS)?.0)
    }

    /// Inverted dropout in train mode, identity in eval mode.
    pub fn dropout(&self, x: Var<'t>, p: f64) -> Result<Var<'t>> {
        if self.mode == Mode::Eval || !self.dropout.get() || p == 0.0 {
            return Ok(x);
        }
        x.dropout(p, &mut *self.rng.borrow_mut())
    }
}

/// Folds collected batch statistics into the running buffers.
pub fn apply_norm_stats(store: &mut ParamStore, stats: &[NormStats]) -> Result<()> {
    for s in stats {
        let dtype;
        {
            let rm = store.get_mut(&format!("{}.running_mean", s.name))?;
            dtype = rm.dtype();
            for (r, m) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = dtype.round(BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m);
            }
        }
        let rv = store.get_mut(&format!("{}.running_var", s.name))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = dtype.round(BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v);
        }
    }
    Ok(())
}
