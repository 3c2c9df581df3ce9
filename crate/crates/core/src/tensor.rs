//! Dense row-major tensors.
//!
//! Storage is always `f64`. A tensor tagged [`DType::F32`] holds only values
//! that are exactly representable as `f32`; every op that produces an `F32`
//! tensor rounds its output, so the stored numbers are the ones a 32-bit
//! engine would hold.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}, {:?}", self.dtype, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        f.write_str(")")
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            dtype: DType::F64,
        })
    }

    /// Panics when the data length does not match the shape. For internal
    /// construction where the length is known by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, dtype }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; n],
            dtype: DType::F64,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            dtype: DType::F64,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
            dtype: DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Converts to `dtype`, rounding values when narrowing to `F32`.
    pub fn to_dtype(mut self, dtype: DType) -> Self {
        if dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self.dtype = dtype;
        self
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            dtype: self.dtype,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Interprets the tensor as `(..., H, W)` and returns `(planes, H, W)`.
    pub fn planes(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() < 2 {
            return Err(Error::invalid(
                "planes",
                format!("need at least 2 dims, got {:?}", self.shape),
            ));
        }
        let h = self.shape[self.shape.len() - 2];
        let w = self.shape[self.shape.len() - 1];
        Ok((self.data.len() / (h * w).max(1), h, w))
    }

    /// Writes the debugging dump: a text header line `dtype d0 d1 ...`
    /// followed by little-endian raw values in the tensor's dtype.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = self.dtype.name().to_string();
        for d in &self.shape {
            header.push(' ');
            header.push_str(&d.to_string());
        }
        header.push('\n');
        w.write_all(header.as_bytes())?;
        match self.dtype {
            DType::F32 => {
                for v in &self.data {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for v in &self.data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)
            .map_err(|e| Error::invalid("read_dump", e.to_string()))?;
        let mut parts = header.split_whitespace();
        let dtype = parts
            .next()
            .and_then(DType::parse)
            .ok_or_else(|| Error::invalid("read_dump", format!("bad header `{}`", header.trim())))?;
        let shape = parts
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid("read_dump", e.to_string()))?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match dtype {
            DType::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut buf)
                        .map_err(|e| Error::invalid("read_dump", e.to_string()))?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            DType::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf)
                        .map_err(|e| Error::invalid("read_dump", e.to_string()))?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
        }
        Ok(Tensor { shape, data, dtype })
    }
}

/// Complex array stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: impl Into<Vec<usize>>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::invalid(
                "complex_tensor",
                format!(
                    "shape {:?} needs {} values, got re={} im={}",
                    shape,
                    n,
                    re.len(),
                    im.len()
                ),
            ));
        }
        Ok(ComplexTensor { shape, re, im })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        ComplexTensor {
            shape,
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn from_real(x: &Tensor) -> Self {
        ComplexTensor {
            shape: x.shape().to_vec(),
            re: x.data().to_vec(),
            im: vec![0.0; x.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn norm_sqr(&self, i: usize) -> f64 {
        self.re[i] * self.re[i] + self.im[i] * self.im[i]
    }

    pub fn max_abs_diff(&self, other: &ComplexTensor) -> f64 {
        (0..self.len())
            .map(|i| {
                let dr = self.re[i] - other.re[i];
                let di = self.im[i] - other.im[i];
                (dr * dr + di * di).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Resolves numpy-style broadcasting of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out` (length `out.len()`), with zero
/// stride on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Maps every flat index of `out` to the corresponding flat index in an
/// operand with the given broadcast strides.
pub(crate) fn broadcast_index_map(out: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
