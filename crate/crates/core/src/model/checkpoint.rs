//! Checkpoint layout: a UTF-8 manifest followed by one little-endian blob.
//!
//! ```text
//! s2m-checkpoint 1
//! config {...json...}
//! seed 0
//! param enc.1.stem.weight weight f32 8,3,3,3 0
//! ...
//! end 123456
//! <blob>
//! ```
//!
//! Each `param` line gives name, kind, storage dtype, shape and byte offset
//! into the blob. Loading rebuilds the model from the config and then fills
//! every parameter by name, so a missing, extra or reshaped tensor is an
//! error rather than a silent partial load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamKind;
use crate::masl::MaslWeights;
use crate::tensor::{DType, Tensor};

use super::{Model, ModelConfig};

const MAGIC: &str = "s2m-checkpoint 1";
const MASL_ENTRY: &str = "masl.weights";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub masl_weights: Option<MaslWeights>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn width(d: DType) -> usize {
    match d {
        DType::F32 => 4,
        DType::F64 => 8,
    }
}

fn push_values(blob: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        match t.dtype() {
            DType::F32 => blob.extend_from_slice(&(*v as f32).to_le_bytes()),
            DType::F64 => blob.extend_from_slice(&v.to_le_bytes()),
        }
    }
}

fn shape_str(s: &[usize]) -> String {
    if s.is_empty() {
        return "-".into();
    }
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|d| d.parse::<usize>().map_err(|e| bad(format!("bad shape `{s}`: {e}"))))
        .collect()
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &Model, masl: Option<&MaslWeights>) -> Result<()> {
    let mut head = format!(
        "{MAGIC}\nconfig {}\nseed {}\n",
        serde_json::to_string(&model.config)?,
        model.config.seed
    );
    let mut blob = Vec::new();
    let mut entry = |head: &mut String, name: &str, kind: ParamKind, t: &Tensor| {
        head.push_str(&format!(
            "param {name} {} {} {} {}\n",
            kind.name(),
            t.dtype(),
            shape_str(t.shape()),
            blob.len()
        ));
        push_values(&mut blob, t);
    };
    for e in model.params.entries() {
        entry(&mut head, &e.name, e.kind, &e.value);
    }
    if let Some(m) = masl {
        entry(&mut head, MASL_ENTRY, ParamKind::Weight, &m.to_tensor());
    }
    head.push_str(&format!("end {}\n", blob.len()));
    let io = |e| bad(format!("write failed: {e}"));
    w.write_all(head.as_bytes()).map_err(io)?;
    w.write_all(&blob).map_err(io)?;
    w.flush().map_err(io)
}

struct Line {
    name: String,
    kind: ParamKind,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

fn parse_param(line: &str) -> Result<Line> {
    let f: Vec<&str> = line.split(' ').collect();
    if f.len() != 6 {
        return Err(bad(format!("malformed entry `{line}`")));
    }
    Ok(Line {
        name: f[1].to_string(),
        kind: ParamKind::parse(f[2]).ok_or_else(|| bad(format!("unknown kind `{}`", f[2])))?,
        dtype: DType::parse(f[3]).ok_or_else(|| bad(format!("unknown dtype `{}`", f[3])))?,
        shape: parse_shape(f[4])?,
        offset: f[5].parse().map_err(|e| bad(format!("bad offset in `{line}`: {e}")))?,
    })
}

fn decode(blob: &[u8], l: &Line) -> Result<Tensor> {
    let n: usize = l.shape.iter().product();
    let bw = width(l.dtype);
    let end = l.offset + n * bw;
    if end > blob.len() {
        return Err(bad(format!("`{}` runs past the end of the blob", l.name)));
    }
    let bytes = &blob[l.offset..end];
    let data = match l.dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(Tensor::from_parts(l.shape.clone(), data, l.dtype))
}

pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Checkpoint> {
    let mut next = |what: &str| -> Result<String> {
        let mut s = String::new();
        let n = r.read_line(&mut s).map_err(|e| bad(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(bad(format!("truncated manifest, expected {what}")));
        }
        Ok(s.trim_end_matches('\n').to_string())
    };
    if next("header")? != MAGIC {
        return Err(bad("not a checkpoint (bad magic line)"));
    }
    let cfg_line = next("config")?;
    let cfg_json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| bad("missing config line"))?;
    let config: ModelConfig = serde_json::from_str(cfg_json)?;
    let seed_line = next("seed")?;
    let seed = seed_line
        .strip_prefix("seed ")
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| bad(format!("bad seed line `{seed_line}`")))?;
    if seed != config.seed {
        return Err(bad(format!("seed {seed} disagrees with config seed {}", config.seed)));
    }
    let mut lines = Vec::new();
    let blob_len = loop {
        let l = next("entry or end")?;
        if let Some(n) = l.strip_prefix("end ") {
            break n.parse::<usize>().map_err(|e| bad(format!("bad blob length: {e}")))?;
        }
        lines.push(parse_param(&l)?);
    };
    let mut blob = Vec::with_capacity(blob_len);
    r.read_to_end(&mut blob).map_err(|e| bad(format!("read failed: {e}")))?;
    if blob.len() != blob_len {
        return Err(bad(format!("blob is {} bytes, manifest says {blob_len}", blob.len())));
    }

    let mut model = Model::build(&config)?;
    let mut masl_weights = None;
    let mut filled = 0;
    for l in &lines {
        let t = decode(&blob, l)?;
        if l.name == MASL_ENTRY {
            masl_weights = Some(MaslWeights::from_tensor(&t)?);
            continue;
        }
        let entry = model
            .params
            .entries_mut()
            .find(|e| e.name == l.name)
            .ok_or_else(|| bad(format!("unexpected parameter `{}`", l.name)))?;
        if entry.value.shape() != t.shape() || entry.kind != l.kind {
            return Err(bad(format!(
                "`{}` is {} {:?} in the checkpoint but {} {:?} in the model",
                l.name,
                l.kind.name(),
                t.shape(),
                entry.kind.name(),
                entry.value.shape()
            )));
        }
        entry.value = t.to_dtype(config.dtype);
        filled += 1;
    }
    if filled != model.params.len() {
        let missing: Vec<&str> = model
            .params
            .entries()
            .iter()
            .filter(|e| !lines.iter().any(|l| l.name == e.name))
            .map(|e| e.name.as_str())
            .collect();
        return Err(bad(format!("missing parameters: {}", missing.join(", "))));
    }
    Ok(Checkpoint { model, masl_weights })
}

pub fn save_checkpoint(path: &Path, model: &Model, masl: Option<&MaslWeights>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), model, masl)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
