//! Checkpoint serialization.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes    "GRTK"
//! version u32        1
//! config  u64 + n    TOML echo of the model configuration
//! count   u64        manifest entries
//! entry   name (u64 + utf8), dtype u8, ndim u64, dims u64 each
//! payload tensors in manifest order (f32, i64, or u8 per dtype)
//! ```
//!
//! Model tensors are stored as f32 under their dotted parameter names.
//! Optimizer state rides along as `opt.m.NAME` / `opt.v.NAME` plus an
//! `opt.step` scalar, so training resumes bit-for-bit.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::pipeline::ModelParams;
use crate::rng::Rng;

pub const MAGIC: &[u8; 4] = b"GRTK";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I64: u8 = 1;
const DTYPE_U8: u8 = 2;

/// Exported optimizer state: step count plus (name, m, v) moments.
pub type OptState = (u64, Vec<crate::optim::MomentEntry>);

pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<OptState>,
}

struct Entry {
    name: String,
    dtype: u8,
    dims: Vec<u64>,
    payload: Vec<u8>,
}

fn f32_bytes(data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn save(
    path: &Path,
    cfg: &ModelConfig,
    params: &ModelParams,
    opt: Option<&AdamW>,
) -> Result<()> {
    let mut entries = Vec::new();
    for (name, t) in params.collect() {
        entries.push(Entry {
            name,
            dtype: DTYPE_F32,
            dims: t.shape().iter().map(|&d| d as u64).collect(),
            payload: f32_bytes(t.data()),
        });
    }
    if let Some(opt) = opt {
        let (step, items) = opt.export_state();
        entries.push(Entry {
            name: "opt.step".into(),
            dtype: DTYPE_I64,
            dims: vec![1],
            payload: (step as i64).to_le_bytes().to_vec(),
        });
        for (name, m, v) in items {
            entries.push(Entry {
                name: format!("opt.m.{name}"),
                dtype: DTYPE_F32,
                dims: vec![m.len() as u64],
                payload: f32_bytes(&m),
            });
            entries.push(Entry {
                name: format!("opt.v.{name}"),
                dtype: DTYPE_F32,
                dims: vec![v.len() as u64],
                payload: f32_bytes(&v),
            });
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let echo = cfg.to_toml()?;
    buf.extend_from_slice(&(echo.len() as u64).to_le_bytes());
    buf.extend_from_slice(echo.as_bytes());
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in &entries {
        buf.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.dtype);
        buf.extend_from_slice(&(e.dims.len() as u64).to_le_bytes());
        for &d in &e.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
    }
    for e in &entries {
        buf.extend_from_slice(&e.payload);
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Rd<'a> {
    b: &'a [u8],
    p: usize,
}

impl<'a> Rd<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.p + n > self.b.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.p
            )));
        }
        let s = &self.b[self.p..self.p + n];
        self.p += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec())
            .map_err(|_| Error::Data("checkpoint name is not valid utf-8".into()))
    }
}

fn dtype_size(dtype: u8) -> Result<usize> {
    match dtype {
        DTYPE_F32 => Ok(4),
        DTYPE_I64 => Ok(8),
        DTYPE_U8 => Ok(1),
        other => Err(Error::Data(format!("unknown checkpoint dtype {other}"))),
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut rd = Rd { b: &bytes, p: 0 };
    if rd.take(4)? != MAGIC {
        return Err(Error::Data(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let echo_len = rd.u64()? as usize;
    let echo = std::str::from_utf8(rd.take(echo_len)?)
        .map_err(|_| Error::Data("config echo is not valid utf-8".into()))?;
    let config = ModelConfig::from_toml(echo)?;
    config.validate()?;

    let count = rd.u64()? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = rd.string()?;
        let dtype = rd.byte()?;
        dtype_size(dtype)?;
        let ndim = rd.u64()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(rd.u64()?);
        }
        manifest.push((name, dtype, dims));
    }

    // Seed value is irrelevant; every tensor gets overwritten or the load
    // fails.
    let mut params = ModelParams::init(&mut Rng::new(0), &config)?;
    let mut expected: std::collections::HashMap<String, &mut crate::tensor::Tensor> =
        params.collect_mut().into_iter().collect();
    let mut seen = std::collections::HashSet::new();
    let mut opt_step: Option<u64> = None;
    let mut opt_m: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let mut opt_v: std::collections::BTreeMap<String, Vec<f64>> = Default::default();

    for (name, dtype, dims) in &manifest {
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let raw = rd.take(numel * dtype_size(*dtype)?)?;
        if name == "opt.step" {
            if *dtype != DTYPE_I64 || numel != 1 {
                return Err(Error::Data("malformed opt.step entry".into()));
            }
            opt_step = Some(i64::from_le_bytes(raw.try_into().unwrap()) as u64);
            continue;
        }
        if *dtype != DTYPE_F32 {
            return Err(Error::Data(format!("tensor {name} has non-f32 dtype")));
        }
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(rest) = name.strip_prefix("opt.m.") {
            opt_m.insert(rest.to_string(), data);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            opt_v.insert(rest.to_string(), data);
        } else {
            let t = expected
                .get_mut(name)
                .ok_or_else(|| Error::Data(format!("checkpoint has unknown tensor {name}")))?;
            let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}, model wants {:?}",
                    shape,
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(&data);
            seen.insert(name.clone());
        }
    }
    if rd.p != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after payload",
            bytes.len() - rd.p
        )));
    }
    if let Some(missing) = expected.keys().find(|n| !seen.contains(*n)) {
        return Err(Error::Data(format!("checkpoint missing tensor {missing}")));
    }

    let optimizer = match opt_step {
        None => {
            if !opt_m.is_empty() || !opt_v.is_empty() {
                return Err(Error::Data("optimizer moments without opt.step".into()));
            }
            None
        }
        Some(step) => {
            if opt_m.len() != opt_v.len() {
                return Err(Error::Data("unpaired optimizer moments".into()));
            }
            let mut items = Vec::with_capacity(opt_m.len());
            for (name, m) in opt_m {
                let v = opt_v
                    .remove(&name)
                    .ok_or_else(|| Error::Data(format!("opt.v.{name} missing")))?;
                if m.len() != v.len() {
                    return Err(Error::Data(format!("opt moments for {name} disagree")));
                }
                items.push((name, m, v));
            }
            Some((step, items))
        }
    };

    // drop the borrow map before moving params out
    drop(expected);
    Ok(Checkpoint {
        config,
        params,
        optimizer,
    })
}
