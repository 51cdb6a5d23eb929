//! Checkpoint binary format.
//!
//! Layout: magic `BDRN`, u32 LE version (1), config block (variant u8,
//! fusion u8, channels u32, main/extra/merge iters u32 each), u32 tensor
//! count, then per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims,
//! raw little-endian f64 values. Tensors are ordered by name, bytewise
//! ascending. Batch-norm running statistics travel as the reserved tensor
//! names `bn.running_mean` / `bn.running_var`; optimizer state is not
//! persisted.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::{Fusion, Model, ModelConfig, Variant};

pub const MAGIC: &[u8; 4] = b"BDRN";
pub const VERSION: u32 = 1;

const RUNNING_MEAN: &str = "bn.running_mean";
const RUNNING_VAR: &str = "bn.running_var";

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::Drrn => 0,
        Variant::Bdrrn => 1,
    }
}

fn fusion_code(f: Fusion) -> u8 {
    match f {
        Fusion::Add => 0,
        Fusion::Concat => 1,
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating checkpoint {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)
}

pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    let werr = |e| Error::io("writing checkpoint", e);
    let cfg = &model.config;
    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&[variant_code(cfg.variant), fusion_code(cfg.fusion)]).map_err(werr)?;
    for v in [cfg.channels, cfg.main_iters, cfg.extra_iters, cfg.merge_iters] {
        w.write_all(&(v as u32).to_le_bytes()).map_err(werr)?;
    }

    // BTreeMap keys are bytewise ascending, the required tensor order.
    let mut tensors: BTreeMap<String, (Vec<u32>, Vec<f64>)> = BTreeMap::new();
    for (name, p) in model.params.iter() {
        let s = p.value.shape();
        tensors.insert(
            name.to_string(),
            (
                vec![s.n as u32, s.c as u32, s.h as u32, s.w as u32],
                p.value.data().to_vec(),
            ),
        );
    }
    if model.bn.initialized {
        tensors.insert(RUNNING_MEAN.into(), (vec![1], vec![model.bn.running_mean]));
        tensors.insert(RUNNING_VAR.into(), (vec![1], vec![model.bn.running_var]));
    }

    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(werr)?;
    for (name, (dims, data)) in &tensors {
        w.write_all(&(name.len() as u16).to_le_bytes()).map_err(werr)?;
        w.write_all(name.as_bytes()).map_err(werr)?;
        w.write_all(&[dims.len() as u8]).map_err(werr)?;
        for d in dims {
            w.write_all(&d.to_le_bytes()).map_err(werr)?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

struct RawCheckpoint {
    config: ModelConfig,
    tensors: BTreeMap<String, (Vec<u32>, Vec<f64>)>,
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint("truncated checkpoint".into())
        } else {
            Error::io("reading checkpoint", e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn parse_checkpoint<R: Read>(r: &mut R) -> Result<RawCheckpoint> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?} (expected `BDRN`)",
            magic
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut vf = [0u8; 2];
    read_exact_or_truncated(r, &mut vf)?;
    let variant = match vf[0] {
        0 => Variant::Drrn,
        1 => Variant::Bdrrn,
        other => return Err(Error::Checkpoint(format!("unknown variant code {other}"))),
    };
    let fusion = match vf[1] {
        0 => Fusion::Add,
        1 => Fusion::Concat,
        other => return Err(Error::Checkpoint(format!("unknown fusion code {other}"))),
    };
    let channels = read_u32(r)? as usize;
    let main_iters = read_u32(r)? as usize;
    let extra_iters = read_u32(r)? as usize;
    let merge_iters = read_u32(r)? as usize;
    let config = ModelConfig {
        variant,
        fusion,
        channels,
        main_iters,
        extra_iters,
        merge_iters,
    };

    let count = read_u32(r)?;
    let mut tensors = BTreeMap::new();
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let mut len_b = [0u8; 2];
        read_exact_or_truncated(r, &mut len_b)?;
        let name_len = u16::from_le_bytes(len_b) as usize;
        let mut name_b = vec![0u8; name_len];
        read_exact_or_truncated(r, &mut name_b)?;
        let name = String::from_utf8(name_b)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if let Some(prev) = &prev_name {
            if name.as_bytes() <= prev.as_bytes() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` out of order after `{prev}`"
                )));
            }
        }
        prev_name = Some(name.clone());
        let mut ndim_b = [0u8; 1];
        read_exact_or_truncated(r, &mut ndim_b)?;
        let mut dims = Vec::with_capacity(ndim_b[0] as usize);
        let mut total = 1usize;
        for _ in 0..ndim_b[0] {
            let d = read_u32(r)?;
            dims.push(d);
            total = total
                .checked_mul(d as usize)
                .ok_or_else(|| Error::Checkpoint("tensor dims overflow".into()))?;
        }
        let mut data = vec![0.0f64; total];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            read_exact_or_truncated(r, &mut b)?;
            *v = f64::from_le_bytes(b);
        }
        tensors.insert(name, (dims, data));
    }
    Ok(RawCheckpoint { config, tensors })
}

fn apply_to_model(raw: &RawCheckpoint, model: &mut Model) -> Result<()> {
    for (name, p) in model.params.iter_mut() {
        let (dims, data) = raw
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor `{name}`")))?;
        let s = p.value.shape();
        let expect = [s.n as u32, s.c as u32, s.h as u32, s.w as u32];
        if dims.as_slice() != expect {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {dims:?}, model expects {expect:?}"
            )));
        }
        p.value = Tensor::new(Shape::new(s.n, s.c, s.h, s.w), data.clone())?;
        p.value.requires_grad = true;
    }
    let mean = raw.tensors.get(RUNNING_MEAN);
    let var = raw.tensors.get(RUNNING_VAR);
    match (mean, var) {
        (Some((_, m)), Some((_, v))) => {
            model.bn.running_mean = m[0];
            model.bn.running_var = v[0];
            model.bn.initialized = true;
        }
        (None, None) => {}
        _ => {
            return Err(Error::Checkpoint(
                "checkpoint carries only one of the running statistics".into(),
            ))
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening checkpoint {}", path.display()), e))?;
    let mut r = std::io::BufReader::new(file);
    let raw = parse_checkpoint(&mut r)?;
    let mut model = Model::build(raw.config, 0)?;
    apply_to_model(&raw, &mut model)?;
    Ok(model)
}

/// Loads a checkpoint into a model of a different configuration. Succeeds
/// when every parameter the target wiring needs is present with a matching
/// shape — e.g. a DRRN checkpoint loads as B-DRRN(Add), whose parameter set
/// is identical.
pub fn load_checkpoint_as(path: &Path, config: ModelConfig) -> Result<Model> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening checkpoint {}", path.display()), e))?;
    let mut r = std::io::BufReader::new(file);
    let raw = parse_checkpoint(&mut r)?;
    let mut model = Model::build(config, 0)?;
    apply_to_model(&raw, &mut model)?;
    Ok(model)
}
