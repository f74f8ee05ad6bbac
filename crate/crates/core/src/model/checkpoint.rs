//! Binary checkpoint: magic, format version, the five `ModelConfig` fields
//! as little-endian `u32`, then named arrays (`u32` name length, UTF-8 name,
//! `u32` rank, `u64` dims, little-endian `f64` data).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{ConvParams, Mlp, ModelConfig, ModelError, ModelParams, TargetScaler, NUM_ELEMENTS};
use crate::autodiff::Tensor;

const MAGIC: &[u8; 4] = b"CTWN";
const VERSION: u32 = 1;
const SCALER_NAME: &str = "head.target_scaler";

pub fn checkpoint_to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = params.config;
    for v in [c.hidden_dim, c.n_conv, c.proj_dim, c.head_hidden, c.edge_feat_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let scaler = params
        .target_scaler
        .map(|s| Tensor::vector(vec![s.mean, s.std]));
    let mut arrays = params.named_tensors();
    if let Some(t) = &scaler {
        arrays.push((SCALER_NAME.to_string(), t));
    }
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor), ModelError> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| corrupt("array name is not UTF-8"))?
        .to_string();
    let rank = r.u32()? as usize;
    if rank > 2 {
        return Err(corrupt(format!("{name}: rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = usize::try_from(r.u64()?).map_err(|_| corrupt(format!("{name}: dimension overflow")))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| corrupt(format!("{name}: dimension overflow")))?;
        shape.push(d);
    }
    let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(corrupt(format!("{name}: non-finite value")));
    }
    let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
    Ok((name, t))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams, ModelError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        hidden_dim: dims[0],
        n_conv: dims[1],
        proj_dim: dims[2],
        head_hidden: dims[3],
        edge_feat_dim: dims[4],
    };
    config
        .validate()
        .map_err(|e| corrupt(format!("header: {e}")))?;

    let count = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        if arrays.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate array {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }

    fn take(
        arrays: &mut BTreeMap<String, Tensor>,
        name: &str,
        shape: &[usize],
    ) -> Result<Tensor, ModelError> {
        let t = arrays
            .remove(name)
            .ok_or_else(|| corrupt(format!("missing array {name}")))?;
        if t.shape() != shape {
            return Err(corrupt(format!(
                "{name}: shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
    let h = config.hidden_dim;
    let fan = config.edge_input_dim();
    let elem_embed = take(&mut arrays, "elem_embed", &[NUM_ELEMENTS, h])?;
    let mut convs = Vec::with_capacity(config.n_conv);
    for k in 0..config.n_conv {
        convs.push(ConvParams {
            w_filter: take(&mut arrays, &format!("conv{k}.w_filter"), &[fan, h])?,
            w_core: take(&mut arrays, &format!("conv{k}.w_core"), &[fan, h])?,
            b_filter: take(&mut arrays, &format!("conv{k}.b_filter"), &[h])?,
            b_core: take(&mut arrays, &format!("conv{k}.b_core"), &[h])?,
        });
    }
    let mlp = |arrays: &mut BTreeMap<String, Tensor>,
               prefix: &str,
               hidden: usize,
               output: usize|
     -> Result<Option<Mlp>, ModelError> {
        if !arrays.contains_key(&format!("{prefix}.w1")) {
            return Ok(None);
        }
        Ok(Some(Mlp {
            w1: take(arrays, &format!("{prefix}.w1"), &[h, hidden])?,
            b1: take(arrays, &format!("{prefix}.b1"), &[hidden])?,
            w2: take(arrays, &format!("{prefix}.w2"), &[hidden, output])?,
            b2: take(arrays, &format!("{prefix}.b2"), &[output])?,
        }))
    };
    let projector = mlp(&mut arrays, "projector", config.proj_dim, config.proj_dim)?;
    let head = mlp(&mut arrays, "head", config.head_hidden, 1)?;
    let target_scaler = match arrays.remove(SCALER_NAME) {
        Some(t) if t.shape() == [2] && t.data()[1] > 0.0 => Some(TargetScaler {
            mean: t.data()[0],
            std: t.data()[1],
        }),
        Some(_) => return Err(corrupt("invalid target scaler")),
        None => None,
    };
    if let Some(name) = arrays.keys().next() {
        return Err(corrupt(format!("unexpected array {name}")));
    }
    Ok(ModelParams {
        config,
        elem_embed,
        convs,
        projector,
        head,
        target_scaler,
    })
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    fs::write(path, checkpoint_to_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    checkpoint_from_bytes(&fs::read(path)?)
}
