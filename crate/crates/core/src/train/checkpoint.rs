//! `PXL1` tensor container.
//!
//! Layout, all integers little-endian:
//! `b"PXL1"`, `u32` tensor count, then per tensor `u32` name length, UTF-8
//! name, `u32` rank, `rank` x `u64` dims, and the `f64` payload.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{build_model, Model, ModelConfig};
use crate::optim::{OptimState, SgdConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PXL1";

const MODEL_CONFIG_KEY: &str = "meta.model_config";
const OPTIM_CONFIG_KEY: &str = "meta.optim_config";
const STEP_KEY: &str = "optim.step_count";
const VELOCITY_PREFIX: &str = "optim.velocity.";

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
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
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos as u64, format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "not a PXL1 checkpoint (bad magic)"));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(at as u64 + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = n.and_then(|n| n.checked_mul(8));
        let Some(bytes) = bytes else {
            return Err(Error::format(at as u64, format!("tensor {name} is too large")));
        };
        let payload = r.take(bytes, &format!("payload of {name}"))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(at as u64, e.to_string()))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

fn bytes_tensor(bytes: &[u8]) -> Tensor {
    Tensor::from_vec(bytes.iter().map(|&b| b as f64).collect())
}

fn tensor_bytes(t: &Tensor, name: &str) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..256.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::data(format!("{name} does not hold bytes")))
            }
        })
        .collect()
}

/// Everything needed to rebuild a model and its optimizer.
pub fn checkpoint_tensors(model: &Model, optim: &OptimState) -> Vec<(String, Tensor)> {
    let mut out = model.state();
    let model_json = serde_json::to_vec(model.config()).expect("model config serializes");
    let optim_json = serde_json::to_vec(&optim.config).expect("optim config serializes");
    for (p, v) in model.params().iter().zip(&optim.velocity) {
        out.push((format!("{VELOCITY_PREFIX}{}", p.name), v.clone()));
    }
    out.push((STEP_KEY.to_string(), Tensor::scalar(optim.step_count as f64)));
    out.push((MODEL_CONFIG_KEY.to_string(), bytes_tensor(&model_json)));
    out.push((OPTIM_CONFIG_KEY.to_string(), bytes_tensor(&optim_json)));
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, optim: &OptimState) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_tensors(&checkpoint_tensors(model, optim))).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (name, t) in decode_tensors(&buf)? {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::data(format!("duplicate tensor {name} in checkpoint")));
        }
    }
    Ok(map)
}

pub fn model_from_tensors(map: &BTreeMap<String, Tensor>) -> Result<Model> {
    let raw = map
        .get(MODEL_CONFIG_KEY)
        .ok_or_else(|| Error::data("checkpoint has no model config"))?;
    let cfg: ModelConfig = serde_json::from_slice(&tensor_bytes(raw, MODEL_CONFIG_KEY)?)
        .map_err(|e| Error::data(format!("checkpoint model config: {e}")))?;
    let mut model = build_model(&cfg, 0)?;
    model.load_state(map, true)?;
    Ok(model)
}

pub fn optim_from_tensors(map: &BTreeMap<String, Tensor>, model: &Model) -> Result<OptimState> {
    let raw = map
        .get(OPTIM_CONFIG_KEY)
        .ok_or_else(|| Error::data("checkpoint has no optimizer config"))?;
    let config: SgdConfig = serde_json::from_slice(&tensor_bytes(raw, OPTIM_CONFIG_KEY)?)
        .map_err(|e| Error::data(format!("checkpoint optimizer config: {e}")))?;
    let mut optim = OptimState::new(config, model.params().iter().map(|p| p.value.shape()))?;
    for (p, v) in model.params().iter().zip(&mut optim.velocity) {
        let name = format!("{VELOCITY_PREFIX}{}", p.name);
        let t = map.get(&name).ok_or_else(|| Error::data(format!("checkpoint is missing {name}")))?;
        if t.shape() != v.shape() {
            return Err(Error::data(format!("{name} has shape {:?}", t.shape())));
        }
        *v = t.clone();
    }
    let step = map
        .get(STEP_KEY)
        .ok_or_else(|| Error::data("checkpoint has no step count"))?
        .item()?;
    if !(step >= 0.0 && step.fract() == 0.0) {
        return Err(Error::data(format!("bad step count {step}")));
    }
    optim.step_count = step as u64;
    Ok(optim)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, OptimState)> {
    let map = read_tensors(path)?;
    let model = model_from_tensors(&map)?;
    let optim = optim_from_tensors(&map, &model)?;
    Ok((model, optim))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a".into(), Tensor::from_vec(vec![1.5, -0.0, f64::MIN_POSITIVE])),
            ("b.c".into(), Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
            ("s".into(), Tensor::scalar(7.0)),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let enc = encode_tensors(&sample());
        let dec = decode_tensors(&enc).unwrap();
        assert_eq!(encode_tensors(&dec), enc);
        for ((n1, t1), (n2, t2)) in sample().iter().zip(&dec) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn byte_layout() {
        let enc = encode_tensors(&[("x".into(), Tensor::from_vec(vec![1.0]))]);
        let mut want = b"PXL1".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0, b'x', 1, 0, 0, 0]);
        want.extend(1u64.to_le_bytes());
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(enc, want);
    }

    #[test]
    fn corruption_is_detected() {
        let mut enc = encode_tensors(&sample());
        let good = enc.clone();
        enc[0] = b'Q';
        assert!(matches!(decode_tensors(&enc), Err(Error::Format { offset: 0, .. })));
        for cut in [2, 6, 9, 20, good.len() - 1] {
            assert!(matches!(decode_tensors(&good[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut long = good.clone();
        long.push(0);
        assert!(decode_tensors(&long).is_err());
    }
}
