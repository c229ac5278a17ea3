use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DType, Layer, ModelConfig, NnError, ResNet, Scalar, Slot, Tensor};
use crate::pianoroll::Variant;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFNT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sidecar written next to every checkpoint as `<path>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub variant: Variant,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, variant: Variant) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model,
            variant,
            epoch: None,
            config_hash: None,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn ckpt_err(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

/// Serialises every parameter and buffer as
/// `magic | version u32 | count u32 | { name_len u32 | name | dtype u8 | ndim u32 | dims u64… | values LE }…`.
pub fn encode_tensors<T: Scalar>(tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ckpt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Inverse of [`encode_tensors`]; values stored in another precision are converted.
pub fn decode_tensors<T: Scalar>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ckpt_err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ckpt_err("tensor name is not UTF-8"))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| ckpt_err(format!("{name}: unknown dtype tag {tag}")))?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(ckpt_err(format!("{name}: rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(r.u64()?).map_err(|_| ckpt_err(format!("{name}: dimension overflow")))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ckpt_err(format!("{name}: size overflow")))?;
        let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| ckpt_err(format!("{name}: size overflow")))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Writes the tensor container to `path` and the metadata sidecar beside it.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &mut ResNet<T>, meta: &CheckpointMeta) -> Result<(), NnError> {
    if meta.model != *model.config() {
        return Err(ckpt_err("metadata model config differs from the model"));
    }
    let bytes = encode_tensors(&model.named_tensors());
    let json = serde_json::to_string_pretty(meta).map_err(|e| ckpt_err(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    let side = sidecar_path(path);
    fs::write(&side, json).map_err(|e| ckpt_err(format!("{}: {e}", side.display())))?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta, NnError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| ckpt_err(format!("{}: {e}", side.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| ckpt_err(format!("{}: {e}", side.display())))?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!("unsupported sidecar version {}", meta.format_version)));
    }
    Ok(meta)
}

/// Rebuilds the model described by the sidecar and fills every tensor.
/// Missing, extra or mis-shaped tensors are errors.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ResNet<T>, CheckpointMeta), NnError> {
    let meta = load_meta(path)?;
    let bytes = fs::read(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    let mut stored: HashMap<String, Tensor<T>> = decode_tensors(&bytes)?.into_iter().collect();
    let mut model = ResNet::new(meta.model, 0)?;
    let mut failure = None;
    model.visit_mut("", &mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let target = match slot {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        };
        match stored.remove(name) {
            Some(t) if t.shape() == target.shape() => *target = t,
            Some(t) => failure = Some(format!("{name}: stored shape {:?}, model {:?}", t.shape(), target.shape())),
            None => failure = Some(format!("missing tensor {name}")),
        }
    });
    if let Some(msg) = failure {
        return Err(ckpt_err(msg));
    }
    if let Some(extra) = stored.keys().min() {
        return Err(ckpt_err(format!("unexpected tensor {extra}")));
    }
    model.zero_grad();
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Depth;

    #[test]
    fn container_round_trip() {
        let ts = vec![
            ("a".to_string(), Tensor::from_vec(&[2, 2], vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.0]).unwrap()),
            ("b.c".to_string(), Tensor::<f32>::zeros(&[0])),
        ];
        let bytes = encode_tensors(&ts);
        assert_eq!(&bytes[..4], b"CFNT");
        let back: Vec<(String, Tensor<f32>)> = decode_tensors(&bytes).unwrap();
        assert_eq!(back, ts);
        let wide: Vec<(String, Tensor<f64>)> = decode_tensors(&bytes).unwrap();
        assert_eq!(wide[0].1.data()[0], 1.5);
    }

    #[test]
    fn corrupt_containers_are_errors() {
        let bytes = encode_tensors(&[("w".to_string(), Tensor::<f32>::full(&[3], 1.0))]);
        for cut in 0..bytes.len() {
            assert!(decode_tensors::<f32>(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_tensors::<f32>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_tensors::<f32>(&long).is_err());
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            depth: Depth::D18,
            width_multiplier: 0.0625,
            in_channels: 1,
            n_classes: 4,
        };
        let mut model = ResNet::<f32>::new(cfg, 11).unwrap();
        let x = Tensor::from_vec(&[2, 1, 48, 24], (0..2304).map(|i| ((i * 31) % 17) as f32 / 17.0).collect()).unwrap();
        // move running statistics away from their initial values
        model.forward_train(&x).unwrap();
        let meta = CheckpointMeta::new(cfg, Variant::OnsetOmitted);
        save_checkpoint(&dir.path().join("m.ckpt"), &mut model, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta2, meta);
        let a = model.infer(&x).unwrap();
        let b = loaded.infer(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
