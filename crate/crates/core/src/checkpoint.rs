//! Binary checkpoint and tensor-file encoding. See `docs/formats.md` for
//! the byte layout.
//!
//! Every multi-byte integer and value is little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Model, ModelSpec, NamedTensors};
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::SgdState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const TENSOR_FILE_MAGIC: &[u8; 4] = b"SCTF";
pub const FORMAT_VERSION: u32 = 1;

const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Clone, Debug, PartialEq)]
pub enum StoredData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

/// A tensor as it sits in a tensor table.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: StoredData,
}

impl StoredTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => StoredData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => StoredData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        StoredTensor { shape: t.shape().to_vec(), data }
    }

    pub fn from_u8(shape: &[usize], data: Vec<u8>) -> Self {
        StoredTensor { shape: shape.to_vec(), data: StoredData::U8(data) }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            StoredData::F32(_) => DType::F32,
            StoredData::F64(_) => DType::F64,
            StoredData::U8(_) => DType::U8,
        }
    }

    /// Converts to a float tensor; exact whenever the stored type is `T` or
    /// narrower.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data = match &self.data {
            StoredData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            StoredData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
            StoredData::U8(_) => return Err(Error::CorruptCheckpoint("expected a float tensor".into())),
        };
        Tensor::new(&self.shape, data)
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            StoredData::U8(v) => Ok(v),
            _ => Err(Error::CorruptCheckpoint("expected a u8 tensor".into())),
        }
    }
}

pub fn write_tensor_table(out: &mut Vec<u8>, entries: &[(String, StoredTensor)]) {
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dtype().code());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &e in &t.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &t.data {
            StoredData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            StoredData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            StoredData::U8(v) => out.extend_from_slice(v),
        }
    }
}

/// Bounds-checked cursor over an in-memory file.
struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::CorruptCheckpoint("unexpected end of file".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_tensor_table(r: &mut Reader<'_>) -> Result<Vec<(String, StoredTensor)>> {
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        let code = r.take(1)?[0];
        let dtype =
            DType::from_code(code).ok_or_else(|| Error::CorruptCheckpoint(format!("unknown dtype code {code}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::CorruptCheckpoint("extent overflow".into()))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::CorruptCheckpoint("tensor size overflow".into()))?;
        let raw = r.take(len)?;
        let data = match dtype {
            DType::F32 => StoredData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => StoredData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
            DType::U8 => StoredData::U8(raw.to_vec()),
        };
        entries.push((name, StoredTensor { shape, data }));
    }
    Ok(entries)
}

fn read_header<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Reader<'a>> {
    let mut r = Reader { bytes };
    if r.take(4)? != magic {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported format version {version}")));
    }
    Ok(r)
}

fn expect_end(r: &Reader<'_>) -> Result<()> {
    if r.bytes.is_empty() {
        Ok(())
    } else {
        Err(Error::CorruptCheckpoint(format!("{} trailing bytes", r.bytes.len())))
    }
}

/// A standalone tensor file: magic, version, tensor table.
pub fn encode_tensor_file(entries: &[(String, StoredTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_FILE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    write_tensor_table(&mut out, entries);
    out
}

pub fn decode_tensor_file(bytes: &[u8]) -> Result<Vec<(String, StoredTensor)>> {
    let mut r = read_header(bytes, TENSOR_FILE_MAGIC)?;
    let entries = read_tensor_table(&mut r)?;
    expect_end(&r)?;
    Ok(entries)
}

/// JSON metadata block of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dtype: DType,
    pub model: ModelSpec,
    pub seed: u64,
    pub fused: bool,
    pub has_optimizer: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub optimizer: Option<SgdState<T>>,
    pub seed: u64,
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        model: ckpt.model.spec.clone(),
        seed: ckpt.seed,
        fused: ckpt.model.fused,
        has_optimizer: ckpt.optimizer.is_some(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut entries: Vec<(String, StoredTensor)> =
        ckpt.model.named_params().iter().map(|(n, t)| (n.clone(), StoredTensor::from_tensor(t))).collect();
    if let Some(opt) = &ckpt.optimizer {
        for (n, t) in &opt.velocity {
            entries.push((format!("{MOMENTUM_PREFIX}{n}"), StoredTensor::from_tensor(t)));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    write_tensor_table(&mut out, &entries);
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = read_header(bytes, CHECKPOINT_MAGIC)?;
    let meta_len = usize::try_from(r.u64()?).map_err(|_| Error::CorruptCheckpoint("metadata length".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let entries = read_tensor_table(&mut r)?;
    expect_end(&r)?;
    let mut params: NamedTensors<T> = Vec::new();
    let mut velocity: NamedTensors<T> = Vec::new();
    for (name, t) in &entries {
        match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(param) => velocity.push((param.to_string(), t.to_tensor()?)),
            None => params.push((name.clone(), t.to_tensor()?)),
        }
    }
    let model =
        Model::from_params(&meta.model, &params, meta.fused).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let optimizer = meta.has_optimizer.then_some(SgdState { velocity });
    Ok(Checkpoint { model, optimizer, seed: meta.seed })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_model, LayerKind};

    fn ckpt(kind: LayerKind) -> Checkpoint<f32> {
        let model = build_model(&ModelSpec::toy(4, 3, 2, kind), 1).unwrap();
        let velocity = model.named_params().into_iter().map(|(n, t)| (n, t.scale(0.5))).collect();
        Checkpoint { model, optimizer: Some(SgdState { velocity }), seed: 42 }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = ckpt(LayerKind::ShapeConv);
        let bytes = encode_checkpoint(&c).unwrap();
        assert_eq!(&bytes[..4], b"SCKP");
        assert_eq!(decode_checkpoint::<f32>(&bytes).unwrap(), c);
    }

    #[test]
    fn fused_checkpoint_loads_as_vanilla() {
        let c = ckpt(LayerKind::ShapeConv);
        let fused = Checkpoint { model: c.model.fused().unwrap(), optimizer: None, seed: c.seed };
        let back = decode_checkpoint::<f32>(&encode_checkpoint(&fused).unwrap()).unwrap();
        assert!(back.model.fused);
        assert_eq!(back.model.spec.shapeconv_layers(), 0);
        assert!(back.optimizer.is_none());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = encode_checkpoint(&ckpt(LayerKind::Conv)).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint::<f32>(&bytes[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_checkpoint::<f32>(&extra), Err(Error::CorruptCheckpoint(_))));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&magic), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn tensor_file_layout() {
        let entries = vec![
            ("a".to_string(), StoredTensor::from_tensor(&Tensor::new(&[2], vec![1.5f32, -2.0]).unwrap())),
            ("b".to_string(), StoredTensor::from_u8(&[1, 2], vec![7, 255])),
        ];
        let bytes = encode_tensor_file(&entries);
        let mut expected = b"SCTF".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'a');
        expected.push(1);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(b'b');
        expected.push(3);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&[7, 255]);
        assert_eq!(bytes, expected);
        assert_eq!(decode_tensor_file(&bytes).unwrap(), entries);
    }
}
