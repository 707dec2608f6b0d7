//! `GMSRM1` container: the magic bytes, a little-endian `u64` header length,
//! a JSON header, then the raw little-endian tensor payload.
//!
//! Tensors are written in name order at increasing offsets, so saving the
//! same state twice produces identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const MAGIC: &[u8; 6] = b"GMSRM1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    /// `memory`, `inpainting`, `feature-extractor`, ...
    pub kind: String,
    #[serde(default)]
    pub model_config: Option<serde_json::Value>,
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rng: Option<RngState>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint: header plus the payload bytes.
#[derive(Debug, Clone)]
pub struct Container {
    pub header: Header,
    payload: Vec<u8>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    Ok(match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
        DType::U32 => "u32",
        DType::U8 => "u8",
        other => return Err(invalid!("unsupported checkpoint dtype {other:?}")),
    })
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U32 => flat.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::U8 => flat.to_vec1::<u8>()?,
        other => return Err(invalid!("unsupported checkpoint dtype {other:?}")),
    })
}

impl Container {
    /// Builds a container; `header.tensors` is filled in from `tensors`.
    pub fn new(mut header: Header, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut payload = Vec::new();
        header.tensors.clear();
        for (name, t) in tensors {
            let bytes = tensor_bytes(t)?;
            header.tensors.push(TensorEntry {
                name: name.clone(),
                dtype: dtype_name(t.dtype())?.to_string(),
                shape: t.dims().to_vec(),
                offset: payload.len() as u64,
                len: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        }
        Ok(Self { header, payload })
    }

    pub fn header(kind: &str) -> Header {
        Header {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            model_config: None,
            step: 0,
            seed: 0,
            rng: None,
            meta: serde_json::Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fmt("not a GMSRM1 checkpoint"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let hlen = u64::from_le_bytes(len) as usize;
        let start = MAGIC.len() + 8;
        let end = start
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[start..end])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let payload = bytes[end..].to_vec();
        for e in &header.tensors {
            if e.offset.checked_add(e.len).is_none_or(|x| x > payload.len() as u64) {
                return Err(Error::Format(format!("tensor {} exceeds payload", e.name)));
            }
        }
        Ok(Self { header, payload })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, e: &TensorEntry, device: &Device) -> Result<Tensor> {
        let raw = &self.payload[e.offset as usize..(e.offset + e.len) as usize];
        let n: usize = e.shape.iter().product();
        let bad = || Error::Format(format!("tensor {} has inconsistent length", e.name));
        let t = match e.dtype.as_str() {
            "f32" => {
                if raw.len() != n * 4 {
                    return Err(bad());
                }
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), device)?
            }
            "f64" => {
                if raw.len() != n * 8 {
                    return Err(bad());
                }
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), device)?
            }
            "u32" => {
                if raw.len() != n * 4 {
                    return Err(bad());
                }
                let v: Vec<u32> = raw
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), device)?
            }
            "u8" => {
                if raw.len() != n {
                    return Err(bad());
                }
                Tensor::from_vec(raw.to_vec(), e.shape.as_slice(), device)?
            }
            other => return Err(Error::Format(format!("unknown dtype {other}"))),
        };
        Ok(t)
    }

    pub fn tensors(&self, device: &Device) -> Result<BTreeMap<String, Tensor>> {
        self.header
            .tensors
            .iter()
            .map(|e| Ok((e.name.clone(), self.tensor(e, device)?)))
            .collect()
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str, device: &Device) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for e in &self.header.tensors {
            if let Some(rest) = e.name.strip_prefix(prefix) {
                out.insert(rest.to_string(), self.tensor(e, device)?);
            }
        }
        Ok(out)
    }
}
