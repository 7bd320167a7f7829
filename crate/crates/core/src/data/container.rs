//! GTC1 tensor container.
//!
//! Layout: 8-byte magic `GTC1\0\0\0\0`, u32 LE header length, a JSON header,
//! then the f32 LE payload in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

pub const MAGIC: [u8; 8] = *b"GTC1\0\0\0\0";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub axes: Vec<String>,
    #[serde(default)]
    pub channels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<super::norm::NormStats>,
}

impl Header {
    pub fn new(shape: &[usize], axes: &[&str]) -> Self {
        Self {
            version: VERSION,
            dtype: DTYPE.into(),
            shape: shape.to_vec(),
            axes: axes.iter().map(|s| s.to_string()).collect(),
            channels: Vec::new(),
            norm: None,
        }
    }

    pub fn with_channels(mut self, channels: Vec<String>) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_norm(mut self, norm: super::norm::NormStats) -> Self {
        self.norm = Some(norm);
        self
    }
}

/// `[vol_0, spd_0, ..., vol_3, spd_3]`
pub fn traffic_channel_names() -> Vec<String> {
    (0..4).flat_map(|d| [format!("vol_{d}"), format!("spd_{d}")]).collect()
}

pub fn encode<S: Scalar>(header: &Header, t: &Tensor<S>) -> Result<Vec<u8>> {
    if header.shape != t.shape() {
        return Err(Error::Format(format!("header shape {:?} != tensor shape {:?}", header.shape, t.shape())));
    }
    if !header.axes.is_empty() && header.axes.len() != t.rank() {
        return Err(Error::Format(format!("{} axis names for a rank-{} tensor", header.axes.len(), t.rank())));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * t.numel());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(Header, Tensor<S>)> {
    if bytes.len() < 12 || bytes[..8] != MAGIC {
        return Err(Error::Format("not a GTC1 container (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Format("truncated GTC1 header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("GTC1 header: {e}")))?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.version != VERSION {
        return Err(Error::Format(format!("unsupported GTC1 version {}", header.version)));
    }
    let payload = &body[hlen..];
    let n = numel(&header.shape);
    if payload.len() != 4 * n {
        return Err(Error::Format(format!("payload holds {} bytes, shape {:?} needs {}", payload.len(), header.shape, 4 * n)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    let t = Tensor::new(&header.shape, data)?;
    Ok((header, t))
}

pub fn write<S: Scalar>(path: impl AsRef<Path>, header: &Header, t: &Tensor<S>) -> Result<()> {
    let bytes = encode(header, t)?;
    if let Some(dir) = path.as_ref().parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read<S: Scalar>(path: impl AsRef<Path>) -> Result<(Header, Tensor<S>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
