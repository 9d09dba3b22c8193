//! IMGX exchange format.
//!
//! A file is one JSON header line followed by a raw little-endian array:
//!
//! ```text
//! {"magic":"IMGX1","height":H,"width":W,"frames":F,"dtype":"f32le"}\n
//! <H·W·F values, row-major within a frame, frame-major overall>
//! ```
//!
//! `dtype` is `"f32le"` (reconstructions, truth images) or `"u32le"` (photon
//! counts). There is no padding and no trailing data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "IMGX1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "u32le")]
    U32Le,
}

/// Header fields in their on-disk order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub magic: String,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub dtype: Dtype,
}

impl Header {
    pub fn new(height: usize, width: usize, frames: usize, dtype: Dtype) -> Self {
        Self { magic: MAGIC.to_owned(), height, width, frames, dtype }
    }

    pub fn n_values(&self) -> usize {
        self.height * self.width * self.frames
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImgxData {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImgxFile {
    pub header: Header,
    pub data: ImgxData,
}

pub fn encode(header: &Header, data: &ImgxData) -> Result<Vec<u8>> {
    let n = match data {
        ImgxData::F32(v) => v.len(),
        ImgxData::U32(v) => v.len(),
    };
    let dtype_ok = matches!(
        (header.dtype, data),
        (Dtype::F32Le, ImgxData::F32(_)) | (Dtype::U32Le, ImgxData::U32(_))
    );
    if !dtype_ok {
        return Err(Error::InvalidArgument("header dtype does not match payload".into()));
    }
    if n != header.n_values() {
        return Err(Error::SizeMismatch { expected: header.n_values() * 4, found: n * 4 });
    }
    let mut out = serde_json::to_vec(header).map_err(|e| Error::Format(e.to_string()))?;
    out.push(b'\n');
    out.reserve(n * 4);
    match data {
        ImgxData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ImgxData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<ImgxFile> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("IMGX header line is not newline-terminated".into()))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("IMGX header is not JSON: {e}")))?;
    let magic = value.get("magic").and_then(|m| m.as_str()).unwrap_or_default();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic.to_owned()));
    }
    if let Some(d) = value.get("dtype").and_then(|d| d.as_str()) {
        if d != "f32le" && d != "u32le" {
            return Err(Error::UnsupportedDtype(d.to_owned()));
        }
    }
    let header: Header = serde_json::from_value(value)
        .map_err(|e| Error::Format(format!("IMGX header: {e}")))?;
    let payload = &bytes[nl + 1..];
    let expected = header.n_values() * 4;
    if payload.len() != expected {
        return Err(Error::SizeMismatch { expected, found: payload.len() });
    }
    let words = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let data = match header.dtype {
        Dtype::F32Le => ImgxData::F32(words.map(f32::from_le_bytes).collect()),
        Dtype::U32Le => ImgxData::U32(words.map(u32::from_le_bytes).collect()),
    };
    Ok(ImgxFile { header, data })
}

pub fn read(path: impl AsRef<Path>) -> Result<ImgxFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: impl AsRef<Path>, header: &Header, data: &ImgxData) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(header, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_f32(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    frames: usize,
    data: &[f32],
) -> Result<()> {
    write(path, &Header::new(height, width, frames, Dtype::F32Le), &ImgxData::F32(data.to_vec()))
}
