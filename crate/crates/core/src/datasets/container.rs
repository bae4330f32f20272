//! `UMS1` array container: 4-byte magic, a kind byte (0 = float32 image,
//! 1 = uint8 labels), little-endian `u32` height and width, then `H·W`
//! row-major little-endian payload values.

use std::fs;
use std::path::Path;

use super::{Image, LabelMap};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UMS1";
const HEADER_LEN: usize = 13;

/// A decoded container before domain validation.
#[derive(Clone, Debug, PartialEq)]
pub enum RawArray {
    Float32 { height: usize, width: usize, data: Vec<f32> },
    Labels { height: usize, width: usize, data: Vec<u8> },
}

impl RawArray {
    pub fn encode(&self) -> Vec<u8> {
        let (kind, h, w) = match self {
            RawArray::Float32 { height, width, .. } => (0u8, *height, *width),
            RawArray::Labels { height, width, .. } => (1u8, *height, *width),
        };
        let mut out = Vec::with_capacity(HEADER_LEN + h * w * 4);
        out.extend_from_slice(MAGIC);
        out.push(kind);
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        match self {
            RawArray::Float32 { data, .. } => {
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            RawArray::Labels { data, .. } => out.extend_from_slice(data),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let kind = bytes[4];
        let h = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let count = h
            .checked_mul(w)
            .ok_or_else(|| Error::format(5, "dimension product overflows"))?;
        let elem = match kind {
            0 => 4,
            1 => 1,
            k => return Err(Error::format(4, format!("unknown kind byte {k}"))),
        };
        let want = HEADER_LEN + count * elem;
        if bytes.len() < want {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated payload: {h}x{w} needs {want} bytes"),
            ));
        }
        if bytes.len() > want {
            return Err(Error::format(want as u64, "trailing bytes after payload"));
        }
        let payload = &bytes[HEADER_LEN..];
        Ok(match kind {
            0 => RawArray::Float32 {
                height: h,
                width: w,
                data: payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            },
            _ => RawArray::Labels {
                height: h,
                width: w,
                data: payload.to_vec(),
            },
        })
    }
}

impl From<&Image> for RawArray {
    fn from(img: &Image) -> Self {
        RawArray::Float32 {
            height: img.height(),
            width: img.width(),
            data: img.pixels().to_vec(),
        }
    }
}

impl From<&LabelMap> for RawArray {
    fn from(l: &LabelMap) -> Self {
        RawArray::Labels {
            height: l.height(),
            width: l.width(),
            data: l.labels().to_vec(),
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_array(path: &Path) -> Result<RawArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RawArray::decode(&bytes)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_bytes(path, &RawArray::from(image).encode())
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_bytes(path, &RawArray::from(labels).encode())
}

pub fn read_image(path: &Path) -> Result<Image> {
    match read_array(path)? {
        RawArray::Float32 { height, width, data } => Image::new(height, width, data),
        RawArray::Labels { .. } => Err(Error::format(4, "expected an image container, found labels")),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read_array(path)? {
        RawArray::Labels { height, width, data } => LabelMap::new(height, width, data),
        RawArray::Float32 { .. } => Err(Error::format(4, "expected a label container, found an image")),
    }
}
