//! `CFNI` single-channel image files.
//!
//! Layout: `b"CFNI"`, version byte `1`, height and width as `u32` LE, then
//! `height·width` `f32` LE values in row-major order.

use std::fs;
use std::path::Path;

use super::DataError;
use crate::tensor::Array;

pub const IMAGE_MAGIC: &[u8; 4] = b"CFNI";
pub const IMAGE_VERSION: u8 = 1;
const HEADER_LEN: usize = 13;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImageFormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated payload")]
    TruncatedPayload,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("image must be rank 2 and finite, got shape {0:?}")]
    NotAnImage(Vec<usize>),
}

pub fn encode_image(img: &Array) -> Result<Vec<u8>, ImageFormatError> {
    let [h, w] = img.shape()[..] else {
        return Err(ImageFormatError::NotAnImage(img.shape().to_vec()));
    };
    if !img.is_finite() {
        return Err(ImageFormatError::NotAnImage(img.shape().to_vec()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * img.len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.push(IMAGE_VERSION);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<Array, ImageFormatError> {
    if bytes.len() < 5 {
        return Err(if bytes.len() >= 4 && &bytes[..4] != IMAGE_MAGIC {
            ImageFormatError::BadMagic
        } else {
            ImageFormatError::TruncatedHeader
        });
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(ImageFormatError::BadMagic);
    }
    if bytes[4] != IMAGE_VERSION {
        return Err(ImageFormatError::BadVersion(bytes[4]));
    }
    if bytes.len() < HEADER_LEN {
        return Err(ImageFormatError::TruncatedHeader);
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[HEADER_LEN..];
    let need = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or(ImageFormatError::TruncatedPayload)?;
    if payload.len() < need {
        return Err(ImageFormatError::TruncatedPayload);
    }
    if payload.len() > need {
        return Err(ImageFormatError::TrailingBytes(payload.len() - need));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array::from_vec(&[h, w], data).expect("length checked"))
}

pub fn write_image(img: &Array, path: &Path) -> Result<(), DataError> {
    let bytes = encode_image(img).map_err(|e| DataError::Image { path: path.to_path_buf(), source: e })?;
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Array, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_image(&bytes).map_err(|e| DataError::Image { path: path.to_path_buf(), source: e })
}
