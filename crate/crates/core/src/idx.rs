//! Reader and writer for the IDX container used by MNIST.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::TruncatedFile(format!(
                    "{}: wanted {n} bytes at offset {}, file has {}",
                    self.what,
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

/// Decodes an image file held in memory; pixels are scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        what: "idx images",
    };
    let magic = cur.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let count = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let pixels = cur.take(count * rows * cols)?;
    Ok(pixels
        .chunks_exact(rows * cols)
        .map(|img| Matrix::from_fn(rows, cols, |i, j| f64::from(img[i * cols + j]) / 255.0))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        what: "idx labels",
    };
    let magic = cur.u32()?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let count = cur.u32()? as usize;
    Ok(cur.take(count)?.to_vec())
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<Matrix>> {
    parse_idx_images(&read(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    parse_idx_labels(&read(path.as_ref())?)
}

/// Encodes images (values in [0, 1], rounded to the nearest byte).
pub fn encode_idx_images(images: &[Matrix]) -> Result<Vec<u8>> {
    let (rows, cols) = images.first().map(Matrix::shape).unwrap_or((0, 0));
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        if img.shape() != (rows, cols) {
            return Err(crate::error::shape(
                "images in one idx file must share a shape",
            ));
        }
        out.extend(
            img.as_slice()
                .iter()
                .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
