//! IDX (MNIST-style) image and label files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::dataset::DatasetHandle;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("IDX header truncated reading {what}")))
}

/// Parses an image file into `(rows, cols, pixels)` with one byte per pixel.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("IDX image file has a zero extent".into()));
    }
    let body = &bytes[16..];
    let expected = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("IDX image dimensions overflow".into()))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "IDX image body has {} bytes, header implies {expected}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "IDX label body has {} bytes, header says {n}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Builds a dataset from parsed IDX bytes. Pixels keep their raw 0..=255
/// values; normalization is applied separately.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<DatasetHandle> {
    let (n, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let data = pixels.into_iter().map(f32::from).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], data)?;
    DatasetHandle::new(
        images,
        labels.into_iter().map(usize::from).collect(),
        classes,
    )
    .map_err(|e| Error::Format(format!("IDX labels: {e}")))
}

pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<DatasetHandle> {
    let i = std::fs::read(images)?;
    let l = std::fs::read(labels)?;
    dataset_from_idx(&i, &l, classes)
}

/// Encodes images (`[N, 1, H, W]`, values already in 0..=255) and labels
/// as IDX bytes.
pub fn encode_idx(
    images: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(images);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}
