//! IDX (big-endian) image and label files.

use std::path::Path;

use super::{LabeledDataset, Shape};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    /// Pixels scaled to `[0, 1]`.
    pub images: Vec<Vec<f64>>,
}

fn read_u32(bytes: &[u8], offset: usize, origin: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(origin, offset as u64, "truncated header"))
}

pub fn parse_idx_images(bytes: &[u8], origin: &str) -> Result<IdxImages> {
    let magic = read_u32(bytes, 0, origin)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(origin, 0, format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4, origin)? as usize;
    let rows = read_u32(bytes, 8, origin)? as usize;
    let cols = read_u32(bytes, 12, origin)? as usize;
    let pixels = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(origin, 8, "image dimensions overflow"))?;
    if pixels == 0 && count > 0 {
        return Err(Error::format(origin, 8, "images have zero pixels"));
    }
    let body = &bytes[16..];
    let need = count
        .checked_mul(pixels)
        .ok_or_else(|| Error::format(origin, 4, "image count overflows"))?;
    if body.len() < need {
        return Err(Error::format(
            origin,
            bytes.len() as u64,
            format!("truncated: {count} images of {rows}x{cols} need {} bytes, file has {}", need + 16, bytes.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::format(origin, (16 + need) as u64, "trailing bytes after image data"));
    }
    let images = if count == 0 {
        Vec::new()
    } else {
        body.chunks_exact(pixels)
            .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
            .collect()
    };
    Ok(IdxImages { rows, cols, images })
}

pub fn parse_idx_labels(bytes: &[u8], origin: &str) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, origin)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(origin, 0, format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32(bytes, 4, origin)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::format(
            origin,
            bytes.len() as u64,
            format!("truncated: {count} labels need {} bytes, file has {}", count + 8, bytes.len()),
        ));
    }
    if body.len() > count {
        return Err(Error::format(origin, (8 + count) as u64, "trailing bytes after label data"));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an image/label pair. `num_classes` is the largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let ib = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lb = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let images = parse_idx_images(&ib, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&lb, &labels_path.display().to_string())?;
    if images.images.len() != labels.len() {
        return Err(Error::format(
            labels_path.display(),
            4,
            format!("count mismatch: {} images but {} labels", images.images.len(), labels.len()),
        ));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(
        images.images,
        labels,
        num_classes,
        Shape::Image {
            height: images.rows,
            width: images.cols,
            channels: 1,
        },
    )
}

/// Writes a single-channel image dataset; pixels are clipped and quantised to bytes.
pub fn save_idx(data: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols) = match data.shape {
        Shape::Image { height, width, channels: 1 } => (height, width),
        Shape::Flat { len } => (1, len),
        _ => return Err(Error::Shape("IDX output supports single-channel data only".into())),
    };
    if data.labels.iter().any(|&y| y > 255) {
        return Err(Error::Parameter("IDX labels must fit in a byte".into()));
    }
    let mut ib = Vec::with_capacity(16 + data.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    for s in &data.samples {
        ib.extend(s.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lb = Vec::with_capacity(8 + data.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lb.extend(data.labels.iter().map(|&y| y as u8));
    std::fs::write(images_path, ib).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lb).map_err(|e| Error::io(labels_path, e))
}
