//! The IDX binary container used by the MNIST digit files: big-endian magic
//! (0x00000803 for images, 0x00000801 for labels), dimension sizes, then raw
//! bytes.

use super::pnm::Image;
use super::DataError;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, message: impl Into<String>) -> DataError {
    DataError::Format { path: path.display().to_string(), message: message.into() }
}

fn read_u32_be(bytes: &[u8], pos: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(pos..pos + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, "truncated header"))
}

pub fn read_idx_images(path: &Path) -> Result<Vec<Image>, DataError> {
    let bytes = fs::read(path).map_err(DataError::Io)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(path, format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32_be(&bytes, 4, path)? as usize;
    let rows = read_u32_be(&bytes, 8, path)? as usize;
    let cols = read_u32_be(&bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(format_err(path, format!("truncated: need {expected} bytes, have {}", bytes.len())));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        images.push(Image {
            width: cols,
            height: rows,
            channels: 1,
            pixels: bytes[start..start + rows * cols].to_vec(),
        });
    }
    Ok(images)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = fs::read(path).map_err(DataError::Io)?;
    let magic = read_u32_be(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(path, format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32_be(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + count {
        return Err(format_err(path, "truncated label data"));
    }
    Ok(bytes[8..8 + count].to_vec())
}

/// Reads paired image/label files and checks that the counts agree.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<(Image, u8)>, DataError> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(format_err(
            images_path,
            format!("{} images but {} labels", images.len(), labels.len()),
        ));
    }
    Ok(images.into_iter().zip(labels).collect())
}

pub fn write_idx_images(path: &Path, images: &[Image]) -> Result<(), DataError> {
    let (rows, cols) = images.first().map_or((0, 0), |i| (i.height, i.width));
    let mut f = fs::File::create(path).map_err(DataError::Io)?;
    let mut out = Vec::new();
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        assert_eq!(img.channels, 1, "IDX stores grayscale images");
        assert_eq!((img.height, img.width), (rows, cols), "uniform dimensions");
        out.extend_from_slice(&img.pixels);
    }
    f.write_all(&out).map_err(DataError::Io)
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(DataError::Io)?;
    let mut out = Vec::new();
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    f.write_all(&out).map_err(DataError::Io)
}
