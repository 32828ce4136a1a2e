//! IDX container reader (big-endian magic, dimension sizes, raw `u8` data).

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: need,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    let sizes: Vec<usize> = (1..=dims).map(|i| word(i) as usize).collect();
    let expected = need + sizes.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(sizes)
}

/// Images scaled to `[0, 1]` and flattened row-major; classes are
/// `max label + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read(images_path)?;
    let lab = read(labels_path)?;
    let dims = header(&img, images_path, IMAGES_MAGIC, 3)?;
    let ldims = header(&lab, labels_path, LABELS_MAGIC, 1)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    if count != ldims[0] {
        return Err(Error::CountMismatch {
            images: count,
            labels: ldims[0],
        });
    }
    let width = rows * cols;
    let features = img[16..16 + count * width]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = lab[8..8 + count].iter().map(|&b| usize::from(b)).collect();
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
    Ok(Dataset {
        features,
        labels,
        n_features: width,
        n_classes,
    })
}

/// Serializes images and labels in IDX layout; used to build fixtures.
pub fn encode_idx(
    images: &[Vec<u8>],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend(IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        img.extend((d as u32).to_be_bytes());
    }
    for im in images {
        img.extend(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend(LABELS_MAGIC.to_be_bytes());
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend(labels);
    (img, lab)
}
