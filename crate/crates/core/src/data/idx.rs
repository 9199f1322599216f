//! Reader for the IDX binary layout (big-endian headers, one byte per pixel/label).

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Examples grouped by class; pixel values scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPools {
    pub pools: Vec<Array2<f64>>,
    pub dim: usize,
}

impl ClassPools {
    pub fn counts(&self) -> Vec<usize> {
        self.pools.iter().map(Array2::nrows).collect()
    }

    /// Moves a random `fraction` of every class into a second set of pools.
    pub fn split_holdout<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!(
                "holdout fraction {fraction} outside [0, 1)"
            )));
        }
        let mut keep = Vec::new();
        let mut held = Vec::new();
        for pool in &self.pools {
            let mut idx: Vec<usize> = (0..pool.nrows()).collect();
            idx.shuffle(rng);
            let n_held = (pool.nrows() as f64 * fraction).round() as usize;
            let (h, k) = idx.split_at(n_held);
            held.push(pool.select(ndarray::Axis(0), h));
            keep.push(pool.select(ndarray::Axis(0), k));
        }
        Ok((
            Self { pools: keep, dim: self.dim },
            Self { pools: held, dim: self.dim },
        ))
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxFormat {
            offset: offset as u64,
            message: "file ends inside the header".into(),
        })
}

/// Parses in-memory image and label files into per-class pools.
pub fn parse_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<ClassPools> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let magic = read_u32(images, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::IdxFormat {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let count = read_u32(images, 4)? as usize;
    let rows = read_u32(images, 8)? as usize;
    let cols = read_u32(images, 12)? as usize;
    let dim = rows * cols;
    if dim == 0 {
        return Err(Error::IdxFormat {
            offset: 8,
            message: "image has zero pixels".into(),
        });
    }
    let pixels = &images[16..];
    if pixels.len() < count * dim {
        return Err(Error::IdxFormat {
            offset: (16 + pixels.len()) as u64,
            message: format!("truncated: header promises {count} images of {dim} bytes"),
        });
    }

    let magic = read_u32(labels, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::IdxFormat {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let label_count = read_u32(labels, 4)? as usize;
    if label_count != count {
        return Err(Error::IdxFormat {
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < count {
        return Err(Error::IdxFormat {
            offset: (8 + label_bytes.len()) as u64,
            message: format!("truncated: header promises {count} labels"),
        });
    }

    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in label_bytes[..count].iter().enumerate() {
        let y = y as usize;
        if y >= classes {
            return Err(Error::IdxFormat {
                offset: (8 + i) as u64,
                message: format!("label {y} outside 0..{classes}"),
            });
        }
        per_class[y].push(i);
    }
    let pools = per_class
        .iter()
        .map(|rows_of_class| {
            Array2::from_shape_fn((rows_of_class.len(), dim), |(r, j)| {
                pixels[rows_of_class[r] * dim + j] as f64 / 255.0
            })
        })
        .collect();
    Ok(ClassPools { pools, dim })
}

/// Reads an image file and a label file from disk.
pub fn load_idx_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    classes: usize,
) -> Result<ClassPools> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels, classes)
}

/// Encodes images (bytes, row-major) and labels as IDX files. Handy for fixtures.
pub fn encode_idx(rows: u32, cols: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}
