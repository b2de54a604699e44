// SPDX-License-Identifier: Apache-2.0

//! IDX files (MNIST distribution format): a big-endian magic number whose
//! low byte is the rank, big-endian `u32` dimensions, then unsigned bytes.

use std::path::{Path, PathBuf};

use super::{read_file, Dataset};
use crate::error::{Error, Result};
use crate::net::FeatureShape;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format(path, bytes.len(), "truncated header"))
}

/// Checks magic and returns the dimensions and the payload.
fn parse<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format(
            path,
            0,
            format!("magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let want = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| format(path, 4, "dimensions overflow"))?;
    if bytes.len() < want {
        return Err(format(
            path,
            bytes.len(),
            format!("truncated: {} bytes, header announces {want}", bytes.len()),
        ));
    }
    if bytes.len() > want {
        return Err(format(
            path,
            want,
            "trailing bytes after the announced data",
        ));
    }
    Ok((dims, &bytes[start..]))
}

/// Parses an IDX image file into `(count, height, width, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let (dims, data) = parse(bytes, IMAGES_MAGIC, path)?;
    let pixels = data.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((dims[0], dims[1], dims[2], pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let (_, data) = parse(bytes, LABELS_MAGIC, path)?;
    Ok(data.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image file and its label file. The class count is
/// `max(label) + 1`.
pub fn load_idx(
    images_path: impl Into<PathBuf>,
    labels_path: impl Into<PathBuf>,
) -> Result<Dataset> {
    let (ip, lp) = (images_path.into(), labels_path.into());
    let (n, h, w, pixels) = parse_idx_images(&read_file(&ip)?, &ip)?;
    let labels = parse_idx_labels(&read_file(&lp)?, &lp)?;
    if labels.len() != n {
        return Err(format(
            &lp,
            4,
            format!("{} labels for {n} images in {}", labels.len(), ip.display()),
        ));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(FeatureShape::new(h, w, 1), pixels, labels, classes)
}
