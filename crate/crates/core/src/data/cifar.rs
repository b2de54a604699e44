// SPDX-License-Identifier: Apache-2.0

//! CIFAR-10 binary batches: records of one label byte followed by 3072
//! pixel bytes, channel-planar (1024 red, 1024 green, 1024 blue).

use std::path::{Path, PathBuf};

use super::{read_file, Dataset};
use crate::error::{Error, Result};
use crate::net::FeatureShape;

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

fn parse(bytes: &[u8], path: &Path, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let rem = bytes.len() % CIFAR_RECORD_BYTES;
    if rem != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - rem) as u64,
            reason: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                bytes.len()
            ),
        });
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (r * CIFAR_RECORD_BYTES) as u64,
                reason: format!("label {label} outside 0..{CLASSES}"),
            });
        }
        labels.push(label);
        let planes = &rec[1..];
        for p in 0..1024 {
            for c in 0..3 {
                images.push(planes[c * 1024 + p] as f32 / 255.0);
            }
        }
    }
    Ok(())
}

/// Concatenates the records of every batch file, converted to 32×32×3 HWC.
pub fn load_cifar10(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let path: PathBuf = p.as_ref().to_path_buf();
        parse(&read_file(&path)?, &path, &mut images, &mut labels)?;
    }
    Dataset::new(FeatureShape::new(32, 32, 3), images, labels, CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn planar_to_hwc() {
        let bytes = record(3, |i| {
            if i == 0 {
                255
            } else if i == 1024 {
                51
            } else {
                0
            }
        });
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        parse(&bytes, Path::new("b"), &mut im, &mut lb).unwrap();
        assert_eq!(lb, vec![3]);
        assert_eq!(&im[..4], &[1.0, 0.2, 0.0, 0.0]);
        assert_eq!(im.len(), 3072);
    }

    #[test]
    fn rejects_bad_length_and_label() {
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        let mut bytes = record(1, |_| 0);
        bytes.extend(record(11, |_| 0));
        match parse(&bytes, Path::new("b"), &mut im, &mut lb) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
        bytes.truncate(4000);
        match parse(&bytes, Path::new("b"), &mut im, &mut lb) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
    }
}
