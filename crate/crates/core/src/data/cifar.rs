//! CIFAR-10 binary format: records of one label byte followed by 3072 pixel
//! bytes (red, green, blue planes, each 32x32 row-major).

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const CIFAR10_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;

/// Decodes one CIFAR-10 binary file. Pixels are scaled to `[0, 1]`.
pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn decode(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.is_empty() {
        log::warn!("{}: empty CIFAR-10 file", path.display());
    }
    if bytes.len() % CIFAR10_RECORD_LEN != 0 {
        let offset = (bytes.len() / CIFAR10_RECORD_LEN * CIFAR10_RECORD_LEN) as u64;
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset,
            reason: format!(
                "truncated record: {} of {CIFAR10_RECORD_LEN} bytes",
                bytes.len() as u64 - offset
            ),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD_LEN;
    let mut images = Vec::with_capacity(n * (CIFAR10_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (i * CIFAR10_RECORD_LEN) as u64,
                reason: format!("label {label} is not below {CLASSES}"),
            });
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(3, 32, 32, CLASSES, images, labels)
}

/// Encodes one record; `pixels` holds 3072 bytes in file order.
pub fn encode_cifar10_record(label: u8, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), CIFAR10_RECORD_LEN - 1);
    let mut rec = Vec::with_capacity(CIFAR10_RECORD_LEN);
    rec.push(label);
    rec.extend_from_slice(pixels);
    rec
}
