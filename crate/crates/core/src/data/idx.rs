//! IDX container format (as used by MNIST and its derivatives).
//!
//! Layout: two zero bytes, a type byte (only `0x08`, unsigned byte, is
//! supported), a dimension count, then one big-endian `u32` per dimension,
//! then the data in row-major order.

use std::io::Write;
use std::path::Path;

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses an unsigned-byte IDX array.
pub fn read_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(0, "magic number must start with two zero bytes"));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(2, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format_err(bytes.len(), format!("truncated header ({ndims} dimensions)")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let available = bytes.len() - header;
    if available < count {
        return Err(format_err(
            bytes.len(),
            format!("truncated data: header promises {count} bytes, found {available}"),
        ));
    }
    if available > count {
        return Err(format_err(header + count, "trailing bytes after data"));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn magic(bytes: &[u8]) -> Option<u32> {
    bytes
        .get(..4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Loads an image file as a `[n, 1, rows, cols]` tensor scaled to `[0, 1]`.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = read_file(path.as_ref())?;
    if magic(&bytes) != Some(IMAGES_MAGIC) {
        return Err(format_err(0, format!("bad image magic {:?}", magic(&bytes))));
    }
    let arr = read_idx(&bytes)?;
    let [n, rows, cols] = arr.dims[..] else {
        unreachable!("magic fixes three dimensions")
    };
    let data = arr.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_file(path)?;
    if magic(&bytes) != Some(LABELS_MAGIC) {
        return Err(format_err(0, format!("bad label magic {:?}", magic(&bytes))));
    }
    Ok(read_idx(&bytes)?.data.iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST-style image/label file pair.
///
/// The class count is one more than the largest label present.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: Split,
) -> Result<LabeledDataset> {
    let inputs = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path.as_ref())?;
    if labels.len() != inputs.batch_len() {
        return Err(format_err(
            4,
            format!(
                "label count {} does not match image count {}",
                labels.len(),
                inputs.batch_len()
            ),
        ));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(inputs, labels, num_classes, split)
}

/// Writes an unsigned-byte IDX array.
pub fn write_idx(path: impl AsRef<Path>, dims: &[usize], data: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if dims.iter().product::<usize>() != data.len() || dims.len() > 255 {
        return Err(Error::invalid("dimensions do not match data length"));
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.extend_from_slice(&[0, 0, 0x08, dims.len() as u8]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent header decoder used as the oracle for label checks.
    fn oracle_labels(bytes: &[u8]) -> Vec<u8> {
        let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
        bytes[8..8 + n].to_vec()
    }

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let imgs: Vec<u8> = (0..3 * 4 * 5).map(|v| (v * 4) as u8).collect();
        let labels = vec![5u8, 0, 4];
        let ip = dir.join("imgs-idx3-ubyte");
        let lp = dir.join("labels-idx1-ubyte");
        write_idx(&ip, &[3, 4, 5], &imgs).unwrap();
        write_idx(&lp, &[3], &labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        let ds = load_mnist_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.inputs.shape(), &[3, 1, 4, 5]);
        assert_eq!(ds.labels, vec![5, 0, 4]);
        assert_eq!(ds.num_classes, 6);
        assert!(ds.inputs.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds.inputs.data()[1], 4.0 / 255.0);
        let raw = std::fs::read(&lp).unwrap();
        assert_eq!(oracle_labels(&raw)[0] as usize, ds.labels[0]);
    }

    #[test]
    fn header_magic_values() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        assert_eq!(&std::fs::read(ip).unwrap()[..4], &[0, 0, 8, 3]);
        assert_eq!(&std::fs::read(lp).unwrap()[..4], &[0, 0, 8, 1]);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, _) = fixture(dir.path());
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 7]).unwrap();
        match load_idx_images(&ip) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 7),
            other => panic!("expected format error, got {other:?}"),
        }
        match read_idx(&bytes[..10]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path());
        assert!(matches!(load_idx_images(&lp), Err(Error::Format { offset: 0, .. })));
        write_idx(&lp, &[2], &[1, 2]).unwrap();
        assert!(matches!(
            load_mnist_idx(&ip, &lp, Split::Train),
            Err(Error::Format { .. })
        ));
        assert!(read_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0]).is_err());
    }
}
