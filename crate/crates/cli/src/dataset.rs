//! Dataset file parsing.
//!
//! Both supported datasets are read from their canonical binary layouts:
//!
//! * the 28×28 grayscale digit set as IDX files (big-endian magic + dims,
//!   then raw bytes),
//! * the 32×32 color set as five training batches plus one test batch of
//!   3073-byte records (label byte, then R/G/B planes).
//!
//! Every structural assumption is checked and reported with enough context
//! to identify the offending file; a short or oversized file is an error,
//! never a truncated dataset.

use crate::error::{CliError, Result};
use std::fs;
use std::path::{Path, PathBuf};
use wcq_core::data::{cifar10_normalization, mnist_normalization, Dataset};

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], off: usize, file: &Path) -> Result<u32> {
    bytes
        .get(off..off + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| CliError::Data(format!("{}: truncated header", file.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Parses an IDX image file into `(rows, cols, pixels)`.
fn parse_idx_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(CliError::Data(format!(
            "{}: magic {magic}, expected {IDX_IMAGES_MAGIC} (image file)",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(CliError::Data(format!(
            "{}: {} bytes for {n} images of {rows}×{cols} (expected {expected})",
            path.display(),
            bytes.len()
        )));
    }
    Ok((rows, cols, bytes[16..].to_vec()))
}

/// Parses an IDX label file.
fn parse_idx_labels(path: &Path, num_classes: usize) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(CliError::Data(format!(
            "{}: magic {magic}, expected {IDX_LABELS_MAGIC} (label file)",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(CliError::Data(format!(
            "{}: {} bytes for {n} labels (expected {})",
            path.display(),
            bytes.len(),
            8 + n
        )));
    }
    let labels = bytes[8..].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(CliError::Data(format!(
            "{}: label {bad} out of range 0..{num_classes}",
            path.display()
        )));
    }
    Ok(labels)
}

fn idx_pair(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let (rows, cols, pixels) = parse_idx_images(&dir.join(images))?;
    if (rows, cols) != (28, 28) {
        return Err(CliError::Data(format!(
            "{}: {rows}×{cols} images, expected 28×28",
            dir.join(images).display()
        )));
    }
    let lab = parse_idx_labels(&dir.join(labels), 10)?;
    if pixels.len() != lab.len() * rows * cols {
        return Err(CliError::Data(format!(
            "{}: {} images but {} labels",
            dir.display(),
            pixels.len() / (rows * cols),
            lab.len()
        )));
    }
    let (mean, std) = mnist_normalization();
    Dataset::new("mnist", 1, rows, cols, pixels, lab, mean, std).map_err(CliError::from)
}

/// Loads the digit dataset: `(train, test)`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = idx_pair(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = idx_pair(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((train, test))
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_RECORDS_PER_BATCH: usize = 10_000;

fn parse_cifar_batch(path: &Path, images: &mut Vec<u8>, labels: &mut Vec<u8>) -> Result<()> {
    let bytes = read_file(path)?;
    let expected = CIFAR_RECORD * CIFAR_RECORDS_PER_BATCH;
    if bytes.len() != expected {
        return Err(CliError::Data(format!(
            "{}: {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(CliError::Data(format!(
                "{}: record {i} has label {} (want 0..10)",
                path.display(),
                rec[0]
            )));
        }
        labels.push(rec[0]);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Loads the color dataset: `(train, test)`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (mean, std) = cifar10_normalization();
    let mut images = Vec::with_capacity(5 * CIFAR_RECORDS_PER_BATCH * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(5 * CIFAR_RECORDS_PER_BATCH);
    for i in 1..=5 {
        parse_cifar_batch(&dir.join(format!("data_batch_{i}.bin")), &mut images, &mut labels)?;
    }
    let train =
        Dataset::new("cifar10", 3, 32, 32, images, labels, mean.clone(), std.clone())?;
    let mut images = Vec::with_capacity(CIFAR_RECORDS_PER_BATCH * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(CIFAR_RECORDS_PER_BATCH);
    parse_cifar_batch(&dir.join("test_batch.bin"), &mut images, &mut labels)?;
    let test = Dataset::new("cifar10", 3, 32, 32, images, labels, mean, std)?;
    Ok((train, test))
}

/// Resolves dataset directories under a root: the digit set lives in
/// `<root>/mnist`, the color set in `<root>/cifar-10-batches-bin`.
pub fn load_by_name(name: &str, root: &Path) -> Result<(Dataset, Dataset)> {
    match name {
        "mnist" => load_mnist(&root.join("mnist")),
        "cifar10" => load_cifar10(&root.join("cifar-10-batches-bin")),
        other => Err(CliError::Config(format!(
            "unknown dataset `{other}` (expected `mnist` or `cifar10`)"
        ))),
    }
}

/// Directory a dataset is expected in, for error messages and fetch.
pub fn dataset_dir(name: &str, root: &Path) -> PathBuf {
    match name {
        "cifar10" => root.join("cifar-10-batches-bin"),
        _ => root.join(name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("wcq-dataset-tests").join(name);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_idx_images(path: &Path, n: usize, fill: u8) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2051u32.to_be_bytes());
        bytes.extend_from_slice(&(n as u32).to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.resize(16 + n * 784, fill);
        std::fs::write(path, bytes).unwrap();
    }

    fn write_idx_labels(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2049u32.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn well_formed_idx_files_load() {
        let dir = tmpdir("idx-ok");
        write_idx_images(&dir.join("train-images-idx3-ubyte"), 4, 100);
        write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &[0, 1, 2, 3]);
        write_idx_images(&dir.join("t10k-images-idx3-ubyte"), 2, 50);
        write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &[9, 5]);
        let (train, test) = load_mnist(&dir).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
        assert_eq!(test.label(0), 9);
        assert_eq!(train.image_bytes(3)[0], 100);
    }

    #[test]
    fn wrong_magic_is_reported_with_the_file_name() {
        let dir = tmpdir("idx-magic");
        write_idx_labels(&dir.join("train-images-idx3-ubyte"), &[0]); // labels magic in image slot
        write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &[0]);
        let err = load_mnist(&dir).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("magic 2049"), "{msg}");
        assert!(msg.contains("train-images-idx3-ubyte"), "{msg}");
    }

    #[test]
    fn truncated_image_payload_is_rejected() {
        let dir = tmpdir("idx-short");
        write_idx_images(&dir.join("train-images-idx3-ubyte"), 4, 0);
        let full = std::fs::read(dir.join("train-images-idx3-ubyte")).unwrap();
        std::fs::write(dir.join("train-images-idx3-ubyte"), &full[..full.len() - 10]).unwrap();
        write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &[0, 1, 2, 3]);
        let err = load_mnist(&dir).unwrap_err();
        assert!(err.to_string().contains("expected"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let dir = tmpdir("idx-label");
        write_idx_images(&dir.join("train-images-idx3-ubyte"), 2, 0);
        write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &[3, 10]);
        let err = load_mnist(&dir).unwrap_err();
        assert!(err.to_string().contains("label 10"), "{err}");
    }

    #[test]
    fn count_mismatch_between_images_and_labels_is_rejected() {
        let dir = tmpdir("idx-count");
        write_idx_images(&dir.join("train-images-idx3-ubyte"), 3, 0);
        write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &[0, 1]);
        assert!(load_mnist(&dir).is_err());
    }

    #[test]
    fn color_batches_load_and_validate() {
        let dir = tmpdir("cifar-ok");
        let mut batch = Vec::new();
        for r in 0..CIFAR_RECORDS_PER_BATCH {
            batch.push((r % 10) as u8);
            batch.extend(std::iter::repeat_n((r % 251) as u8, 3072));
        }
        for i in 1..=5 {
            std::fs::write(dir.join(format!("data_batch_{i}.bin")), &batch).unwrap();
        }
        std::fs::write(dir.join("test_batch.bin"), &batch).unwrap();
        let (train, test) = load_cifar10(&dir).unwrap();
        assert_eq!(train.len(), 50_000);
        assert_eq!(test.len(), 10_000);
        assert_eq!(train.label(7), 7);
        assert_eq!(test.image_bytes(3)[0], 3);
    }

    #[test]
    fn color_batch_with_bad_size_or_label_is_rejected() {
        let dir = tmpdir("cifar-bad");
        std::fs::write(dir.join("data_batch_1.bin"), vec![0u8; 100]).unwrap();
        let err = load_cifar10(&dir).unwrap_err();
        assert!(err.to_string().contains("100 bytes"), "{err}");

        let mut batch = vec![0u8; CIFAR_RECORD * CIFAR_RECORDS_PER_BATCH];
        batch[0] = 11; // first record label out of range
        for i in 1..=5 {
            std::fs::write(dir.join(format!("data_batch_{i}.bin")), &batch).unwrap();
        }
        let err = load_cifar10(&dir).unwrap_err();
        assert!(err.to_string().contains("label 11"), "{err}");
    }

    #[test]
    fn unknown_dataset_name_is_a_config_error() {
        let err = load_by_name("imagenet", Path::new("/nonexistent")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
