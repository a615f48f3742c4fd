//! Dataset retrieval: downloads the canonical archives over HTTPS, verifies
//! checksums, and unpacks them into the data directory.
//!
//! Checksums are SHA-256 over the *decompressed payloads* — the exact bytes
//! the loaders read — so verification is independent of gzip metadata
//! (timestamps, original names) that differs between mirrors. Files already
//! present are verified and left alone, which also makes `fetch` a checker
//! for a pre-populated data directory.

use crate::error::{CliError, Result};
use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Read;
use std::path::Path;

/// Mirror hosting the four gzipped IDX files; the original host now sits
/// behind an interactive gate.
const MNIST_BASE: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";
const CIFAR_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";

const MNIST_FILES: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

/// The six binary batches inside `cifar-10-binary.tar.gz`.
const CIFAR_FILES: [(&str, &str); 6] = [
    ("data_batch_1.bin", "014e562d6e23c72197cc727519169a60359f5eccd8945ad5a09d710285ff4e48"),
    ("data_batch_2.bin", "bbe8596564c0f86427f876058170b84dac6670ddf06d79402899d93ceea26f67"),
    ("data_batch_3.bin", "a591ca11fa1708a91ee40f54b3da4784ccd871ecf2137de63f51ada8b3fa57ed"),
    ("data_batch_4.bin", "755304fc0b379caeae8c14f0dac912fbc7d6cd469eb67a1029a08a39453a9add"),
    ("data_batch_5.bin", "cee916563c9f80d84e3cc88e17fdc0941787f1244f00a67874d45b261883ada5"),
    ("test_batch.bin", "8e2eb146ae340b09e24670f29cabc6326dba54da8789dab6768acf480273f65b"),
];

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

fn verify(name: &str, bytes: &[u8], expected: &str) -> Result<()> {
    let got = sha256_hex(bytes);
    if got != expected {
        return Err(CliError::Data(format!(
            "checksum mismatch for {name}: expected {expected}, got {got}"
        )));
    }
    Ok(())
}

fn gunzip(name: &str, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| CliError::Data(format!("decompressing {name}: {e}")))?;
    Ok(out)
}

/// True when the file exists with the expected content.
fn present_and_verified(path: &Path, expected: &str) -> bool {
    fs::read(path).map(|bytes| sha256_hex(&bytes) == expected).unwrap_or(false)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let resp = ureq::get(url)
        .call()
        .map_err(|e| CliError::Data(format!("downloading {url}: {e}")))?;
    let mut bytes = Vec::new();
    resp.into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| CliError::Data(format!("reading {url}: {e}")))?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("creating {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("writing {}: {e}", path.display())))
}

/// Decompresses a gzipped payload, verifies it, and installs it at `dest`.
fn install_gz(name: &str, gz_bytes: &[u8], expected: &str, dest: &Path) -> Result<()> {
    let payload = gunzip(name, gz_bytes)?;
    verify(name, &payload, expected)?;
    write_file(dest, &payload)
}

/// Extracts the wanted files from a gzipped tar archive, verifying each
/// against its checksum; entries are matched by file name regardless of the
/// directory prefix inside the archive. Returns how many were installed and
/// fails if any wanted file is missing from the archive.
fn extract_tar_gz(
    archive_name: &str,
    tar_gz: &[u8],
    wanted: &[(&str, &str)],
    dest_dir: &Path,
) -> Result<usize> {
    let mut archive = tar::Archive::new(GzDecoder::new(tar_gz));
    let mut installed = vec![false; wanted.len()];
    let entries = archive
        .entries()
        .map_err(|e| CliError::Data(format!("reading {archive_name}: {e}")))?;
    for entry in entries {
        let mut entry =
            entry.map_err(|e| CliError::Data(format!("reading {archive_name}: {e}")))?;
        let path = entry
            .path()
            .map_err(|e| CliError::Data(format!("reading {archive_name}: {e}")))?
            .into_owned();
        let Some(file_name) = path.file_name().and_then(|n| n.to_str()).map(String::from) else {
            continue;
        };
        let Some(idx) = wanted.iter().position(|(name, _)| *name == file_name) else {
            continue;
        };
        let mut bytes = Vec::new();
        entry
            .read_to_end(&mut bytes)
            .map_err(|e| CliError::Data(format!("extracting {file_name}: {e}")))?;
        verify(&file_name, &bytes, wanted[idx].1)?;
        write_file(&dest_dir.join(&file_name), &bytes)?;
        installed[idx] = true;
    }
    if let Some(missing) = installed.iter().position(|done| !done) {
        return Err(CliError::Data(format!(
            "{archive_name} does not contain {}",
            wanted[missing].0
        )));
    }
    Ok(installed.len())
}

fn fetch_mnist(root: &Path) -> Result<()> {
    let dir = crate::dataset::dataset_dir("mnist", root);
    for (name, expected) in MNIST_FILES {
        let dest = dir.join(name);
        if present_and_verified(&dest, expected) {
            println!("{}: verified (cached)", dest.display());
            continue;
        }
        let url = format!("{MNIST_BASE}/{name}.gz");
        println!("downloading {url}");
        let gz = download(&url)?;
        install_gz(name, &gz, expected, &dest)?;
        println!("{}: verified", dest.display());
    }
    Ok(())
}

fn fetch_cifar(root: &Path) -> Result<()> {
    let dir = crate::dataset::dataset_dir("cifar10", root);
    if CIFAR_FILES.iter().all(|(name, exp)| present_and_verified(&dir.join(name), exp)) {
        println!("{}: all {} batches verified (cached)", dir.display(), CIFAR_FILES.len());
        return Ok(());
    }
    println!("downloading {CIFAR_URL}");
    let tar_gz = download(CIFAR_URL)?;
    let n = extract_tar_gz("cifar-10-binary.tar.gz", &tar_gz, &CIFAR_FILES, &dir)?;
    println!("{}: {} batches verified", dir.display(), n);
    Ok(())
}

/// `fetch`: downloads and verifies the dataset named in the config.
pub fn run_fetch(dataset: &str, data_dir: &str) -> Result<()> {
    let root = Path::new(data_dir);
    match dataset {
        "mnist" => fetch_mnist(root),
        "cifar10" => fetch_cifar(root),
        other => Err(CliError::Config(format!(
            "unknown dataset `{other}` (expected `mnist` or `cifar10`)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn gz(bytes: &[u8]) -> Vec<u8> {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).unwrap();
        enc.finish().unwrap()
    }

    fn tmp_dir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("wcq-fetch-tests").join(name);
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn install_gz_round_trips_and_checks_payload_hash() {
        let dir = tmp_dir("gz");
        let payload = b"idx payload bytes";
        let expected = sha256_hex(payload);
        let dest = dir.join("payload.bin");
        install_gz("payload", &gz(payload), &expected, &dest).unwrap();
        assert_eq!(fs::read(&dest).unwrap(), payload);

        // same archive against a different expectation must fail and the
        // error must carry both hashes
        let err = install_gz("payload", &gz(payload), &"0".repeat(64), &dest).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains(&expected));
    }

    #[test]
    fn corrupted_gzip_is_a_data_error() {
        let dir = tmp_dir("gz-corrupt");
        let mut bad = gz(b"payload");
        let tail = bad.len() - 1;
        bad[tail] ^= 0xff;
        let err =
            install_gz("payload", &bad, &sha256_hex(b"payload"), &dir.join("x.bin")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    fn tar_gz_of(entries: &[(&str, &[u8])]) -> Vec<u8> {
        let mut builder = tar::Builder::new(GzEncoder::new(Vec::new(), Compression::default()));
        for (path, bytes) in entries {
            let mut header = tar::Header::new_gnu();
            header.set_size(bytes.len() as u64);
            header.set_mode(0o644);
            header.set_cksum();
            builder.append_data(&mut header, path, *bytes).unwrap();
        }
        builder.into_inner().unwrap().finish().unwrap()
    }

    #[test]
    fn tar_extraction_matches_by_file_name_and_verifies() {
        let dir = tmp_dir("tar");
        let a = b"batch one".as_slice();
        let b = b"batch two".as_slice();
        let archive = tar_gz_of(&[
            ("nested/dir/a.bin", a),
            ("nested/readme.txt", b"ignored"),
            ("b.bin", b),
        ]);
        let wanted = [("a.bin", sha256_hex(a)), ("b.bin", sha256_hex(b))];
        let wanted_refs: Vec<(&str, &str)> =
            wanted.iter().map(|(n, h)| (*n, h.as_str())).collect();
        let n = extract_tar_gz("test.tar.gz", &archive, &wanted_refs, &dir).unwrap();
        assert_eq!(n, 2);
        assert_eq!(fs::read(dir.join("a.bin")).unwrap(), a);
        assert_eq!(fs::read(dir.join("b.bin")).unwrap(), b);
        // no stray files installed
        assert!(!dir.join("readme.txt").exists());
    }

    #[test]
    fn tar_missing_wanted_file_is_an_error() {
        let dir = tmp_dir("tar-missing");
        let archive = tar_gz_of(&[("a.bin", b"present".as_slice())]);
        let wanted = [("a.bin", sha256_hex(b"present")), ("b.bin", "0".repeat(64))];
        let wanted_refs: Vec<(&str, &str)> =
            wanted.iter().map(|(n, h)| (*n, h.as_str())).collect();
        let err = extract_tar_gz("test.tar.gz", &archive, &wanted_refs, &dir).unwrap_err();
        assert!(err.to_string().contains("b.bin"));
    }

    #[test]
    fn tar_checksum_mismatch_rejects_the_archive() {
        let dir = tmp_dir("tar-bad-hash");
        let archive = tar_gz_of(&[("a.bin", b"tampered".as_slice())]);
        let wanted = [("a.bin", sha256_hex(b"original"))];
        let wanted_refs: Vec<(&str, &str)> =
            wanted.iter().map(|(n, h)| (*n, h.as_str())).collect();
        let err = extract_tar_gz("test.tar.gz", &archive, &wanted_refs, &dir).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn cached_files_verify_without_any_network() {
        let dir = tmp_dir("cache");
        let payload = b"cached dataset file";
        let expected = sha256_hex(payload);
        let path = dir.join("file.bin");
        fs::write(&path, payload).unwrap();
        assert!(present_and_verified(&path, &expected));
        fs::write(&path, b"altered").unwrap();
        assert!(!present_and_verified(&path, &expected));
        assert!(!present_and_verified(&dir.join("absent.bin"), &expected));
    }
}
