//! Binary container for trained networks and perturbation tensors.
//!
//! Layout: a little-endian `u32` JSON-header length, the JSON header itself,
//! then the raw payload — every tensor's values as little-endian `f64` in the
//! order the header declares them. Values round-trip bit-identically.
//!
//! Two kinds share the container: `"weights"` (full network: parameters,
//! activation ranges, norm running statistics) and `"perturbation"` (the
//! per-weight additive deltas found by an attack, with the bound they were
//! searched under).

use crate::error::{Error, Result};
use crate::model::{self, Network};
use crate::quant::QuantConfig;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const FORMAT_VERSION: u32 = 1;
/// Sanity cap: no header we write is remotely close to this.
const MAX_HEADER_BYTES: u32 = 16 * 1024 * 1024;

#[derive(Debug, Serialize, Deserialize)]
struct TensorDecl {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormStatsDecl {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    arch: String,
    quant: QuantConfig,
    /// Smoothed activation ranges per quantization site (weights kind).
    #[serde(default)]
    act_ranges: Vec<Option<f64>>,
    /// Batch-norm running statistics (weights kind).
    #[serde(default)]
    norm_stats: Vec<NormStatsDecl>,
    /// Perturbation bound the deltas were searched under (perturbation kind).
    #[serde(default)]
    th_g: Option<f64>,
    tensors: Vec<TensorDecl>,
}

/// Metadata of a loaded perturbation file.
#[derive(Debug, Clone)]
pub struct PerturbationMeta {
    pub arch: String,
    pub th_g: f64,
    pub names: Vec<String>,
}

fn write_container(path: &Path, header: &Header, payloads: &[&[f64]]) -> Result<()> {
    let json = serde_json::to_vec(header)
        .map_err(|e| Error::BadCheckpoint(format!("header serialization: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for p in payloads {
        for v in *p {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<Tensor>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)
        .map_err(|_| Error::BadCheckpoint("file too short for header length".into()))?;
    let hlen = u32::from_le_bytes(len_buf);
    if hlen == 0 || hlen > MAX_HEADER_BYTES {
        return Err(Error::BadCheckpoint(format!("implausible header length {hlen}")));
    }
    let mut hbuf = vec![0u8; hlen as usize];
    r.read_exact(&mut hbuf)
        .map_err(|_| Error::BadCheckpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::BadCheckpoint(format!("header parse: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "format version {} (this build reads {})",
            header.format_version, FORMAT_VERSION
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for decl in &header.tensors {
        let n: usize = decl.shape.iter().product();
        if n == 0 || decl.shape.is_empty() {
            return Err(Error::BadCheckpoint(format!("tensor `{}` has empty shape", decl.name)));
        }
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::BadCheckpoint(format!("payload truncated at tensor `{}`", decl.name))
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push(
            Tensor::new(decl.shape.clone(), data)
                .map_err(|e| Error::BadCheckpoint(format!("tensor `{}`: {e}", decl.name)))?,
        );
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::BadCheckpoint("trailing bytes after declared payload".into()));
    }
    Ok((header, tensors))
}

/// Writes a full network (parameters, activation ranges, norm statistics).
pub fn save_network(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "weights".into(),
        arch: net.arch.clone(),
        quant: net.quant,
        act_ranges: net.act_observers.iter().map(|o| o.value).collect(),
        norm_stats: net
            .norm_stats
            .iter()
            .map(|s| NormStatsDecl { mean: s.mean.clone(), var: s.var.clone() })
            .collect(),
        th_g: None,
        tensors: net
            .params
            .iter()
            .map(|p| TensorDecl { name: p.name.clone(), shape: p.data.shape().to_vec() })
            .collect(),
    };
    let payloads: Vec<&[f64]> = net.params.iter().map(|p| p.data.data()).collect();
    write_container(path.as_ref(), &header, &payloads)
}

/// Reads a network saved by [`save_network`]. The architecture is rebuilt
/// from its name and every stored tensor must match it by name and shape.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let (header, tensors) = read_container(path.as_ref())?;
    if header.kind != "weights" {
        return Err(Error::BadCheckpoint(format!(
            "kind `{}`, expected `weights`",
            header.kind
        )));
    }
    let mut net = model::by_name(&header.arch, header.quant)
        .map_err(|e| Error::BadCheckpoint(format!("{e}")))?;
    if header.tensors.len() != net.params.len() {
        return Err(Error::BadCheckpoint(format!(
            "{} tensors for {} parameters of `{}`",
            header.tensors.len(),
            net.params.len(),
            header.arch
        )));
    }
    for ((decl, tensor), param) in header.tensors.iter().zip(tensors).zip(net.params.iter_mut()) {
        if decl.name != param.name || tensor.shape() != param.data.shape() {
            return Err(Error::BadCheckpoint(format!(
                "tensor `{}` {:?} does not match parameter `{}` {:?}",
                decl.name,
                tensor.shape(),
                param.name,
                param.data.shape()
            )));
        }
        param.data = tensor;
    }
    if header.norm_stats.len() != net.norm_stats.len() {
        return Err(Error::BadCheckpoint(format!(
            "{} norm statistics for {} norm layers",
            header.norm_stats.len(),
            net.norm_stats.len()
        )));
    }
    for (decl, stats) in header.norm_stats.iter().zip(net.norm_stats.iter_mut()) {
        if decl.mean.len() != stats.mean.len() || decl.var.len() != stats.var.len() {
            return Err(Error::BadCheckpoint("norm statistics channel mismatch".into()));
        }
        stats.mean = decl.mean.clone();
        stats.var = decl.var.clone();
    }
    if header.act_ranges.len() != net.act_observers.len() {
        return Err(Error::BadCheckpoint(format!(
            "{} activation ranges for {} quantization sites",
            header.act_ranges.len(),
            net.act_observers.len()
        )));
    }
    for (value, obs) in header.act_ranges.iter().zip(net.act_observers.iter_mut()) {
        obs.value = *value;
    }
    Ok(net)
}

/// Writes perturbation deltas found for the named architecture.
pub fn save_perturbation(
    path: impl AsRef<Path>,
    net: &Network,
    deltas: &[Tensor],
    th_g: f64,
) -> Result<()> {
    let widx = net.weight_param_indices();
    if deltas.len() != widx.len() {
        return Err(Error::InvalidArgument(format!(
            "{} deltas for {} weight parameters",
            deltas.len(),
            widx.len()
        )));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: "perturbation".into(),
        arch: net.arch.clone(),
        quant: net.quant,
        act_ranges: Vec::new(),
        norm_stats: Vec::new(),
        th_g: Some(th_g),
        tensors: widx
            .iter()
            .zip(deltas)
            .map(|(&i, d)| TensorDecl {
                name: net.params[i].name.clone(),
                shape: d.shape().to_vec(),
            })
            .collect(),
    };
    let payloads: Vec<&[f64]> = deltas.iter().map(|d| d.data()).collect();
    write_container(path.as_ref(), &header, &payloads)
}

/// Reads perturbation deltas saved by [`save_perturbation`].
pub fn load_perturbation(path: impl AsRef<Path>) -> Result<(Vec<Tensor>, PerturbationMeta)> {
    let (header, tensors) = read_container(path.as_ref())?;
    if header.kind != "perturbation" {
        return Err(Error::BadCheckpoint(format!(
            "kind `{}`, expected `perturbation`",
            header.kind
        )));
    }
    let th_g = header
        .th_g
        .ok_or_else(|| Error::BadCheckpoint("perturbation file without th_g".into()))?;
    Ok((
        tensors,
        PerturbationMeta {
            arch: header.arch,
            th_g,
            names: header.tensors.into_iter().map(|t| t.name).collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lenet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("wcq-checkpoint-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn network_round_trip_is_bit_identical() {
        let mut net = lenet(QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        net.init_parameters(&mut rng);
        for (i, obs) in net.act_observers.iter_mut().enumerate() {
            obs.observe(1.5 + i as f64 * 0.25);
        }
        let path = tmp("roundtrip.bin");
        save_network(&path, &net).unwrap();
        let loaded = load_network(&path).unwrap();
        assert_eq!(loaded.arch, net.arch);
        assert_eq!(loaded.quant, net.quant);
        for (a, b) in net.params.iter().zip(&loaded.params) {
            assert_eq!(a.name, b.name);
            // bit-level equality, not approximate
            let ab: Vec<u64> = a.data.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "parameter {}", a.name);
        }
        for (a, b) in net.act_observers.iter().zip(&loaded.act_observers) {
            assert_eq!(a.value.map(f64::to_bits), b.value.map(f64::to_bits));
        }
    }

    #[test]
    fn perturbation_round_trip_preserves_bound_and_values() {
        let net = lenet(QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let deltas: Vec<Tensor> = net
            .weight_param_indices()
            .iter()
            .map(|&i| {
                let shape = net.params[i].data.shape().to_vec();
                let n: usize = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.03..0.03)).collect()).unwrap()
            })
            .collect();
        let path = tmp("deltas.bin");
        save_perturbation(&path, &net, &deltas, 0.03).unwrap();
        let (loaded, meta) = load_perturbation(&path).unwrap();
        assert_eq!(meta.arch, "lenet");
        assert_eq!(meta.th_g, 0.03);
        assert_eq!(meta.names.len(), 5);
        for (a, b) in deltas.iter().zip(&loaded) {
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_and_garbage_files_are_rejected_with_context() {
        let path = tmp("garbage.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        match load_network(&path) {
            Err(Error::BadCheckpoint(msg)) => {
                assert!(!msg.is_empty());
            }
            other => panic!("expected BadCheckpoint, got {other:?}"),
        }

        // valid header, truncated payload
        let mut net = lenet(QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        net.init_parameters(&mut rng);
        let full = tmp("full.bin");
        save_network(&full, &net).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let cut = tmp("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 17]).unwrap();
        match load_network(&cut) {
            Err(Error::BadCheckpoint(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected BadCheckpoint, got {other:?}"),
        }
    }

    #[test]
    fn kind_confusion_is_rejected() {
        let mut net = lenet(QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        net.init_parameters(&mut rng);
        let wpath = tmp("weights-as-deltas.bin");
        save_network(&wpath, &net).unwrap();
        assert!(load_perturbation(&wpath).is_err());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut net = lenet(QuantConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        net.init_parameters(&mut rng);
        let path = tmp("padded.bin");
        save_network(&path, &net).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, &bytes).unwrap();
        match load_network(&path) {
            Err(Error::BadCheckpoint(msg)) => assert!(msg.contains("trailing")),
            other => panic!("expected BadCheckpoint, got {other:?}"),
        }
    }
}
