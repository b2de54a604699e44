// SPDX-License-Identifier: Apache-2.0

//! Weight bundles: a directory holding `manifest.toml` and one raw
//! little-endian `f32` blob per tensor (row-major).
//!
//! ```toml
//! format_version = 1
//! activation_bound = "bounded"
//! sigma_neu = 0.4
//! seed = 3
//! [clip]
//! lower_percentile = 10.0
//! upper_percentile = 90.0
//! [topology]
//! input = [28, 28, 1]
//! [[topology.layers]]
//! kind = "conv2d"
//! ...
//! [[tensors]]
//! name = "layer0.weight"
//! file = "layer0.weight.f32"
//! shape = [9, 16]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::read_file;
use crate::error::{Error, Result};
use crate::net::{ActivationBound, Converters, LayerParams, NetworkSpec, Topology};
use crate::tensor::Tensor;
use crate::xbar::ClipSpec;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    activation_bound: ActivationBound,
    sigma_neu: f64,
    seed: u64,
    clip: ClipSpec,
    topology: Topology,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    converters: Option<Converters>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

fn weight_name(k: usize) -> String {
    format!("layer{k}.weight")
}

fn bias_name(k: usize) -> String {
    format!("layer{k}.bias")
}

fn write_blob(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, count: usize) -> Result<Vec<f32>> {
    let bytes = read_file(path)?;
    if bytes.len() != 4 * count {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: bytes.len().min(4 * count) as u64,
            reason: format!("{} bytes, expected {} f32 values", bytes.len(), count),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Writes `net` to the directory `dir` (created if needed).
pub fn save_bundle(dir: impl AsRef<Path>, net: &NetworkSpec) -> Result<()> {
    let dir = dir.as_ref();
    net.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (&li, p) in net
        .topology
        .weighted_layer_indices()
        .iter()
        .zip(&net.params)
    {
        let name = weight_name(li);
        let file = format!("{name}.f32");
        write_blob(&dir.join(&file), p.weight.data())?;
        tensors.push(TensorEntry {
            name,
            file,
            shape: p.weight.shape().to_vec(),
        });
        if let Some(b) = &p.bias {
            let name = bias_name(li);
            let file = format!("{name}.f32");
            write_blob(&dir.join(&file), b)?;
            tensors.push(TensorEntry {
                name,
                file,
                shape: vec![b.len()],
            });
        }
    }
    let manifest = Manifest {
        format_version: BUNDLE_FORMAT_VERSION,
        activation_bound: net.activation_bound(),
        sigma_neu: net.sigma_neu,
        seed: net.seed,
        clip: net.clip,
        topology: net.topology.clone(),
        converters: Some(net.converters.clone()),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::config(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a bundle written by [`save_bundle`].
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<NetworkSpec> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: toml::Table = text
        .parse()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_integer())
        .ok_or_else(|| Error::config(format!("{}: no format_version", path.display())))?;
    if version != BUNDLE_FORMAT_VERSION as i64 {
        return Err(Error::Version {
            found: version.try_into().unwrap_or(u32::MAX),
            expected: BUNDLE_FORMAT_VERSION,
        });
    }
    let m: Manifest =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    if m.topology.activation_bound() != m.activation_bound {
        return Err(Error::config(format!(
            "{}: activation_bound = {} but the topology is {}",
            path.display(),
            m.activation_bound,
            m.topology.activation_bound()
        )));
    }

    let shapes = m.topology.weight_shapes()?;
    let indices = m.topology.weighted_layer_indices();
    let find = |name: &str| m.tensors.iter().find(|t| t.name == name);
    let mut params = Vec::with_capacity(shapes.len());
    for (&(rows, cols), &li) in shapes.iter().zip(&indices) {
        let layer = &m.topology.layers[li];
        let entry = find(&weight_name(li)).ok_or_else(|| {
            Error::config(format!(
                "{}: no weight tensor for layer {li} ({}), expected {}",
                path.display(),
                layer.name(),
                weight_name(li)
            ))
        })?;
        if entry.shape != [rows, cols] {
            return Err(Error::shape(format!(
                "layer {li} ({}): stored shape {:?}, topology needs [{rows}, {cols}]",
                layer.name(),
                entry.shape
            )));
        }
        let weight = Tensor::new(
            vec![rows, cols],
            read_blob(&dir.join(&entry.file), rows * cols)?,
        )?;
        let bias = if layer.has_bias() {
            let entry = find(&bias_name(li)).ok_or_else(|| {
                Error::config(format!(
                    "{}: no bias tensor for layer {li} ({})",
                    path.display(),
                    layer.name()
                ))
            })?;
            Some(read_blob(&dir.join(&entry.file), cols)?)
        } else {
            None
        };
        params.push(LayerParams { weight, bias });
    }
    let mut net = NetworkSpec::new(m.topology, params)?;
    net.clip = m.clip;
    net.sigma_neu = m.sigma_neu;
    net.seed = m.seed;
    if let Some(c) = m.converters {
        net.converters = c;
    }
    net.validate()?;
    Ok(net)
}
