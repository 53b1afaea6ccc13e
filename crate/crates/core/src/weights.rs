//! Weight container: a JSON manifest plus a flat little-endian f32 binary.
//!
//! The manifest lists tensors (name and shape) in storage order; the binary
//! is those tensors, row-major, concatenated with no padding. The binary
//! path in the manifest is relative to the manifest's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{conv_name, ArchSpec, ConvParams, ExtractorWeights, Normalization, Provenance};
use crate::tensor::{Real, Tensor};

pub const FORMAT: &str = "sesim-weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub dtype: String,
    pub byte_order: String,
    pub binary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn new(kind: &str, binary: &str) -> Self {
        Self {
            format: FORMAT.into(),
            kind: kind.into(),
            dtype: "f32".into(),
            byte_order: "little-endian".into(),
            binary: binary.into(),
            arch: None,
            normalization: None,
            provenance: None,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.format != FORMAT {
            return Err(Error::Manifest(format!("unknown format `{}`", self.format)));
        }
        if self.dtype != "f32" {
            return Err(Error::Manifest(format!("unsupported dtype `{}`", self.dtype)));
        }
        if self.byte_order != "little-endian" {
            return Err(Error::Manifest(format!("unsupported byte order `{}`", self.byte_order)));
        }
        Ok(())
    }
}

/// Binary file name written next to a manifest: `<stem>.bin`.
fn binary_name(manifest_path: &Path) -> String {
    let stem = manifest_path.file_stem().and_then(|s| s.to_str()).unwrap_or("weights");
    format!("{stem}.bin")
}

fn binary_path(manifest_path: &Path, manifest: &Manifest) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.binary)
}

/// Write `manifest` (its `binary` field is set here) and the tensor values.
pub fn write_container(manifest_path: &Path, mut manifest: Manifest, values: &[&[f32]]) -> Result<()> {
    if values.len() != manifest.tensors.len() {
        return Err(Error::Manifest("one value buffer per tensor entry required".into()));
    }
    let mut bytes = Vec::new();
    for (entry, vals) in manifest.tensors.iter().zip(values) {
        if entry.numel() != vals.len() {
            return Err(Error::LayerShape {
                layer: entry.name.clone(),
                expected: entry.shape.clone(),
                found: vec![vals.len()],
            });
        }
        for v in vals.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.binary = binary_name(manifest_path);
    fs::write(binary_path(manifest_path, &manifest), bytes)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Read a manifest and its binary; returns the manifest and one buffer per entry.
pub fn read_container(manifest_path: &Path) -> Result<(Manifest, Vec<Vec<f32>>)> {
    if !manifest_path.is_file() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    manifest.validate()?;
    let bin = binary_path(manifest_path, &manifest);
    if !bin.is_file() {
        return Err(Error::MissingFile(bin));
    }
    let bytes = fs::read(&bin)?;
    let expected: usize = manifest.tensors.iter().map(|t| t.numel() * 4).sum();
    if bytes.len() != expected {
        return Err(Error::LengthMismatch { expected, actual: bytes.len() });
    }
    let mut values = Vec::with_capacity(manifest.tensors.len());
    let mut chunks = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    for entry in &manifest.tensors {
        values.push(chunks.by_ref().take(entry.numel()).collect());
    }
    Ok((manifest, values))
}

fn to_f32<T: Real>(xs: &[T]) -> Vec<f32> {
    xs.iter().map(|x| x.to_f64() as f32).collect()
}

/// Save a trunk as `kind = "extractor"`, tensors `conv<i>.weight` / `conv<i>.bias`.
pub fn save_weights<T: Real>(manifest_path: &Path, arch: &ArchSpec, weights: &ExtractorWeights<T>) -> Result<()> {
    weights.check_against(arch)?;
    let mut manifest = Manifest::new("extractor", "");
    manifest.arch = Some(arch.clone());
    manifest.normalization = weights.normalization.clone();
    manifest.provenance = Some(weights.provenance);
    let conv_idx: Vec<usize> = arch
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, crate::extractor::Layer::Conv { .. }))
        .map(|(i, _)| i)
        .collect();
    let mut buffers = Vec::new();
    for (&idx, p) in conv_idx.iter().zip(&weights.convs) {
        manifest.tensors.push(TensorEntry {
            name: format!("{}.weight", conv_name(idx)),
            shape: p.weight.shape().to_vec(),
        });
        manifest.tensors.push(TensorEntry {
            name: format!("{}.bias", conv_name(idx)),
            shape: vec![p.bias.len()],
        });
        buffers.push(to_f32(p.weight.data()));
        buffers.push(to_f32(&p.bias));
    }
    let refs: Vec<&[f32]> = buffers.iter().map(|b| b.as_slice()).collect();
    write_container(manifest_path, manifest, &refs)
}

/// Load a trunk. The architecture comes from the manifest unless `expected`
/// is given, in which case the manifest's arch (if any) must equal it.
/// Loaded weights are tagged [`Provenance::Loaded`].
pub fn load_weights(manifest_path: &Path, expected: Option<&ArchSpec>) -> Result<(ArchSpec, ExtractorWeights<f32>)> {
    let (manifest, values) = read_container(manifest_path)?;
    if manifest.kind != "extractor" {
        return Err(Error::Manifest(format!("expected kind `extractor`, found `{}`", manifest.kind)));
    }
    let arch = match (expected, &manifest.arch) {
        (Some(e), Some(m)) if e != m => {
            return Err(Error::Manifest("manifest architecture differs from the expected one".into()))
        }
        (Some(e), _) => e.clone(),
        (None, Some(m)) => m.clone(),
        (None, None) => return Err(Error::Manifest("manifest has no architecture".into())),
    };
    arch.validate()?;
    let lookup = |name: &str| -> Result<(&TensorEntry, &Vec<f32>)> {
        manifest
            .tensors
            .iter()
            .zip(&values)
            .find(|(e, _)| e.name == name)
            .ok_or_else(|| Error::Manifest(format!("missing tensor `{name}`")))
    };
    let mut convs = Vec::new();
    for (idx, layer) in arch.layers.iter().enumerate() {
        let crate::extractor::Layer::Conv { in_ch, out_ch, kernel, .. } = *layer else { continue };
        let layer_name = conv_name(idx);
        let (we, wv) = lookup(&format!("{layer_name}.weight"))?;
        let (be, bv) = lookup(&format!("{layer_name}.bias"))?;
        let expected_w = vec![out_ch, in_ch, kernel, kernel];
        if we.shape != expected_w {
            return Err(Error::LayerShape { layer: layer_name, expected: expected_w, found: we.shape.clone() });
        }
        if be.shape != vec![out_ch] {
            return Err(Error::LayerShape { layer: layer_name, expected: vec![out_ch], found: be.shape.clone() });
        }
        convs.push(ConvParams {
            weight: Tensor::from_vec([out_ch, in_ch, kernel, kernel], wv.clone())?,
            bias: bv.clone(),
        });
    }
    let weights = ExtractorWeights {
        convs,
        provenance: Provenance::Loaded,
        normalization: manifest.normalization.clone(),
    };
    Ok((arch, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunk.json");
        let arch = ArchSpec::default();
        let w = ExtractorWeights::<f32>::init_random(&arch, 11);
        save_weights(&path, &arch, &w).unwrap();
        assert!(dir.path().join("trunk.bin").is_file());
        let (arch2, w2) = load_weights(&path, None).unwrap();
        assert_eq!(arch2, arch);
        assert_eq!(w2.provenance, Provenance::Loaded);
        for (a, b) in w.convs.iter().zip(&w2.convs) {
            let ab: Vec<u32> = a.weight.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.weight.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        assert!(matches!(load_weights(&path, None), Err(Error::MissingFile(_))));

        let arch = ArchSpec::tiny(4, crate::ops::Padding::Zero);
        let w = ExtractorWeights::<f32>::init_random(&arch, 1);
        save_weights(&path, &arch, &w).unwrap();

        // Truncate the binary.
        let bin = dir.path().join("w.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_weights(&path, None), Err(Error::LengthMismatch { .. })));
        fs::write(&bin, &bytes).unwrap();

        // Declare a wrong shape with a consistent byte count.
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.tensors[0].shape = vec![4, 3, 9, 1];
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        match load_weights(&path, None) {
            Err(Error::LayerShape { layer, .. }) => assert_eq!(layer, "conv0"),
            other => panic!("expected LayerShape, got {other:?}"),
        }

        fs::remove_file(&bin).unwrap();
        assert!(matches!(load_weights(&path, None), Err(Error::MissingFile(_))));
    }
}
