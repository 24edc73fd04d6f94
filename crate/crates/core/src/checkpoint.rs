//! Weight checkpoints.
//!
//! A checkpoint is a JSON manifest plus a binary buffer. The manifest holds
//! named sections (e.g. `generator`, `discriminator`); each section carries a
//! free-form JSON config and the ordered list of tensors with name, shape,
//! dtype, byte offset and whether the tensor is trainable. The buffer is the
//! concatenation of all tensors as little-endian `f32`, in manifest order.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT: &str = "chromoseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the buffer.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Buffer file name, relative to the manifest.
    pub buffer: String,
    pub sections: Vec<Section>,
}

impl Manifest {
    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("no section `{name}`")))
    }
}

/// Tensors of one section to be written.
pub struct SectionData<'a> {
    pub name: &'a str,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor, bool)>,
}

impl<'a> SectionData<'a> {
    pub fn from_store(name: &'a str, config: serde_json::Value, store: &ParamStore) -> Self {
        Self {
            name,
            config,
            tensors: store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.var.as_tensor().clone(), p.trainable))
                .collect(),
        }
    }
}

pub fn buffer_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn save(manifest_path: &Path, sections: &[SectionData<'_>]) -> Result<Manifest> {
    let buf_path = buffer_path(manifest_path);
    let mut bytes: Vec<u8> = Vec::new();
    let mut out = Vec::with_capacity(sections.len());
    for s in sections {
        let mut entries = Vec::with_capacity(s.tensors.len());
        for (name, t, trainable) in &s.tensors {
            let offset = bytes.len() as u64;
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            bytes.reserve(values.len() * 4);
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.dims().to_vec(),
                dtype: "f32".into(),
                offset,
                trainable: *trainable,
            });
        }
        out.push(Section {
            name: s.name.to_string(),
            config: s.config.clone(),
            tensors: entries,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        buffer: buf_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sections: out,
    };
    std::fs::write(&buf_path, &bytes)?;
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A loaded checkpoint: manifest plus the raw buffer.
pub struct Checkpoint {
    pub manifest: Manifest,
    buffer: Vec<u8>,
}

impl Checkpoint {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let buffer = std::fs::read(dir.join(&manifest.buffer))
            .map_err(|e| Error::Checkpoint(format!("buffer {}: {e}", manifest.buffer)))?;
        let ck = Self { manifest, buffer };
        ck.check_bounds()?;
        Ok(ck)
    }

    fn check_bounds(&self) -> Result<()> {
        for s in &self.manifest.sections {
            for t in &s.tensors {
                if t.dtype != "f32" {
                    return Err(Error::Checkpoint(format!("{}: dtype {}", t.name, t.dtype)));
                }
                let len = t.shape.iter().product::<usize>() as u64 * 4;
                if t.offset + len > self.buffer.len() as u64 {
                    return Err(Error::Checkpoint(format!("{}: buffer truncated", t.name)));
                }
            }
        }
        Ok(())
    }

    pub fn tensor(&self, entry: &TensorEntry, device: &Device) -> Result<Tensor> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let values: Vec<f32> = self.buffer[start..start + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Tensor::from_vec(values, entry.shape.as_slice(), device)?)
    }

    pub fn section_tensors(&self, section: &str, device: &Device) -> Result<Vec<(String, Tensor)>> {
        self.manifest
            .section(section)?
            .tensors
            .iter()
            .map(|e| Ok((e.name.clone(), self.tensor(e, device)?)))
            .collect()
    }

    /// Copies a section into `store`, which must have the same names and
    /// shapes in the same order.
    pub fn load_into(&self, section: &str, store: &ParamStore) -> Result<()> {
        let entries = &self.manifest.section(section)?.tensors;
        if entries.len() != store.params().len() {
            return Err(Error::Checkpoint(format!(
                "section `{section}` has {} tensors, model has {}",
                entries.len(),
                store.params().len()
            )));
        }
        for (e, p) in entries.iter().zip(store.params()) {
            if e.name != p.name || e.shape != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match model `{}` {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.var.dims()
                )));
            }
            p.var.set(&self.tensor(e, p.var.device())?)?;
        }
        Ok(())
    }
}
