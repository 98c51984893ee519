//! Checkpoint container.
//!
//! Layout: the 8-byte magic `QUALNET1`, a little-endian `u32` header length,
//! a JSON header `{format_version, kind, model_config, tensors: [{name,
//! shape}], extra}`, then every tensor as little-endian `f32` values in
//! manifest order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Param};
use crate::error::{Error, Result};
use crate::nn::Real;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"QUALNET1";

pub const KIND_MODEL: &str = "model";
pub const KIND_BACKBONE: &str = "backbone";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub model_config: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    model_config: Option<ModelConfig>,
    tensors: Vec<ManifestEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: container.kind.clone(),
        model_config: container.model_config.clone(),
        tensors: container
            .tensors
            .iter()
            .map(|t| ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        extra: container.extra.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&(header.len() as u32).to_le_bytes())?;
    write(&header)?;
    for t in &container.tensors {
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write(&buf)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint container (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {} (expected {FORMAT_VERSION})", header.format_version),
        ));
    }
    let mut offset = body;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(Error::format(path, format!("truncated data for tensor `{}`", entry.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset = end;
        tensors.push(TensorEntry {
            name: entry.name,
            shape: entry.shape,
            data,
        });
    }
    if offset != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(Container {
        kind: header.kind,
        model_config: header.model_config,
        tensors,
        extra: header.extra,
    })
}

pub(crate) fn tensors_of<T: Real>(params: &[Param<T>], filter: impl Fn(&str) -> bool) -> Vec<TensorEntry> {
    params
        .iter()
        .filter(|p| filter(&p.name))
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            data: p.data.iter().map(|v| v.to_f64_lossy() as f32).collect(),
        })
        .collect()
}

impl<T: Real> Model<T> {
    pub fn to_container(&self) -> Container {
        Container {
            kind: KIND_MODEL.into(),
            model_config: Some(self.config.clone()),
            tensors: tensors_of(&self.params, |_| true),
            extra: serde_json::Value::Null,
        }
    }

    /// Writes the full model; parameters are stored as `f32`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container())
    }

    /// Writes only the backbone tensors, in the form accepted by
    /// [`Model::import_backbone`].
    pub fn save_backbone(&self, path: &Path) -> Result<()> {
        write_container(
            path,
            &Container {
                kind: KIND_BACKBONE.into(),
                model_config: None,
                tensors: tensors_of(&self.params, |n| n.starts_with("backbone.")),
                extra: serde_json::Value::Null,
            },
        )
    }

    pub fn from_container(container: &Container, path: &Path) -> Result<Self> {
        let config = container
            .model_config
            .clone()
            .ok_or_else(|| Error::format(path, "container has no model configuration"))?;
        let mut model = Self::build(config)?;
        model.assign(&container.tensors, path, false)?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let container = read_container(path)?;
        if container.kind != KIND_MODEL && container.kind != "train_state" {
            return Err(Error::format(path, format!("expected a model checkpoint, found `{}`", container.kind)));
        }
        Self::from_container(&container, path)
    }

    /// Overwrites backbone parameters from a weight file. Every shape
    /// mismatch or missing tensor is reported at once and nothing is
    /// modified on error.
    pub fn import_backbone(&mut self, path: &Path) -> Result<()> {
        let container = read_container(path)?;
        let tensors: Vec<TensorEntry> =
            container.tensors.into_iter().filter(|t| t.name.starts_with("backbone.")).collect();
        self.assign(&tensors, path, true)
    }

    fn assign(&mut self, tensors: &[TensorEntry], path: &Path, backbone_only: bool) -> Result<()> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            if backbone_only && !p.name.starts_with("backbone.") {
                continue;
            }
            match tensors.iter().find(|t| t.name == p.name) {
                None => problems.push(format!("{}: missing", p.name)),
                Some(t) if t.shape != p.shape => {
                    problems.push(format!("{}: expected shape {:?}, file has {:?}", p.name, p.shape, t.shape))
                }
                Some(t) => updates.push((i, t)),
            }
        }
        for t in tensors {
            if !self.params.iter().any(|p| p.name == t.name) {
                problems.push(format!("{}: not a parameter of this model", t.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::format(path, format!("tensor mismatch: {}", problems.join("; "))));
        }
        for (i, t) in updates {
            self.params[i].data = t.data.iter().map(|&v| T::of(v as f64)).collect();
        }
        Ok(())
    }
}
