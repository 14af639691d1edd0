//! Checkpoint directories: a JSON manifest (normative schema) plus a binary
//! parameter blob. Loading a checkpoint into a model of the same spec
//! reproduces forward outputs bit for bit on the same platform.

use super::{Head, Model, ModelSpec, Stage};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const BLOB_MAGIC: &[u8; 4] = b"PSYP";
const BLOB_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ObjectPretrained,
    FacePretrained,
    RandomlyInitialized,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::ObjectPretrained => "object_pretrained",
            Provenance::FacePretrained => "face_pretrained",
            Provenance::RandomlyInitialized => "randomly_initialized",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelSpec,
    pub provenance: Provenance,
    /// Validation accuracy at save time, when known.
    pub val_accuracy: Option<f64>,
    pub seed: Option<u64>,
}

impl Model<f32> {
    fn named_params(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for stage in &self.stages {
            if let Stage::Conv { name, layer } = stage {
                out.push((
                    format!("features.{name}.weight"),
                    layer.weight.shape().to_vec(),
                    layer.weight.iter().copied().collect(),
                ));
                out.push((
                    format!("features.{name}.bias"),
                    vec![layer.bias.len()],
                    layer.bias.to_vec(),
                ));
            }
        }
        match &self.head {
            Head::Standard(h) => {
                for (tag, lin) in [("fc1", &h.fc1), ("fc2", &h.fc2), ("fc3", &h.fc3)] {
                    out.push((
                        format!("head.{tag}.weight"),
                        lin.weight.shape().to_vec(),
                        lin.weight.iter().copied().collect(),
                    ));
                    let b = lin.bias.as_ref().expect("standard head layers carry bias");
                    out.push((format!("head.{tag}.bias"), vec![b.len()], b.to_vec()));
                }
            }
            Head::Fe(h) => {
                out.push((
                    "head.reduce.weight".to_string(),
                    h.reduce.weight.shape().to_vec(),
                    h.reduce.weight.iter().copied().collect(),
                ));
                out.push((
                    "head.expand.weight".to_string(),
                    h.expand.weight.shape().to_vec(),
                    h.expand.weight.iter().copied().collect(),
                ));
                out.push((
                    "head.output.weight".to_string(),
                    h.output.weight.shape().to_vec(),
                    h.output.weight.iter().copied().collect(),
                ));
                let b = h.output.bias.as_ref().expect("output bias");
                out.push(("head.output.bias".to_string(), vec![b.len()], b.to_vec()));
            }
        }
        out
    }

    fn load_named_params(&mut self, blob: BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        let mut remaining = blob;
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let (s, data) = remaining
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if s != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {s:?}, expected {shape:?}"
                )));
            }
            Ok(data)
        };
        for stage in &mut self.stages {
            if let Stage::Conv { name, layer } = stage {
                let w = take(&format!("features.{name}.weight"), layer.weight.shape())?;
                layer.weight.as_slice_mut().expect("contiguous").copy_from_slice(&w);
                let b = take(&format!("features.{name}.bias"), &[layer.bias.len()])?;
                layer.bias.as_slice_mut().expect("contiguous").copy_from_slice(&b);
            }
        }
        match &mut self.head {
            Head::Standard(h) => {
                for (tag, lin) in [("fc1", &mut h.fc1), ("fc2", &mut h.fc2), ("fc3", &mut h.fc3)] {
                    let w = take(&format!("head.{tag}.weight"), lin.weight.shape())?;
                    lin.weight.as_slice_mut().expect("contiguous").copy_from_slice(&w);
                    let bias = lin.bias.as_mut().expect("bias");
                    let b = take(&format!("head.{tag}.bias"), &[bias.len()])?;
                    bias.as_slice_mut().expect("contiguous").copy_from_slice(&b);
                }
            }
            Head::Fe(h) => {
                let w = take("head.reduce.weight", h.reduce.weight.shape())?;
                h.reduce.weight.as_slice_mut().expect("contiguous").copy_from_slice(&w);
                let w = take("head.expand.weight", h.expand.weight.shape())?;
                h.expand.weight.as_slice_mut().expect("contiguous").copy_from_slice(&w);
                let w = take("head.output.weight", h.output.weight.shape())?;
                h.output.weight.as_slice_mut().expect("contiguous").copy_from_slice(&w);
                let bias = h.output.bias.as_mut().expect("output bias");
                let b = take("head.output.bias", &[bias.len()])?;
                bias.as_slice_mut().expect("contiguous").copy_from_slice(&b);
            }
        }
        if let Some(name) = remaining.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{name}` in blob")));
        }
        Ok(())
    }

    /// Write `manifest.json` and `params.bin` into `dir` (created if needed).
    pub fn save_checkpoint(
        &self,
        dir: &Path,
        provenance: Provenance,
        val_accuracy: Option<f64>,
        seed: Option<u64>,
    ) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = CheckpointManifest {
            format_version: BLOB_VERSION,
            model: self.spec.clone(),
            provenance,
            val_accuracy,
            seed,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(dir.join(MANIFEST_FILE), json)?;

        let mut w = BufWriter::new(fs::File::create(dir.join(PARAMS_FILE))?);
        let params = self.named_params();
        w.write_all(BLOB_MAGIC)?;
        w.write_all(&BLOB_VERSION.to_le_bytes())?;
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (name, shape, data) in params {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for d in &shape {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Load a checkpoint directory written by [`Model::save_checkpoint`].
    pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, CheckpointManifest)> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact(format!(
                "checkpoint manifest {}",
                manifest_path.display()
            )));
        }
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let mut r = BufReader::new(fs::File::open(dir.join(PARAMS_FILE))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BLOB_MAGIC {
            return Err(Error::Checkpoint("bad parameter blob magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != BLOB_VERSION {
            return Err(Error::Checkpoint(format!("unsupported blob version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut blob = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("non-UTF8 tensor name".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut bytes = vec![0u8; len * 4];
            r.read_exact(&mut bytes)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            blob.insert(name, (shape, data));
        }
        let mut model = Model::<f32>::new_random(manifest.model.clone(), 0)?;
        model.load_named_params(blob)?;
        Ok((model, manifest))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
