//! Experiment configuration: one JSON file drives training, continuum sweeps,
//! masking, attribution figures and reports. Relative paths resolve against
//! the config file's directory.

use crate::error::{Error, Result};
use crate::stimuli::{FracBox, Region};
use crate::train::TrainConfig;
use crate::zoo::{ArchName, Provenance};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: ArchName,
    pub provenance: Provenance,
    /// Existing checkpoint directory; when absent the model starts from
    /// seeded random weights.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl ModelEntry {
    /// Stable identifier used in output filenames.
    pub fn id(&self) -> String {
        format!("{}_{}", self.name, self.provenance)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuumConfig {
    Synthetic { n_levels: usize, size: u32 },
    Directory { directory: PathBuf, #[serde(default)] prefix: Option<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic { n_train: usize, n_val: usize, size: u32 },
    Csv { train_csv: PathBuf, val_csv: PathBuf },
    Dirs { train_dir: PathBuf, val_dir: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CamConfig {
    #[serde(default)]
    pub layer: Option<String>,
    #[serde(default = "default_target_class")]
    pub target_class: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_target_class() -> usize {
    1
}
fn default_alpha() -> f64 {
    0.45
}

impl Default for CamConfig {
    fn default() -> Self {
        Self { layer: None, target_class: default_target_class(), alpha: default_alpha() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    /// `(height, width)` of the network input.
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
    pub models: Vec<ModelEntry>,
    pub continuum: ContinuumConfig,
    #[serde(default = "default_conditions")]
    pub mask_conditions: Vec<Region>,
    /// Optional mask-box config file (JSON region -> [x0, y0, x1, y1]).
    #[serde(default)]
    pub mask_boxes: Option<PathBuf>,
    #[serde(default)]
    pub human_trials: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default)]
    pub cam: CamConfig,
    /// Bonferroni family size override; default is the per-table count of
    /// non-degenerate rows.
    #[serde(default)]
    pub report_m: Option<usize>,
    /// Include wall-clock timings in reports (off keeps reruns byte-identical).
    #[serde(default)]
    pub emit_timings: bool,
}

fn default_input_size() -> (usize, usize) {
    (224, 224)
}

fn default_conditions() -> Vec<Region> {
    vec![Region::Eyes, Region::Nose, Region::Mouth]
}

fn default_pretrain_epochs() -> usize {
    60
}

/// A loaded config with resolved paths, the effective seed/out overrides and
/// the hash stamped into every output.
#[derive(Debug, Clone)]
pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub config_hash: String,
}

impl Ctx {
    pub fn load(path: &Path, seed_override: Option<u64>, out_override: Option<PathBuf>) -> Result<Ctx> {
        if !path.exists() {
            return Err(Error::Validation(format!("config file {} not found", path.display())));
        }
        let bytes = std::fs::read(path)?;
        let mut cfg: ExperimentConfig = serde_json::from_slice(&bytes).map_err(|e| {
            Error::Validation(format!("cannot parse config {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        for m in &mut cfg.models {
            if let Some(c) = &mut m.checkpoint {
                resolve(c);
            }
        }
        if let ContinuumConfig::Directory { directory, .. } = &mut cfg.continuum {
            resolve(directory);
        }
        if let Some(p) = &mut cfg.mask_boxes {
            resolve(p);
        }
        if let Some(p) = &mut cfg.human_trials {
            resolve(p);
        }
        match &mut cfg.dataset {
            Some(DatasetConfig::Csv { train_csv, val_csv }) => {
                resolve(train_csv);
                resolve(val_csv);
            }
            Some(DatasetConfig::Dirs { train_dir, val_dir }) => {
                resolve(train_dir);
                resolve(val_dir);
            }
            _ => {}
        }
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let config_hash = hex_string(&hasher.finalize());
        let seed = seed_override.unwrap_or(cfg.seed);
        let out_dir = out_override.unwrap_or_else(|| cfg.out_dir.clone());
        let ctx = Ctx { cfg, out_dir, seed, config_hash };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cfg.models.is_empty() {
            return Err(Error::Validation("config lists no models".into()));
        }
        if self.cfg.input_size.0 < 48 || self.cfg.input_size.1 < 48 {
            return Err(Error::Validation(format!(
                "input_size {:?} too small for the architectures (min 48x48)",
                self.cfg.input_size
            )));
        }
        self.cfg.train.validate()?;
        for m in &self.cfg.models {
            if let Some(c) = &m.checkpoint {
                if !c.exists() {
                    return Err(Error::Validation(format!(
                        "checkpoint {} for model {} not found",
                        c.display(),
                        m.id()
                    )));
                }
            }
        }
        if let ContinuumConfig::Directory { directory, .. } = &self.cfg.continuum {
            if !directory.is_dir() {
                return Err(Error::Validation(format!(
                    "continuum directory {} not found",
                    directory.display()
                )));
            }
        }
        if let ContinuumConfig::Synthetic { n_levels, .. } = &self.cfg.continuum {
            if *n_levels < 2 {
                return Err(Error::Validation("continuum n_levels must be >= 2".into()));
            }
        }
        if let Some(p) = &self.cfg.mask_boxes {
            if !p.exists() {
                return Err(Error::Validation(format!("mask box file {} not found", p.display())));
            }
        }
        if let Some(p) = &self.cfg.human_trials {
            if !p.exists() {
                return Err(Error::Validation(format!("human trials {} not found", p.display())));
            }
        }
        match &self.cfg.dataset {
            Some(DatasetConfig::Csv { train_csv, val_csv }) => {
                for p in [train_csv, val_csv] {
                    if !p.exists() {
                        return Err(Error::Validation(format!(
                            "dataset manifest {} not found",
                            p.display()
                        )));
                    }
                }
            }
            Some(DatasetConfig::Dirs { train_dir, val_dir }) => {
                for p in [train_dir, val_dir] {
                    if !p.is_dir() {
                        return Err(Error::Validation(format!(
                            "dataset directory {} not found",
                            p.display()
                        )));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn mask_boxes(&self) -> Result<BTreeMap<Region, FracBox>> {
        match &self.cfg.mask_boxes {
            Some(path) => crate::stimuli::load_mask_boxes(path),
            None => Ok(crate::stimuli::default_mask_boxes()),
        }
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Wrapper stamped onto every JSON artifact for provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub payload: T,
}

impl Ctx {
    pub fn stamp<T>(&self, payload: T) -> Stamped<T> {
        Stamped { config_hash: self.config_hash.clone(), seed: self.seed, payload }
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, payload: &T) -> Result<PathBuf> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string_pretty(payload)?;
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
