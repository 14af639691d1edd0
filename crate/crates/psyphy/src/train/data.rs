//! Dataset manifests for binary valence classification: CSV files
//! (`path,valence` or `path,label`) or class-per-directory image folders.

use crate::error::{Error, Result};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the root that relative manifest paths resolve
/// against (after the manifest's own directory).
pub const DATA_ROOT_ENV: &str = "PSYPHY_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Class labels; the class map is fixed: negative = 0, positive = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

/// Valence binarization rule: negative below zero, positive at or above.
pub fn binarize_valence(v: f64) -> Result<Label> {
    if !v.is_finite() {
        return Err(Error::Validation(format!("valence must be finite, got {v}")));
    }
    Ok(if v < 0.0 { Label::Negative } else { Label::Positive })
}

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<DatasetEntry>,
}

fn resolve(path: &str, base: &Path) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    let candidate = base.join(p);
    if candidate.exists() {
        return candidate;
    }
    if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
        let alt = Path::new(&root).join(p);
        if alt.exists() {
            return alt;
        }
    }
    candidate
}

impl DatasetManifest {
    /// Reads a CSV manifest with header `path,valence` or `path,label`.
    /// Relative image paths resolve against the CSV's directory, then against
    /// `$PSYPHY_DATA_ROOT`.
    pub fn from_csv(path: &Path, split: Split) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Validation(format!("manifest {} not found", path.display())));
        }
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let mode = match (headers.get(0).map(str::trim), headers.get(1).map(str::trim)) {
            (Some("path"), Some("valence")) => "valence",
            (Some("path"), Some("label")) => "label",
            _ => {
                return Err(Error::Validation(format!(
                    "manifest header must be `path,valence` or `path,label`, got {headers:?}"
                )))
            }
        };
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record?;
            let img_path = resolve(record[0].trim(), &base);
            let label = if mode == "valence" {
                let v: f64 = record[1].trim().parse().map_err(|_| {
                    Error::Validation(format!("bad valence `{}` in manifest", &record[1]))
                })?;
                binarize_valence(v)?
            } else {
                match record[1].trim().to_ascii_lowercase().as_str() {
                    "negative" | "0" => Label::Negative,
                    "positive" | "1" => Label::Positive,
                    other => {
                        return Err(Error::Validation(format!(
                            "bad label `{other}` (expected negative|positive|0|1)"
                        )))
                    }
                }
            };
            entries.push(DatasetEntry { path: img_path, label });
        }
        let manifest = Self { split, entries };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Class-per-directory layout: `<dir>/negative/*.png`, `<dir>/positive/*.png`.
    pub fn from_dir(dir: &Path, split: Split) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Validation(format!("dataset directory {} not found", dir.display())));
        }
        let mut entries = Vec::new();
        for (sub, label) in [("negative", Label::Negative), ("positive", Label::Positive)] {
            let class_dir = dir.join(sub);
            if !class_dir.is_dir() {
                continue;
            }
            let mut files: Vec<_> =
                std::fs::read_dir(&class_dir)?.collect::<std::io::Result<Vec<_>>>()?;
            files.sort_by_key(|e| e.file_name());
            for f in files {
                let p = f.path();
                let is_image = p
                    .extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"));
                if is_image {
                    entries.push(DatasetEntry { path: p, label });
                }
            }
        }
        let manifest = Self { split, entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyInput(format!("{:?} split has no entries", self.split)));
        }
        for e in &self.entries {
            if !e.path.exists() {
                return Err(Error::Validation(format!(
                    "image {} listed in manifest does not exist",
                    e.path.display()
                )));
            }
        }
        if self.split == Split::Train {
            let positives = self.entries.iter().filter(|e| e.label == Label::Positive).count();
            if positives == 0 || positives == self.entries.len() {
                return Err(Error::Validation(
                    "training split must contain both classes after binarization".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes every image up front; errors carry the offending path.
    pub fn load_images(&self) -> Result<Vec<(RgbImage, Label)>> {
        self.entries
            .iter()
            .map(|e| {
                let img = image::open(&e.path)
                    .map_err(|err| {
                        Error::Validation(format!("cannot decode {}: {err}", e.path.display()))
                    })?
                    .to_rgb8();
                Ok((img, e.label))
            })
            .collect()
    }
}

/// Writes a labeled image set to `dir` plus a `manifest.csv` with valences.
pub fn write_image_set(dir: &Path, images: &[(RgbImage, f64)], stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["path", "valence"])?;
    for (i, (img, valence)) in images.iter().enumerate() {
        let name = format!("{stem}_{i:04}.png");
        img.save(dir.join(&name))?;
        w.write_record([name.as_str(), &format!("{valence}")])?;
    }
    w.flush()?;
    Ok(csv_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarization_rule() {
        assert_eq!(binarize_valence(-0.3).unwrap(), Label::Negative);
        assert_eq!(binarize_valence(0.0).unwrap(), Label::Positive);
        assert_eq!(binarize_valence(0.7).unwrap(), Label::Positive);
        assert!(binarize_valence(f64::NAN).is_err());
        assert!(binarize_valence(f64::INFINITY).is_err());
    }

    #[test]
    fn csv_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let faces = crate::stimuli::synth_dataset(6, 3, 32);
        let csv = write_image_set(dir.path(), &faces, "train").unwrap();
        let manifest = DatasetManifest::from_csv(&csv, Split::Train).unwrap();
        assert_eq!(manifest.len(), 6);
        // synth_dataset alternates positive/negative.
        assert_eq!(manifest.entries[0].label, Label::Positive);
        assert_eq!(manifest.entries[1].label, Label::Negative);
        let images = manifest.load_images().unwrap();
        assert_eq!(images.len(), 6);
    }

    #[test]
    fn single_class_train_split_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let faces: Vec<_> =
            crate::stimuli::synth_dataset(6, 3, 32).into_iter().step_by(2).collect();
        let csv = write_image_set(dir.path(), &faces, "train").unwrap();
        assert!(DatasetManifest::from_csv(&csv, Split::Train).is_err());
        // The same data are fine as a validation split.
        assert!(DatasetManifest::from_csv(&csv, Split::Val).is_ok());
    }

    #[test]
    fn directory_layout_loads() {
        let dir = tempfile::tempdir().unwrap();
        let faces = crate::stimuli::synth_dataset(4, 9, 32);
        for (i, (img, v)) in faces.iter().enumerate() {
            let sub = if *v >= 0.0 { "positive" } else { "negative" };
            let class_dir = dir.path().join(sub);
            std::fs::create_dir_all(&class_dir).unwrap();
            img.save(class_dir.join(format!("f{i}.png"))).unwrap();
        }
        let manifest = DatasetManifest::from_dir(dir.path(), Split::Train).unwrap();
        assert_eq!(manifest.len(), 4);
    }

    #[test]
    fn missing_file_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("m.csv");
        std::fs::write(&csv_path, "path,label\nnope.png,positive\n").unwrap();
        assert!(DatasetManifest::from_csv(&csv_path, Split::Val).is_err());
    }
}
