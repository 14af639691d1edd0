//! Stimuli: morph continua (user-supplied directories or synthetic cartoon
//! faces) and reverse-correlation masking of facial regions.

pub mod synth;

pub use synth::{synth_continuum, synth_dataset, SynthFace};

use crate::error::{Error, Result};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuumSource {
    UserMorphs,
    Synthetic,
}

/// Ordered stimulus sequence; levels are the proportion of the "positive"
/// expression in `[0, 1]`, strictly increasing, and all images share
/// dimensions.
pub struct MorphContinuum {
    levels: Vec<f64>,
    images: Vec<RgbImage>,
    source: ContinuumSource,
}

impl MorphContinuum {
    pub fn new(levels: Vec<f64>, images: Vec<RgbImage>, source: ContinuumSource) -> Result<Self> {
        if levels.len() != images.len() {
            return Err(Error::Stimulus("levels/images length mismatch".into()));
        }
        if levels.len() < 2 {
            return Err(Error::Stimulus(format!(
                "a continuum needs at least 2 levels, got {}",
                levels.len()
            )));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Stimulus("levels must be strictly increasing".into()));
        }
        if levels.iter().any(|&l| !(0.0..=1.0).contains(&l)) {
            return Err(Error::Stimulus("levels must lie in [0, 1]".into()));
        }
        let dims = images[0].dimensions();
        if images.iter().any(|im| im.dimensions() != dims) {
            return Err(Error::Stimulus("stimulus dimensions differ across levels".into()));
        }
        Ok(Self { levels, images, source })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn images(&self) -> &[RgbImage] {
        &self.images
    }

    pub fn source(&self) -> ContinuumSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.images[0].dimensions()
    }

    /// The stimulus whose level is closest to `level`.
    pub fn nearest(&self, level: f64) -> (f64, &RgbImage) {
        let (i, _) = self
            .levels
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (*a - level).abs().partial_cmp(&(*b - level).abs()).expect("finite levels")
            })
            .expect("nonempty continuum");
        (self.levels[i], &self.images[i])
    }

    /// Applies a mask to every stimulus, keeping levels.
    pub fn masked(&self, spec: &MaskSpec) -> Result<MorphContinuum> {
        let images = self
            .images
            .iter()
            .map(|im| apply_mask(im, spec))
            .collect::<Result<Vec<_>>>()?;
        MorphContinuum::new(self.levels.clone(), images, self.source)
    }
}

/// Loads `*_pctXXX.png` files (XXX = integer percent 000..100) from a
/// directory. `prefix`, when given, restricts to files whose stem starts with
/// it. Levels are sorted and validated.
pub fn load_continuum(dir: &Path, prefix: Option<&str>) -> Result<MorphContinuum> {
    if !dir.is_dir() {
        return Err(Error::Validation(format!("continuum directory {} not found", dir.display())));
    }
    let mut found: Vec<(f64, RgbImage)> = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(stem) = name.strip_suffix(".png") else { continue };
        if let Some(p) = prefix {
            if !stem.starts_with(p) {
                continue;
            }
        }
        let Some(pos) = stem.rfind("_pct") else { continue };
        let digits = &stem[pos + 4..];
        let pct: u32 = digits.parse().map_err(|_| {
            Error::Stimulus(format!("unparseable level in stimulus filename `{name}`"))
        })?;
        if pct > 100 {
            return Err(Error::Stimulus(format!("level {pct}% out of range in `{name}`")));
        }
        let img = image::open(entry.path())?.to_rgb8();
        found.push((pct as f64 / 100.0, img));
    }
    if found.len() < 2 {
        return Err(Error::Stimulus(format!(
            "found {} stimuli in {} (need at least 2; expected files like face_pct050.png)",
            found.len(),
            dir.display()
        )));
    }
    found.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite levels"));
    if found.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Stimulus("duplicate morph level in directory".into()));
    }
    let (levels, images) = found.into_iter().unzip();
    MorphContinuum::new(levels, images, ContinuumSource::UserMorphs)
}

/// Writes the continuum as `{name}_pctXXX.png`. Levels must land on integer
/// percents for the filename convention to round-trip exactly.
pub fn save_continuum(continuum: &MorphContinuum, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (level, img) in continuum.levels.iter().zip(&continuum.images) {
        let pct = level * 100.0;
        if (pct - pct.round()).abs() > 1e-9 {
            return Err(Error::Stimulus(format!(
                "level {level} is not an integer percent; cannot encode in filename"
            )));
        }
        img.save(dir.join(format!("{name}_pct{:03}.png", pct.round() as u32)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Eyes,
    Nose,
    Mouth,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Eyes, Region::Nose, Region::Mouth];
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::Eyes => "eyes",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
        })
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eyes" => Ok(Region::Eyes),
            "nose" => Ok(Region::Nose),
            "mouth" => Ok(Region::Mouth),
            other => Err(Error::Validation(format!("unknown mask region `{other}`"))),
        }
    }
}

/// Fractional rectangle in image coordinates, `0 <= x0 < x1 <= 1`,
/// `0 <= y0 < y1 <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FracBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl FracBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.x0)
            && (0.0..1.0).contains(&self.y0)
            && self.x0 < self.x1
            && self.y0 < self.y1
            && self.x1 <= 1.0
            && self.y1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid mask box {self:?}")))
        }
    }

    /// Pixel extent: origin is `round(frac * dim)`, size is
    /// `round(width_frac * dim)`, so the masked pixel count is
    /// `round((x1-x0)*W) * round((y1-y0)*H)`.
    pub fn to_pixels(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let px = (self.x0 * width as f64).round() as i64;
        let py = (self.y0 * height as f64).round() as i64;
        let pw = ((self.x1 - self.x0) * width as f64).round() as i64;
        let ph = ((self.y1 - self.y0) * height as f64).round() as i64;
        let px = px.clamp(0, width as i64) as u32;
        let py = py.clamp(0, height as i64) as u32;
        let pw = pw.clamp(0, (width - px) as i64) as u32;
        let ph = ph.clamp(0, (height - py) as i64) as u32;
        (px, py, pw, ph)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    /// Mean color of the pixels outside the box (keeps masking idempotent).
    MeanGray,
    Black,
    Custom([u8; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub region: Region,
    pub bounds: FracBox,
    pub fill: Fill,
}

impl MaskSpec {
    pub fn new(region: Region, bounds: FracBox, fill: Fill) -> Result<Self> {
        bounds.validate()?;
        Ok(Self { region, bounds, fill })
    }
}

/// Default fractional boxes per facial region. These match the geometry of the
/// synthetic face generator and are user-overridable for real datasets via a
/// JSON config (`region -> [x0, y0, x1, y1]`).
pub fn default_mask_boxes() -> BTreeMap<Region, FracBox> {
    let mut m = BTreeMap::new();
    m.insert(Region::Eyes, FracBox { x0: 0.28, y0: 0.30, x1: 0.72, y1: 0.50 });
    m.insert(Region::Nose, FracBox { x0: 0.40, y0: 0.46, x1: 0.60, y1: 0.64 });
    m.insert(Region::Mouth, FracBox { x0: 0.26, y0: 0.58, x1: 0.74, y1: 0.86 });
    m
}

/// Reads a mask-box config file: JSON object mapping region name to
/// `[x0, y0, x1, y1]`.
pub fn load_mask_boxes(path: &Path) -> Result<BTreeMap<Region, FracBox>> {
    let raw: BTreeMap<String, [f64; 4]> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut out = BTreeMap::new();
    for (k, [x0, y0, x1, y1]) in raw {
        let region = Region::from_str(&k)?;
        out.insert(region, FracBox::new(x0, y0, x1, y1)?);
    }
    Ok(out)
}

/// Replaces the pixels inside the spec's box with the fill color; every pixel
/// outside the box is bit-identical to the input. Idempotent for all fills.
pub fn apply_mask(image: &RgbImage, spec: &MaskSpec) -> Result<RgbImage> {
    spec.bounds.validate()?;
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Stimulus("cannot mask a zero-size image".into()));
    }
    let (px, py, pw, ph) = spec.bounds.to_pixels(w, h);
    if pw == 0 || ph == 0 {
        return Err(Error::Validation(format!(
            "mask box {:?} covers zero pixels on a {w}x{h} image",
            spec.bounds
        )));
    }
    let fill = match spec.fill {
        Fill::Black => [0u8, 0, 0],
        Fill::Custom(c) => c,
        Fill::MeanGray => {
            // Mean over the region *outside* the box, so re-masking sees the
            // same statistics and produces the same fill.
            let mut sum = [0u64; 3];
            let mut count = 0u64;
            for (x, y, p) in image.enumerate_pixels() {
                let inside = x >= px && x < px + pw && y >= py && y < py + ph;
                if !inside {
                    for c in 0..3 {
                        sum[c] += p.0[c] as u64;
                    }
                    count += 1;
                }
            }
            if count == 0 {
                [128, 128, 128]
            } else {
                [0, 1, 2].map(|c| ((sum[c] + count / 2) / count) as u8)
            }
        }
    };
    let mut out = image.clone();
    for y in py..py + ph {
        for x in px..px + pw {
            out.put_pixel(x, y, image::Rgb(fill));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8])
        })
    }

    #[test]
    fn mask_changes_only_box_pixels() {
        let img = test_image(100, 80);
        let spec = MaskSpec::new(
            Region::Eyes,
            FracBox::new(0.2, 0.25, 0.8, 0.45).unwrap(),
            Fill::MeanGray,
        )
        .unwrap();
        let masked = apply_mask(&img, &spec).unwrap();
        let (px, py, pw, ph) = spec.bounds.to_pixels(100, 80);
        let mut changed = 0;
        for (x, y, p) in masked.enumerate_pixels() {
            let inside = x >= px && x < px + pw && y >= py && y < py + ph;
            if p != img.get_pixel(x, y) {
                assert!(inside, "pixel ({x},{y}) changed outside the box");
                changed += 1;
            }
        }
        assert!(changed > 0);
        // Masked pixel extent follows the round() convention.
        assert_eq!(pw, (0.6f64 * 100.0).round() as u32);
        assert_eq!(ph, (0.2f64 * 80.0).round() as u32);
    }

    #[test]
    fn mask_is_idempotent() {
        let img = test_image(64, 64);
        for fill in [Fill::MeanGray, Fill::Black, Fill::Custom([10, 200, 30])] {
            let spec =
                MaskSpec::new(Region::Mouth, FracBox::new(0.3, 0.6, 0.7, 0.85).unwrap(), fill)
                    .unwrap();
            let once = apply_mask(&img, &spec).unwrap();
            let twice = apply_mask(&once, &spec).unwrap();
            assert_eq!(once, twice, "{fill:?}");
        }
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(FracBox::new(0.5, 0.2, 0.5, 0.4).is_err(), "zero width");
        assert!(FracBox::new(0.6, 0.2, 0.5, 0.4).is_err(), "inverted");
        assert!(FracBox::new(-0.1, 0.2, 0.5, 0.4).is_err(), "negative");
        assert!(FracBox::new(0.1, 0.2, 1.2, 0.4).is_err(), "overflow");
    }

    #[test]
    fn continuum_requires_uniform_dimensions_and_sorted_levels() {
        let a = test_image(32, 32);
        let b = test_image(32, 32);
        let c = test_image(16, 16);
        assert!(MorphContinuum::new(
            vec![0.0, 1.0],
            vec![a.clone(), c],
            ContinuumSource::Synthetic
        )
        .is_err());
        assert!(MorphContinuum::new(
            vec![0.5, 0.5],
            vec![a.clone(), b.clone()],
            ContinuumSource::Synthetic
        )
        .is_err());
        assert!(
            MorphContinuum::new(vec![0.0, 1.0], vec![a, b], ContinuumSource::Synthetic).is_ok()
        );
    }

    #[test]
    fn continuum_round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let continuum = synth_continuum(21, 3, 48).unwrap();
        save_continuum(&continuum, dir.path(), "face").unwrap();
        let loaded = load_continuum(dir.path(), Some("face")).unwrap();
        assert_eq!(loaded.levels(), continuum.levels());
        assert_eq!(loaded.images()[7], continuum.images()[7], "PNG round trip is lossless");
        // 21 files at 5% steps.
        assert_eq!(loaded.len(), 21);
        assert!((loaded.levels()[1] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn load_continuum_rejects_empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_continuum(dir.path(), None).is_err());
    }

    #[test]
    fn seven_level_subset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let full = synth_continuum(21, 5, 48).unwrap();
        let keep = [0.0, 0.2, 0.3, 0.5, 0.7, 0.8, 1.0];
        for (level, img) in full.levels().iter().zip(full.images()) {
            if keep.iter().any(|k| (k - level).abs() < 1e-9) {
                img.save(dir.path().join(format!(
                    "face_pct{:03}.png",
                    (level * 100.0).round() as u32
                )))
                .unwrap();
            }
        }
        let loaded = load_continuum(dir.path(), None).unwrap();
        assert_eq!(loaded.len(), 7);
        assert_eq!(loaded.levels()[1], 0.2);
    }
}
