//! On-disk dataset format: manifest plus one PNG triple per sample.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/<id>.png   16-bit grayscale B-scan, intensity = value / 65535
//! <root>/layers/<id>.png   8-bit class ids
//! <root>/masks/<id>.png    8-bit, 0 or 255
//! ```
//!
//! The manifest records image geometry, `num_classes`, the choroid class id
//! and one entry per sample (file paths relative to the root, thickness,
//! train/test split). Everything is inspectable with stock image tools, and
//! real annotated data can be imported by writing the same layout.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{BScan, ChoroidMask, LayerLabelMap, Sample, Thickness, validate_sample};
use crate::phantom::{generate_phantom, PhantomConfig, PhantomError};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest parse error in {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest version {0} unsupported (expected {MANIFEST_VERSION})")]
    UnsupportedVersion(u32),
    #[error("duplicate sample id {0} in manifest")]
    DuplicateId(String),
    #[error("sample {id}: {message}")]
    BadSample { id: String, message: String },
    #[error("sample {id} is inconsistent: {violations:?}")]
    InvalidSample { id: String, violations: Vec<String> },
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub layers: String,
    pub mask: String,
    pub thickness: f64,
}

/// Ordered index of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
    pub choroid_class: u8,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|source| DatasetError::ManifestParse {
                path: path.to_path_buf(),
                source,
            })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(DatasetError::UnsupportedVersion(manifest.format_version));
        }
        let mut seen = std::collections::BTreeSet::new();
        for entry in &manifest.samples {
            if !seen.insert(entry.id.as_str()) {
                return Err(DatasetError::DuplicateId(entry.id.clone()));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_image_png(path: &Path, scan: &BScan) -> Result<(), DatasetError> {
    let (h, w) = (scan.height as u32, scan.width as u32);
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w, h);
    for ((r, c), &v) in scan.pixels.indexed_iter() {
        img.put_pixel(c as u32, r as u32, image::Luma([(v * 65535.0).round() as u16]));
    }
    save_png(path, image::DynamicImage::ImageLuma16(img))
}

fn write_labels_png(path: &Path, labels: &LayerLabelMap) -> Result<(), DatasetError> {
    let mut img =
        image::GrayImage::new(labels.width as u32, labels.height as u32);
    for ((r, c), &l) in labels.labels.indexed_iter() {
        img.put_pixel(c as u32, r as u32, image::Luma([l]));
    }
    save_png(path, image::DynamicImage::ImageLuma8(img))
}

fn write_mask_png(path: &Path, mask: &ChoroidMask) -> Result<(), DatasetError> {
    let mut img = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for ((r, c), &m) in mask.mask.indexed_iter() {
        img.put_pixel(c as u32, r as u32, image::Luma([if m == 1 { 255 } else { 0 }]));
    }
    save_png(path, image::DynamicImage::ImageLuma8(img))
}

fn save_png(path: &Path, img: image::DynamicImage) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut writer = BufWriter::new(file);
    img.write_to(&mut writer, image::ImageFormat::Png)
        .map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn load_png(path: &Path) -> Result<image::DynamicImage, DatasetError> {
    image::open(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Generates `n_train + n_test` phantoms, writes them under `out_dir` and
/// returns the manifest (also written to `out_dir/manifest.json`).
///
/// Sample indices `0..n_train` become the train split, the remainder the
/// test split; with phantoms drawn i.i.d. per index this is equivalent to a
/// random division and keeps regeneration byte-identical.
pub fn generate_dataset(
    config: &PhantomConfig,
    n_train: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    config.validate()?;
    for sub in ["images", "layers", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }

    let total = n_train + n_test;
    let entries: Vec<ManifestEntry> = (0..total)
        .into_par_iter()
        .map(|i| -> Result<ManifestEntry, DatasetError> {
            let sample = generate_phantom(config, i as u64)?;
            let id = sample.id.clone();
            let image = format!("images/{id}.png");
            let layers = format!("layers/{id}.png");
            let mask = format!("masks/{id}.png");
            write_image_png(&out_dir.join(&image), &sample.image)?;
            write_labels_png(&out_dir.join(&layers), &sample.layers)?;
            write_mask_png(&out_dir.join(&mask), &sample.choroid)?;
            Ok(ManifestEntry {
                id,
                split: if i < n_train { Split::Train } else { Split::Test },
                image,
                layers,
                mask,
                thickness: sample.thickness.0,
            })
        })
        .collect::<Result<_, _>>()?;

    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        height: config.height,
        width: config.width,
        num_classes: config.num_layers as u8,
        choroid_class: config.choroid_class,
        samples: entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Lazy reader over a dataset directory; yields validated samples in
/// manifest order.
pub struct DatasetReader {
    root: PathBuf,
    manifest: DatasetManifest,
    split: Option<Split>,
    cursor: usize,
}

impl DatasetReader {
    /// Opens `manifest_path` (either the manifest file itself or the
    /// dataset root directory).
    pub fn open(manifest_path: &Path) -> Result<Self, DatasetError> {
        let (root, file) = if manifest_path.is_dir() {
            (manifest_path.to_path_buf(), manifest_path.join(MANIFEST_FILE))
        } else {
            (
                manifest_path
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
                manifest_path.to_path_buf(),
            )
        };
        let manifest = DatasetManifest::load(&file)?;
        Ok(Self {
            root,
            manifest,
            split: None,
            cursor: 0,
        })
    }

    /// Restricts iteration to one split.
    pub fn split(mut self, split: Split) -> Self {
        self.split = Some(split);
        self
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn read_entry(&self, entry: &ManifestEntry) -> Result<Sample, DatasetError> {
        let bad = |message: String| DatasetError::BadSample {
            id: entry.id.clone(),
            message,
        };
        let (h, w) = (self.manifest.height, self.manifest.width);

        let img = load_png(&self.root.join(&entry.image))?.into_luma16();
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(bad(format!(
                "image is {}x{}, manifest says {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        let pixels = Array2::from_shape_fn((h, w), |(r, c)| {
            f64::from(img.get_pixel(c as u32, r as u32).0[0]) / 65535.0
        });

        let labels_img = load_png(&self.root.join(&entry.layers))?.into_luma8();
        if (labels_img.height() as usize, labels_img.width() as usize) != (h, w) {
            return Err(bad("layer map dimensions differ from manifest".into()));
        }
        let labels = Array2::from_shape_fn((h, w), |(r, c)| {
            labels_img.get_pixel(c as u32, r as u32).0[0]
        });

        let mask_img = load_png(&self.root.join(&entry.mask))?.into_luma8();
        if (mask_img.height() as usize, mask_img.width() as usize) != (h, w) {
            return Err(bad("mask dimensions differ from manifest".into()));
        }
        let mask = Array2::from_shape_fn((h, w), |(r, c)| {
            u8::from(mask_img.get_pixel(c as u32, r as u32).0[0] >= 128)
        });

        let sample = Sample {
            id: entry.id.clone(),
            image: BScan::new(pixels).map_err(|e| bad(e.to_string()))?,
            layers: LayerLabelMap::new(labels, self.manifest.num_classes)
                .map_err(|e| bad(e.to_string()))?,
            choroid: ChoroidMask::new(mask).map_err(|e| bad(e.to_string()))?,
            thickness: Thickness::new(entry.thickness).map_err(|e| bad(e.to_string()))?,
            choroid_class: self.manifest.choroid_class,
        };
        let violations = validate_sample(&sample);
        if !violations.is_empty() {
            return Err(DatasetError::InvalidSample {
                id: entry.id.clone(),
                violations,
            });
        }
        Ok(sample)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let entry = self.manifest.samples.get(self.cursor)?.clone();
            self.cursor += 1;
            if self.split.is_none_or(|s| s == entry.split) {
                return Some(self.read_entry(&entry));
            }
        }
    }
}

/// Reads an entire split into memory, failing on the first bad sample.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<Sample>, DatasetError> {
    DatasetReader::open(root)?.split(split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_phantom;

    fn small_config() -> PhantomConfig {
        PhantomConfig {
            height: 32,
            width: 32,
            num_layers: 4,
            choroid_class: 2,
            min_band_thickness: 2,
            choroid_thickness_range: (6.0, 12.0),
            boundary_smoothness: 9,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn split_counts_and_unique_ids() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_config(), 4, 2, dir.path()).unwrap();
        assert_eq!(manifest.samples.len(), 6);
        assert_eq!(manifest.entries(Split::Train).count(), 4);
        assert_eq!(manifest.entries(Split::Test).count(), 2);
        let ids: std::collections::BTreeSet<_> =
            manifest.samples.iter().map(|e| &e.id).collect();
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn regeneration_is_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&small_config(), 3, 1, dir_a.path()).unwrap();
        let mb = generate_dataset(&small_config(), 3, 1, dir_b.path()).unwrap();
        assert_eq!(ma, mb);
        for entry in &ma.samples {
            for rel in [&entry.image, &entry.layers, &entry.mask] {
                let a = std::fs::read(dir_a.path().join(rel)).unwrap();
                let b = std::fs::read(dir_b.path().join(rel)).unwrap();
                assert_eq!(a, b, "{rel} differs between regenerations");
            }
        }
        let a = std::fs::read(dir_a.path().join(MANIFEST_FILE)).unwrap();
        let b = std::fs::read(dir_b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn round_trip_within_quantization() {
        let config = small_config();
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&config, 2, 1, dir.path()).unwrap();
        let read: Vec<Sample> = DatasetReader::open(dir.path())
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(read.len(), 3);
        for (i, loaded) in read.iter().enumerate() {
            let original = generate_phantom(&config, i as u64).unwrap();
            assert_eq!(loaded.layers, original.layers);
            assert_eq!(loaded.choroid, original.choroid);
            assert_eq!(loaded.thickness.0, original.thickness.0);
            let max_err = loaded
                .image
                .pixels
                .iter()
                .zip(original.image.pixels.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 0.5 / 65535.0 + 1e-12, "max err {max_err}");
            assert!(validate_sample(loaded).is_empty());
        }
    }

    #[test]
    fn missing_file_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_config(), 2, 0, dir.path()).unwrap();
        let victim = &manifest.samples[1];
        std::fs::remove_file(dir.path().join(&victim.image)).unwrap();
        let result: Result<Vec<Sample>, _> =
            DatasetReader::open(dir.path()).unwrap().collect();
        let err = result.unwrap_err().to_string();
        assert!(err.contains("phantom-00001"), "{err}");
    }

    #[test]
    fn out_of_range_label_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(&small_config(), 1, 0, dir.path()).unwrap();
        // Rewrite the layer map with an id >= num_classes.
        let path = dir.path().join(&manifest.samples[0].layers);
        let mut img = image::open(&path).unwrap().into_luma8();
        img.put_pixel(0, 0, image::Luma([250]));
        img.save(&path).unwrap();
        let result: Result<Vec<Sample>, _> =
            DatasetReader::open(dir.path()).unwrap().collect();
        let err = result.unwrap_err().to_string();
        assert!(err.contains("phantom-00000"), "{err}");
        assert!(err.contains("250"), "{err}");
    }
}
