//! Dataset ingestion, fixed train/validation/test splits, field-of-view
//! masks and persistence of probability maps.
//!
//! Layout under a dataset root:
//!
//! ```text
//! <root>/images/*.{tif,ppm,jpg,png,gif}
//! <root>/truth/*
//! <root>/mask/*          (optional except for DRIVE)
//! ```
//!
//! DRIVE may alternatively be laid out as `<root>/training/...` and
//! `<root>/test/...`, each with the three sub-directories above, matching
//! the archive as distributed.

mod fov;
mod probmap;

pub use fov::{derive_fov, DEFAULT_FOV_THRESHOLD};
pub use probmap::{load_probability_map, save_binary_map, save_probability_map};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::{resize_bilinear, resize_nearest};
use crate::tensor::{BinaryMap, Map, Tensor};

const IMAGE_EXTENSIONS: &[&str] = &["tif", "tiff", "ppm", "pgm", "jpg", "jpeg", "png", "gif"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "DRIVE")]
    Drive,
    #[serde(rename = "STARE")]
    Stare,
    #[serde(rename = "CHASE_DB1")]
    ChaseDb1,
    #[serde(rename = "SYNTHETIC")]
    Synthetic,
}

impl Dataset {
    pub const ALL: [Dataset; 4] = [
        Dataset::Drive,
        Dataset::Stare,
        Dataset::ChaseDb1,
        Dataset::Synthetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Drive => "DRIVE",
            Dataset::Stare => "STARE",
            Dataset::ChaseDb1 => "CHASE_DB1",
            Dataset::Synthetic => "SYNTHETIC",
        }
    }

    /// `(train, val, test)` sizes. `None` for the synthetic corpus, whose
    /// split depends on how many samples were generated.
    pub fn split_sizes(self) -> Option<(usize, usize, usize)> {
        match self {
            Dataset::Drive => Some((15, 5, 20)),
            Dataset::Stare => Some((7, 3, 10)),
            Dataset::ChaseDb1 => Some((15, 5, 8)),
            Dataset::Synthetic => None,
        }
    }

    /// Green channel only by default (STARE).
    pub fn default_green_only(self) -> bool {
        matches!(self, Dataset::Stare)
    }

    pub fn default_rescale(self) -> f64 {
        match self {
            Dataset::ChaseDb1 => 0.5,
            _ => 1.0,
        }
    }

    fn requires_mask(self) -> bool {
        matches!(self, Dataset::Drive)
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "DRIVE" => Ok(Dataset::Drive),
            "STARE" => Ok(Dataset::Stare),
            "CHASE_DB1" | "CHASEDB1" | "CHASE" => Ok(Dataset::ChaseDb1),
            "SYNTHETIC" | "SYNTH" => Ok(Dataset::Synthetic),
            _ => Err(Error::Config(format!("unknown dataset '{s}'"))),
        }
    }
}

/// Split sizes for a synthetic corpus of `n` samples: one sixth (at least
/// one) each for validation and test, the remainder for training.
pub fn synthetic_split_sizes(n: usize) -> Option<(usize, usize, usize)> {
    let k = (n / 6).max(1);
    (n > 2 * k).then(|| (n - 2 * k, k, k))
}

/// One fundus image with its vessel truth and field-of-view mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusSample {
    pub id: String,
    /// `C×H×W`, `C ∈ {1, 3}`, values in `[0, 1]`.
    pub image: Tensor,
    pub truth: BinaryMap,
    pub fov: BinaryMap,
    pub source: Dataset,
}

impl FundusSample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// Checks shape agreement and value ranges.
    pub fn validate(&self) -> Result<()> {
        let dims = (self.image.height, self.image.width);
        if self.truth.dims() != dims || self.fov.dims() != dims {
            return Err(Error::Structure {
                id: self.id.clone(),
                message: format!(
                    "image {}x{}, truth {}x{}, fov {}x{}",
                    dims.0,
                    dims.1,
                    self.truth.height,
                    self.truth.width,
                    self.fov.height,
                    self.fov.width
                ),
            });
        }
        if !matches!(self.image.channels, 1 | 3) {
            return Err(Error::Structure {
                id: self.id.clone(),
                message: format!("{} channels, expected 1 or 3", self.image.channels),
            });
        }
        if self.image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Structure {
                id: self.id.clone(),
                message: "image intensities outside [0, 1]".into(),
            });
        }
        Ok(())
    }

    /// Number of vessel pixels lying outside the field of view.
    pub fn vessels_outside_fov(&self) -> usize {
        self.truth
            .data
            .iter()
            .zip(&self.fov.data)
            .filter(|(&t, &f)| t && !f)
            .count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub dataset: Option<Dataset>,
    pub train: Vec<FundusSample>,
    pub val: Vec<FundusSample>,
    pub test: Vec<FundusSample>,
    /// Non-fatal findings made while loading.
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    pub fn all_ids(&self) -> impl Iterator<Item = &str> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(|s| s.id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Keep only the green channel. `None` uses the dataset default.
    pub green_only: Option<bool>,
    /// Spatial rescale factor. `None` uses the dataset default.
    pub rescale: Option<f64>,
    /// Relative intensity threshold for derived FOV masks.
    pub fov_threshold: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            green_only: None,
            rescale: None,
            fov_threshold: DEFAULT_FOV_THRESHOLD,
        }
    }
}

impl LoadOptions {
    pub fn resolved_green_only(&self, dataset: Dataset) -> bool {
        self.green_only.unwrap_or(dataset.default_green_only())
    }

    pub fn resolved_rescale(&self, dataset: Dataset) -> f64 {
        self.rescale.unwrap_or(dataset.default_rescale())
    }
}

/// Loads `dataset` from `root` and applies its fixed split.
///
/// "First" and "rest" follow ascending lexicographic file-name order.
pub fn load_dataset(root: &Path, dataset: Dataset, options: &LoadOptions) -> Result<DatasetSplit> {
    let training = root.join("training");
    let test = root.join("test");
    let (pool, test_files) = if training.is_dir() && test.is_dir() {
        (list_triples(&training, dataset)?, list_triples(&test, dataset)?)
    } else {
        let mut all = list_triples(root, dataset)?;
        let pool_len = match dataset.split_sizes() {
            Some((tr, va, te)) => {
                if all.len() != tr + va + te {
                    return Err(Error::Layout {
                        root: root.to_path_buf(),
                        message: format!(
                            "{} expects {} images, found {}",
                            dataset,
                            tr + va + te,
                            all.len()
                        ),
                    });
                }
                tr + va
            }
            None => {
                let (tr, va, _) = synthetic_split_sizes(all.len()).ok_or_else(|| Error::Layout {
                    root: root.to_path_buf(),
                    message: format!("need at least 3 images, found {}", all.len()),
                })?;
                tr + va
            }
        };
        let rest = all.split_off(pool_len);
        (all, rest)
    };

    let (n_train, n_val) = match dataset.split_sizes() {
        Some((tr, va, te)) => {
            if pool.len() != tr + va || test_files.len() != te {
                return Err(Error::Layout {
                    root: root.to_path_buf(),
                    message: format!(
                        "{} expects {} training and {} test images, found {} and {}",
                        dataset,
                        tr + va,
                        te,
                        pool.len(),
                        test_files.len()
                    ),
                });
            }
            (tr, va)
        }
        None => {
            let total = pool.len() + test_files.len();
            let (tr, va, _) = synthetic_split_sizes(total).ok_or_else(|| Error::Layout {
                root: root.to_path_buf(),
                message: format!("need at least 3 images, found {total}"),
            })?;
            (tr.min(pool.len()), va.min(pool.len().saturating_sub(tr)))
        }
    };

    let mut split = DatasetSplit {
        dataset: Some(dataset),
        ..Default::default()
    };
    for (i, triple) in pool.iter().enumerate() {
        let sample = load_sample(triple, dataset, options, &mut split.warnings)?;
        if i < n_train {
            split.train.push(sample);
        } else if i < n_train + n_val {
            split.val.push(sample);
        }
    }
    for triple in &test_files {
        let sample = load_sample(triple, dataset, options, &mut split.warnings)?;
        split.test.push(sample);
    }
    Ok(split)
}

#[derive(Debug, Clone)]
struct FileTriple {
    id: String,
    image: PathBuf,
    truth: PathBuf,
    mask: Option<PathBuf>,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Key used to pair an image with its truth and mask files: the leading
/// digit run when the stem starts with a digit (`21_training` → `21`),
/// otherwise the whole stem (`im0001`, `Image_01L`).
fn pairing_key(image: &Path) -> String {
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let digits: String = stem.chars().take_while(|c| c.is_ascii_digit()).collect();
    if digits.is_empty() {
        stem.to_string()
    } else {
        digits
    }
}

fn find_partner<'a>(key: &str, candidates: &'a [PathBuf]) -> Option<&'a PathBuf> {
    candidates.iter().find(|p| {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        name.strip_prefix(key)
            .and_then(|rest| rest.chars().next())
            .is_some_and(|c| !c.is_ascii_alphanumeric())
    })
}

fn list_triples(root: &Path, dataset: Dataset) -> Result<Vec<FileTriple>> {
    let image_dir = root.join("images");
    let truth_dir = root.join("truth");
    let mask_dir = root.join("mask");
    let mut missing = Vec::new();
    if !image_dir.is_dir() {
        missing.push(image_dir.clone());
    }
    if !truth_dir.is_dir() {
        missing.push(truth_dir.clone());
    }
    if dataset.requires_mask() && !mask_dir.is_dir() {
        missing.push(mask_dir.clone());
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles { paths: missing });
    }
    let images = list_images(&image_dir)?;
    if images.is_empty() {
        return Err(Error::MissingFiles {
            paths: vec![image_dir.join("*")],
        });
    }
    let truths = list_images(&truth_dir)?;
    let masks = if mask_dir.is_dir() {
        Some(list_images(&mask_dir)?)
    } else {
        None
    };

    let mut triples = Vec::with_capacity(images.len());
    for image in images {
        let key = pairing_key(&image);
        let truth = find_partner(&key, &truths);
        let mask = masks.as_ref().map(|m| find_partner(&key, m));
        if truth.is_none() {
            missing.push(truth_dir.join(format!("{key}*")));
        }
        if let Some(None) = mask {
            missing.push(mask_dir.join(format!("{key}*")));
        }
        if let Some(truth) = truth {
            triples.push(FileTriple {
                id: image
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(&key)
                    .to_string(),
                truth: truth.clone(),
                mask: mask.flatten().cloned(),
                image,
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles { paths: missing });
    }
    Ok(triples)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads an image as a `[0, 1]` tensor with 1 or 3 channels.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let raw = rgb.as_raw();
        Ok(Tensor::from_fn(3, h, w, |c, y, x| {
            (raw[(y * w + x) * 3 + c] as f64).clamp(0.0, 1.0)
        }))
    } else {
        let luma = img.to_luma32f();
        let raw = luma.as_raw();
        Ok(Tensor::from_fn(1, h, w, |_, y, x| {
            (raw[y * w + x] as f64).clamp(0.0, 1.0)
        }))
    }
}

/// Reads a label image; a pixel is set when its luminance exceeds one half.
pub fn read_binary(path: &Path) -> Result<BinaryMap> {
    let luma = decode(path)?.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    Map::from_vec(h, w, luma.as_raw().iter().map(|&v| v > 127).collect())
}

fn load_sample(
    files: &FileTriple,
    dataset: Dataset,
    options: &LoadOptions,
    warnings: &mut Vec<String>,
) -> Result<FundusSample> {
    let mut image = read_image(&files.image)?;
    let mut truth = read_binary(&files.truth)?;
    let mut fov = files.mask.as_deref().map(read_binary).transpose()?;

    let check = |m: &BinaryMap, what: &str, image: &Tensor| {
        if m.dims() != (image.height, image.width) {
            Err(Error::Structure {
                id: files.id.clone(),
                message: format!(
                    "{what} is {}x{} but image is {}x{}",
                    m.height, m.width, image.height, image.width
                ),
            })
        } else {
            Ok(())
        }
    };
    check(&truth, "truth", &image)?;
    if let Some(f) = &fov {
        check(f, "mask", &image)?;
    }

    if options.resolved_green_only(dataset) && image.channels == 3 {
        image = Tensor::from(image.channel_map(1));
    }
    let factor = options.resolved_rescale(dataset);
    if factor <= 0.0 || !factor.is_finite() {
        return Err(Error::Config(format!("rescale factor {factor} must be positive")));
    }
    if factor != 1.0 {
        let h = ((image.height as f64 * factor).round() as usize).max(1);
        let w = ((image.width as f64 * factor).round() as usize).max(1);
        image = resize_bilinear(&image, h, w);
        truth = resize_nearest(&truth, h, w);
        fov = fov.map(|f| resize_nearest(&f, h, w));
    }
    let fov = match fov {
        Some(f) => f,
        None => derive_fov(&image, options.fov_threshold, 1)?,
    };

    let sample = FundusSample {
        id: files.id.clone(),
        image,
        truth,
        fov,
        source: dataset,
    };
    sample.validate()?;
    if dataset == Dataset::Drive {
        let outside = sample.vessels_outside_fov();
        if outside > 0 {
            warnings.push(format!(
                "{}: {outside} vessel pixels lie outside the provided FOV mask",
                sample.id
            ));
        }
    }
    Ok(sample)
}
