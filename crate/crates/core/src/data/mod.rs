//! Datasets: labeled image folders, the synthetic shape generator, splits
//! and batching.

mod synthetic;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use synthetic::{generate_synthetic, render, ClassSpec, Rendered, ShapeKind, SyntheticSpec};

use crate::error::{Error, Result};
use crate::model::{encode_six_channel, Family};
use crate::netpbm::Image8;
use crate::tensor::Tensor;
use crate::train::{class_counts, Examples};

/// File name of the labels table inside a dataset folder.
pub const LABELS_FILE: &str = "labels.csv";
/// Suffix replacing `.ppm` for a sample's shape mask.
pub const MASK_SUFFIX: &str = ".mask.pgm";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown split {s:?}; expected train, val or test")))
    }
}

fn default_val() -> f64 {
    0.2
}
fn default_test() -> f64 {
    0.2
}

/// Shares of the validation and test splits; the rest is training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    #[serde(default = "default_val")]
    pub val: f64,
    #[serde(default = "default_test")]
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            val: default_val(),
            test: default_test(),
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        if self.val < 0.0 || self.test < 0.0 || self.val + self.test >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions val {} and test {} must be non-negative and leave training data",
                self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Split of sample `id`, derived from a hash of `(seed, id)`.
pub fn assign_split(seed: u64, id: &str, fractions: &SplitFractions) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
    if u < fractions.val {
        Split::Val
    } else if u < fractions.val + fractions.test {
        Split::Test
    } else {
        Split::Train
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3, H, W]` RGB in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub split: Split,
    /// Ground-truth object pixels, row-major, when known.
    pub mask: Option<Vec<bool>>,
    /// File the image was read from.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
}

impl Dataset {
    /// Checks labels against the class list and that all images share one
    /// shape.
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Validation("dataset has no classes".into()));
        }
        let k = class_names.len();
        if let Some(s) = samples.iter().find(|s| s.label >= k) {
            return Err(Error::Validation(format!(
                "sample {} has label {} outside 0..{k}",
                s.id, s.label
            )));
        }
        if let Some(first) = samples.first() {
            let shape = first.image.shape();
            if shape.len() != 3 || shape[0] != 3 {
                return Err(Error::dim(format!("sample {} is not a [3, H, W] image", first.id)));
            }
            if let Some(s) = samples.iter().find(|s| s.image.shape() != shape) {
                return Err(Error::dim(format!(
                    "sample {} has shape {:?}, expected {shape:?}",
                    s.id,
                    s.image.shape()
                )));
            }
        }
        Ok(Self { samples, class_names })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Side length of the (square) images, if any.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.shape()[1], s.image.shape()[2]))
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Largest over smallest class count across all samples.
    pub fn imbalance_ratio(&self) -> f64 {
        crate::train::imbalance_ratio(&self.labels(), self.num_classes())
    }

    /// Fails unless every class has a training sample.
    pub fn check_trainable(&self) -> Result<()> {
        let train: Vec<usize> = self.split(Split::Train).iter().map(|s| s.label).collect();
        let counts = class_counts(&train, self.num_classes());
        let missing: Vec<&str> = counts
            .iter()
            .zip(&self.class_names)
            .filter(|(c, _)| **c == 0)
            .map(|(_, n)| n.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Validation(format!(
                "classes without training samples: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }

    /// Model-ready batch of one split.
    pub fn examples(&self, split: Split, family: Family, norm: Option<&Normalization>) -> Result<Examples> {
        six_channel_pipeline(&self.split(split), family, norm)
    }

    /// Writes `<id>.ppm`, `<id>.mask.pgm` when a mask is known, and
    /// `labels.csv` into `dir`.
    pub fn write_folder(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.samples.par_iter().try_for_each(|s| -> Result<()> {
            Image8::from_tensor(&s.image)?.save(&dir.join(format!("{}.ppm", s.id)))?;
            if let Some(mask) = &s.mask {
                let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
                let data = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
                Image8::new(w, h, 1, data)?.save(&dir.join(format!("{}{MASK_SUFFIX}", s.id)))?;
            }
            Ok(())
        })?;
        let path = dir.join(LABELS_FILE);
        let mut out = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        out.write_record(["path", "label", "split"])
            .map_err(|e| csv_error(&path, e))?;
        for s in &self.samples {
            out.write_record([format!("{}.ppm", s.id), s.label.to_string(), s.split.to_string()])
                .map_err(|e| csv_error(&path, e))?;
        }
        out.flush().map_err(|e| Error::io(&path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    path: String,
    label: String,
    #[serde(default)]
    split: String,
}

/// Reads the P6 images listed in `labels_csv` (columns `path,label,split`,
/// paths relative to `root`).
///
/// Every malformed row is reported together. An empty split column is
/// filled by [`assign_split`] with seed 0. Masks next to the images are
/// picked up when present.
pub fn load_image_folder(root: &Path, labels_csv: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(labels_csv)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(labels_csv, io),
            other => Error::Format(format!("{}: {other:?}", labels_csv.display())),
        })?;
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for (i, rec) in reader.deserialize::<LabelRow>().enumerate() {
        let line = i + 2;
        match rec {
            Ok(r) => rows.push((line, r)),
            Err(e) => problems.push(format!("line {line}: {e}")),
        }
    }
    let loaded: Vec<std::result::Result<Sample, String>> = rows
        .par_iter()
        .map(|(line, r)| load_row(root, r).map_err(|e| format!("line {line}: {e}")))
        .collect();
    let mut samples = Vec::with_capacity(loaded.len());
    for l in loaded {
        match l {
            Ok(s) => samples.push(s),
            Err(e) => problems.push(e),
        }
    }
    if !problems.is_empty() {
        return Err(Error::MalformedRows {
            path: labels_csv.to_path_buf(),
            rows: problems,
        });
    }
    let k = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    Dataset::new(samples, (0..k).map(|c| c.to_string()).collect())
}

fn load_row(root: &Path, r: &LabelRow) -> Result<Sample> {
    let label: usize = r
        .label
        .parse()
        .map_err(|_| Error::Validation(format!("label {:?} is not a non-negative integer", r.label)))?;
    let path = root.join(&r.path);
    if !path.is_file() {
        return Err(Error::Missing(format!("image {} does not exist", path.display())));
    }
    let img = Image8::load(&path)?;
    if img.channels != 3 {
        return Err(Error::Format(format!("{} is not an RGB (P6) image", path.display())));
    }
    let id = r.path.strip_suffix(".ppm").unwrap_or(&r.path).to_owned();
    let split = if r.split.is_empty() {
        assign_split(0, &id, &SplitFractions::default())
    } else {
        r.split.parse()?
    };
    let mask_path = root.join(format!("{id}{MASK_SUFFIX}"));
    let mask = if mask_path.is_file() {
        let m = Image8::load(&mask_path)?;
        if (m.width, m.height, m.channels) != (img.width, img.height, 1) {
            return Err(Error::Format(format!(
                "mask {} does not match its image",
                mask_path.display()
            )));
        }
        Some(m.data.iter().map(|&v| v >= 128).collect())
    } else {
        None
    };
    Ok(Sample {
        id,
        image: img.to_tensor(),
        label,
        split,
        mask,
        path: Some(path),
    })
}

/// Per-channel standardization for three-channel inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

/// Stacks samples into a batch: six-channel encoded for B-cos families,
/// RGB (optionally standardized) otherwise.
pub fn six_channel_pipeline(samples: &[&Sample], family: Family, norm: Option<&Normalization>) -> Result<Examples> {
    let Some(first) = samples.first() else {
        return Err(Error::Validation("no samples to batch".into()));
    };
    let shape = first.image.shape().to_vec();
    let plane = shape[1] * shape[2];
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::dim(format!("sample {} has shape {:?}", s.id, s.image.shape())));
        }
        data.extend_from_slice(s.image.data());
    }
    let rgb = Tensor::new(vec![samples.len(), 3, shape[1], shape[2]], data)?;
    let labels = samples.iter().map(|s| s.label).collect();
    let images = if family.is_bcos() {
        if norm.is_some() {
            return Err(Error::Config(
                "normalization would break the complement structure of six-channel inputs".into(),
            ));
        }
        encode_six_channel(&rgb, true)?
    } else if let Some(n) = norm {
        n.validate()?;
        let mut t = rgb;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % 3;
            *v = (*v - n.mean[c]) / n.std[c];
        }
        t
    } else {
        rgb
    };
    Examples::new(images, labels)
}
