//! Background-driven intervention.
//!
//! An image's background is the image with its object box blacked out. Each
//! sample in a batch is paired with the background of a randomly permuted
//! batch member, the two encodings are blended, and the blend is classified
//! against the original sample's label.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array, Array3, ArrayView, Dimension};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{BBox, LabeledImage};
use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::model::{classify_feature, encode_feature_map, ModelParams};
use crate::seed::rng_for;

/// Where object boxes come from.
#[derive(Clone, Debug, PartialEq)]
pub enum BackgroundExtractor {
    /// Use the exact box stored with each image.
    OracleMask,
    /// Look boxes up by image id, as produced by an external detector.
    BboxFile(HashMap<usize, BBox>),
}

impl BackgroundExtractor {
    /// Parses a box table: one `id x1 y1 x2 y2` line per image. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn parse_bbox_table(text: &str) -> Result<Self> {
        let mut table = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidArgument(format!("bbox line {}: {e}", lineno + 1)))?;
            let [id, x1, y1, x2, y2] = fields[..] else {
                return Err(Error::InvalidArgument(format!(
                    "bbox line {} needs five integers, found {}",
                    lineno + 1,
                    fields.len()
                )));
            };
            if x1 > x2 || y1 > y2 {
                return Err(Error::InvalidArgument(format!(
                    "bbox line {}: corners out of order",
                    lineno + 1
                )));
            }
            table.insert(id, BBox { x1, y1, x2, y2 });
        }
        Ok(BackgroundExtractor::BboxFile(table))
    }

    pub fn load_bbox_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_bbox_table(&text)
    }

    pub fn bbox_for(&self, image_id: usize, image: &LabeledImage) -> Result<BBox> {
        match self {
            BackgroundExtractor::OracleMask => Ok(image.bbox),
            BackgroundExtractor::BboxFile(table) => {
                table.get(&image_id).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("no bbox entry for image {image_id}"))
                })
            }
        }
    }

    pub fn extract(&self, image_id: usize, image: &LabeledImage) -> Result<Array3<f64>> {
        Ok(mask_box(&image.to_f64(), self.bbox_for(image_id, image)?))
    }
}

/// Zeroes every pixel inside the inclusive box and keeps the rest.
pub fn mask_box(pixels: &Array3<f64>, bbox: BBox) -> Array3<f64> {
    let mut out = pixels.clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        if bbox.contains(x, y) {
            *v = 0.0;
        }
    }
    out
}

pub fn extract_background(image: &LabeledImage, bbox: BBox) -> Array3<f64> {
    mask_box(&image.to_f64(), bbox)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterventionLevel {
    /// Blend the fc1 feature vectors.
    #[serde(rename = "f")]
    Feature,
    /// Blend the post-conv feature maps, then run the local encoder tail.
    #[serde(rename = "fm")]
    FeatureMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundSource {
    BatchShuffle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub level: InterventionLevel,
    pub background_source: BackgroundSource,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            enabled: true,
            alpha: 0.7,
            level: InterventionLevel::FeatureMap,
            background_source: BackgroundSource::BatchShuffle,
        }
    }
}

impl InterventionConfig {
    pub fn disabled() -> Self {
        InterventionConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Uniform random permutation of `0..n`, deterministic in `seed`.
pub fn batch_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, &[0xba5e]));
    perm
}

/// Backgrounds of a random permutation of the batch. `ids` are the image
/// ids the extractor uses for box lookup.
pub fn sample_backgrounds(
    batch: &[&LabeledImage],
    ids: &[usize],
    extractor: &BackgroundExtractor,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "background sampling needs a batch of at least 2, got {}",
            batch.len()
        )));
    }
    if ids.len() != batch.len() {
        return Err(Error::ShapeMismatch("one id per image is required".into()));
    }
    batch_permutation(batch.len(), seed)
        .into_iter()
        .map(|j| extractor.extract(ids[j], batch[j]))
        .collect()
}

/// `alpha * f_i + (1 - alpha) * f_b`, elementwise.
pub fn mix_features<D: Dimension>(
    f_i: ArrayView<f64, D>,
    f_b: ArrayView<f64, D>,
    alpha: f64,
) -> Result<Array<f64, D>> {
    check_alpha(alpha)?;
    if f_i.shape() != f_b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "cannot mix {:?} with {:?}",
            f_i.shape(),
            f_b.shape()
        )));
    }
    let beta = 1.0 - alpha;
    let mut out = f_i.to_owned();
    out.zip_mut_with(&f_b, |a, &b| *a = alpha * *a + beta * b);
    Ok(out)
}

/// A blended batch at either tap.
#[derive(Clone, Debug, PartialEq)]
pub enum Interventional {
    Feature(ndarray::Array2<f64>),
    FeatureMap(ndarray::Array4<f64>),
}

/// Mean cross-entropy of the local classifier on interventional inputs.
/// Feature maps are first encoded by the local encoder tail.
pub fn intervention_loss(
    local: &ModelParams,
    f_inv: &Interventional,
    labels: &[usize],
) -> Result<f64> {
    let logits = match f_inv {
        Interventional::Feature(f) => classify_feature(local, f.view())?,
        Interventional::FeatureMap(m) => {
            let f = encode_feature_map(local, m.view())?;
            classify_feature(local, f.view())?
        }
    };
    Ok(cross_entropy(logits.view(), labels)?.0)
}
