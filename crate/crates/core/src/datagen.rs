//! Synthetic colour-background digits with a controllable background/label
//! correlation, exact object masks, and Dirichlet client partitions.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Fraction of a glyph's peak intensity above which a pixel is object.
pub const MASK_THRESHOLD: f64 = 0.3;

/// Ten well-separated mid-luminance colours; digits are drawn in white on top.
pub const DEFAULT_PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [0, 128, 128],
    [128, 0, 0],
    [128, 128, 0],
    [0, 0, 128],
    [170, 110, 40],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    OodTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// (height, width)
    pub image_size: (usize, usize),
    pub palette: Vec<[u8; 3]>,
    /// Probability that a training image gets its class colour.
    pub correlation_strength: f64,
    pub split: Split,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(image_size: usize, correlation_strength: f64, split: Split, seed: u64) -> Self {
        DatasetSpec {
            num_classes: 10,
            image_size: (image_size, image_size),
            palette: DEFAULT_PALETTE.to_vec(),
            correlation_strength,
            split,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument(
                "num_classes must be positive".into(),
            ));
        }
        if self.palette.len() < self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "palette has {} colours but there are {} classes",
                self.palette.len(),
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.correlation_strength) {
            return Err(Error::InvalidArgument(format!(
                "correlation strength {} outside [0, 1]",
                self.correlation_strength
            )));
        }
        Ok(())
    }
}

/// Inclusive pixel box: columns `x1..=x2`, rows `y1..=y2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x1..=self.x2).contains(&x) && (self.y1..=self.y2).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x2 - self.x1 + 1) * (self.y2 - self.y1 + 1)
    }

    /// Tight box around the `true` cells of a `[height, width]` mask.
    pub fn of_mask(mask: &Array2<bool>) -> Option<BBox> {
        let mut found: Option<BBox> = None;
        for ((y, x), &m) in mask.indexed_iter() {
            if !m {
                continue;
            }
            found = Some(match found {
                None => BBox {
                    x1: x,
                    y1: y,
                    x2: x,
                    y2: y,
                },
                Some(b) => BBox {
                    x1: b.x1.min(x),
                    y1: b.y1.min(y),
                    x2: b.x2.max(x),
                    y2: b.y2.max(y),
                },
            });
        }
        found
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[height, width, 3]`, 8-bit; intensity is `value / 255`.
    pub pixels: Array3<u8>,
    pub label: usize,
    /// `[height, width]`, true on object pixels.
    pub object_mask: Array2<bool>,
    pub bbox: BBox,
    pub background_color_id: usize,
}

impl LabeledImage {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn to_f64(&self) -> Array3<f64> {
        self.pixels.mapv(|v| f64::from(v) / 255.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.label).collect()
    }

    /// Stacks the selected images into a `[batch, height, width, 3]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Array4<f64> {
        stack_images(indices.iter().map(|&i| &self.images[i]))
    }
}

pub fn stack_images<'a>(images: impl ExactSizeIterator<Item = &'a LabeledImage>) -> Array4<f64> {
    let n = images.len();
    let mut out: Option<Array4<f64>> = None;
    for (b, img) in images.enumerate() {
        let dst = out.get_or_insert_with(|| Array4::zeros((n, img.height(), img.width(), 3)));
        dst.index_axis_mut(ndarray::Axis(0), b)
            .zip_mut_with(&img.pixels, |d, &v| *d = f64::from(v) / 255.0);
    }
    out.unwrap_or_else(|| Array4::zeros((0, 0, 0, 3)))
}

/// Fraction of images whose background colour index equals their label.
pub fn background_label_agreement(images: &[LabeledImage]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let hits = images
        .iter()
        .filter(|i| i.background_color_id == i.label)
        .count();
    hits as f64 / images.len() as f64
}

/// Grayscale digit glyphs in `[0, 1]`, row-major `[height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitCorpus {
    pub height: usize,
    pub width: usize,
    pub glyphs: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
}

impl DigitCorpus {
    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }
}

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f64 / steps as f64;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke templates in a unit box (x right, y down); two styles per digit.
fn digit_strokes(digit: usize, style: usize) -> Vec<Stroke> {
    let alt = style % 2 == 1;
    match digit {
        0 if alt => vec![ellipse(0.5, 0.5, 0.38, 0.5, 0.0, 2.0 * PI, 16)],
        0 => vec![ellipse(0.5, 0.5, 0.48, 0.48, 0.0, 2.0 * PI, 16)],
        1 if alt => vec![
            vec![(0.2, 0.25), (0.55, 0.0), (0.55, 1.0)],
            vec![(0.2, 1.0), (0.85, 1.0)],
        ],
        1 => vec![vec![(0.5, 0.0), (0.5, 1.0)]],
        2 if alt => vec![
            ellipse(0.5, 0.3, 0.42, 0.3, PI, 2.15 * PI, 8),
            vec![(0.85, 0.55), (0.05, 1.0), (0.95, 1.0)],
        ],
        2 => vec![vec![
            (0.05, 0.3),
            (0.2, 0.05),
            (0.55, 0.0),
            (0.88, 0.12),
            (0.9, 0.35),
            (0.05, 1.0),
            (0.95, 1.0),
        ]],
        3 if alt => vec![
            vec![(0.05, 0.0), (0.95, 0.0), (0.4, 0.42)],
            ellipse(0.5, 0.7, 0.45, 0.3, -0.6 * PI, 0.85 * PI, 10),
        ],
        3 => vec![
            ellipse(0.48, 0.25, 0.42, 0.25, -PI, 0.5 * PI, 10),
            ellipse(0.48, 0.75, 0.47, 0.25, -0.5 * PI, PI, 10),
        ],
        4 if alt => vec![
            vec![(0.15, 0.0), (0.05, 0.6), (1.0, 0.6)],
            vec![(0.7, 0.25), (0.7, 1.0)],
        ],
        4 => vec![vec![(0.7, 1.0), (0.7, 0.0), (0.0, 0.68), (1.0, 0.68)]],
        5 if alt => vec![
            vec![(0.9, 0.0), (0.2, 0.0), (0.15, 0.42)],
            ellipse(0.5, 0.68, 0.45, 0.32, -0.8 * PI, 0.8 * PI, 10),
        ],
        5 => vec![vec![
            (0.9, 0.0),
            (0.15, 0.0),
            (0.1, 0.45),
            (0.6, 0.4),
            (0.95, 0.6),
            (0.9, 0.88),
            (0.5, 1.0),
            (0.05, 0.9),
        ]],
        6 if alt => vec![
            vec![(0.75, 0.0), (0.1, 0.65)],
            ellipse(0.5, 0.72, 0.42, 0.28, 0.0, 2.0 * PI, 12),
        ],
        6 => vec![vec![
            (0.85, 0.05),
            (0.4, 0.2),
            (0.08, 0.6),
            (0.2, 0.95),
            (0.6, 1.0),
            (0.9, 0.8),
            (0.8, 0.55),
            (0.45, 0.5),
            (0.1, 0.65),
        ]],
        7 if alt => vec![
            vec![(0.05, 0.0), (0.95, 0.0), (0.35, 1.0)],
            vec![(0.3, 0.5), (0.85, 0.5)],
        ],
        7 => vec![vec![(0.05, 0.1), (0.05, 0.0), (0.95, 0.0), (0.45, 1.0)]],
        8 if alt => vec![
            ellipse(0.5, 0.25, 0.3, 0.25, 0.0, 2.0 * PI, 12),
            ellipse(0.5, 0.74, 0.45, 0.26, 0.0, 2.0 * PI, 12),
        ],
        8 => vec![
            ellipse(0.5, 0.27, 0.38, 0.27, 0.0, 2.0 * PI, 12),
            ellipse(0.5, 0.74, 0.42, 0.26, 0.0, 2.0 * PI, 12),
        ],
        9 if alt => vec![
            ellipse(0.5, 0.28, 0.42, 0.28, 0.0, 2.0 * PI, 12),
            vec![(0.92, 0.3), (0.4, 1.0)],
        ],
        _ => vec![
            ellipse(0.5, 0.3, 0.42, 0.3, 0.0, 2.0 * PI, 12),
            vec![(0.92, 0.3), (0.88, 1.0)],
        ],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Renders one randomly jittered glyph of `digit` onto a `height x width` canvas.
pub fn render_digit(digit: usize, height: usize, width: usize, rng: &mut impl Rng) -> Array2<f64> {
    let size = height.min(width) as f64;
    let style = rng.random_range(0..2usize);
    let glyph_h = size * rng.random_range(0.55..0.75);
    let glyph_w = glyph_h * rng.random_range(0.55..0.75);
    let angle: f64 = rng.random_range(-0.3..0.3);
    let shear: f64 = rng.random_range(-0.25..0.25);
    let half_width = rng.random_range(0.45..0.8) * (size / 12.0).max(0.75);
    let peak = rng.random_range(0.75..1.0);

    let margin = 0.5 + half_width;
    let reach = 0.5 * (glyph_h.powi(2) + glyph_w.powi(2)).sqrt();
    let span = |extent: f64| {
        let lo = (margin + reach).min(extent / 2.0);
        let hi = (extent - margin - reach).max(extent / 2.0);
        (lo, hi)
    };
    let (cx_lo, cx_hi) = span(width as f64);
    let (cy_lo, cy_hi) = span(height as f64);
    let cx = if cx_hi > cx_lo {
        rng.random_range(cx_lo..cx_hi)
    } else {
        cx_lo
    };
    let cy = if cy_hi > cy_lo {
        rng.random_range(cy_lo..cy_hi)
    } else {
        cy_lo
    };

    let (sin, cos) = angle.sin_cos();
    let place = |(u, v): (f64, f64)| {
        let x = (u - 0.5) * glyph_w;
        let y = (v - 0.5) * glyph_h;
        let x = x + shear * y;
        (cx + cos * x - sin * y, cy + sin * x + cos * y)
    };
    let segments: Vec<((f64, f64), (f64, f64))> = digit_strokes(digit, style)
        .into_iter()
        .flat_map(|stroke| {
            let pts: Vec<_> = stroke.into_iter().map(place).collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();

    Array2::from_shape_fn((height, width), |(y, x)| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        let d = segments
            .iter()
            .map(|&(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min);
        peak * (half_width + 0.5 - d).clamp(0.0, 1.0)
    })
}

/// A balanced corpus of `count` synthetic digit glyphs (label `i % 10`).
pub fn synthetic_digits(count: usize, height: usize, width: usize, seed: u64) -> DigitCorpus {
    let mut rng = rng_for(seed, &[0xd161]);
    let labels: Vec<usize> = (0..count).map(|i| i % 10).collect();
    let glyphs = labels
        .iter()
        .map(|&d| render_digit(d, height, width, &mut rng))
        .collect();
    DigitCorpus {
        height,
        width,
        glyphs,
        labels,
    }
}

/// Renders each corpus glyph in white over a solid palette background.
pub fn generate_dataset(spec: &DatasetSpec, corpus: &DigitCorpus) -> Result<Dataset> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("digit corpus is empty".into()));
    }
    if (corpus.height, corpus.width) != spec.image_size {
        return Err(Error::ShapeMismatch(format!(
            "corpus glyphs are {}x{} but images must be {:?}",
            corpus.height, corpus.width, spec.image_size
        )));
    }
    if let Some(&bad) = corpus.labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "corpus label {bad} outside [0, {})",
            spec.num_classes
        )));
    }

    let split_tag = match spec.split {
        Split::Train => 1,
        Split::OodTest => 2,
    };
    let mut rng = rng_for(spec.seed, &[0xc010, split_tag]);
    let palette_len = spec.palette.len();
    let mut images = Vec::with_capacity(corpus.len());
    for (glyph, &label) in corpus.glyphs.iter().zip(&corpus.labels) {
        let background_color_id = match spec.split {
            Split::OodTest => rng.random_range(0..palette_len),
            Split::Train => {
                if rng.random::<f64>() < spec.correlation_strength {
                    label
                } else {
                    let other = rng.random_range(0..palette_len - 1);
                    if other >= label {
                        other + 1
                    } else {
                        other
                    }
                }
            }
        };
        images.push(compose(
            glyph,
            label,
            spec.palette[background_color_id],
            background_color_id,
        )?);
    }
    Ok(Dataset {
        spec: spec.clone(),
        images,
    })
}

fn compose(
    glyph: &Array2<f64>,
    label: usize,
    color: [u8; 3],
    color_id: usize,
) -> Result<LabeledImage> {
    let peak = glyph.iter().copied().fold(0.0, f64::max);
    let object_mask = glyph.mapv(|g| peak > 0.0 && g > MASK_THRESHOLD * peak);
    let bbox = BBox::of_mask(&object_mask)
        .ok_or_else(|| Error::InvalidArgument("glyph has no object pixels".into()))?;
    let (h, w) = glyph.dim();
    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        if object_mask[[y, x]] {
            let g = glyph[[y, x]];
            let bg = f64::from(color[c]);
            (g * 255.0 + (1.0 - g) * bg).round().clamp(0.0, 255.0) as u8
        } else {
            color[c]
        }
    });
    Ok(LabeledImage {
        pixels,
        label,
        object_mask,
        bbox,
        background_color_id: color_id,
    })
}

/// Client id -> sorted example indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub assignments: Vec<Vec<usize>>,
    pub beta: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl ClientPartition {
    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Checks disjointness and full coverage of `0..num_examples`.
    pub fn validate(&self, num_examples: usize) -> Result<()> {
        if self.assignments.len() != self.num_clients {
            return Err(Error::Partition(format!(
                "{} assignment lists for {} clients",
                self.assignments.len(),
                self.num_clients
            )));
        }
        let mut seen = vec![false; num_examples];
        for (client, idx) in self.assignments.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Partition(format!("client {client} has no examples")));
            }
            for &i in idx {
                if i >= num_examples || seen[i] {
                    return Err(Error::Partition(format!(
                        "index {i} of client {client} is out of range or assigned twice"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Partition("some examples are not assigned".into()));
        }
        Ok(())
    }
}

const MAX_PARTITION_ATTEMPTS: u64 = 100;

/// Draws one Dirichlet(beta, ..., beta) vector by normalising Gamma draws.
pub(crate) fn dirichlet_draw(beta: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated positive");
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Label-skewed split: for each class, client proportions are drawn from a
/// symmetric Dirichlet and the shuffled class indices are cut accordingly.
/// Draws that leave a client empty are retried with the next attempt seed.
pub fn dirichlet_partition(
    labels: &[usize],
    num_clients: usize,
    beta: f64,
    seed: u64,
) -> Result<ClientPartition> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels to partition".into()));
    }
    if num_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if num_clients > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{num_clients} clients but only {} examples",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }

    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = rng_for(seed, &[0xd112, attempt]);
        let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for class_indices in &by_class {
            if class_indices.is_empty() {
                continue;
            }
            let mut idx = class_indices.clone();
            idx.shuffle(&mut rng);
            let proportions = dirichlet_draw(beta, num_clients, &mut rng);
            let n = idx.len();
            let mut start = 0;
            let mut cumulative = 0.0;
            for (client, p) in proportions.iter().enumerate() {
                cumulative += p;
                let end = if client + 1 == num_clients {
                    n
                } else {
                    ((cumulative * n as f64).floor() as usize).clamp(start, n)
                };
                assignments[client].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if assignments.iter().all(|a| !a.is_empty()) {
            for a in &mut assignments {
                a.sort_unstable();
            }
            return Ok(ClientPartition {
                assignments,
                beta,
                num_clients,
                seed,
            });
        }
    }
    Err(Error::Partition(format!(
        "every one of {MAX_PARTITION_ATTEMPTS} draws left a client empty \
         ({num_clients} clients, beta {beta})"
    )))
}
