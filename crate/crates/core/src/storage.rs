//! Dataset, partition and checkpoint files on top of [`crate::container`].

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{ArrayData, Container};
use crate::datagen::{BBox, ClientPartition, Dataset, DatasetSpec, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelParams};

const DATASET: &str = "dataset";
const PARTITION: &str = "partition";
const CHECKPOINT: &str = "checkpoint";

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    spec: DatasetSpec,
    count: usize,
    partition: Option<PartitionMeta>,
}

#[derive(Serialize, Deserialize)]
struct PartitionMeta {
    beta: f64,
    num_clients: usize,
    seed: u64,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn push_partition(c: &mut Container, p: &ClientPartition) -> Result<()> {
    let offsets: Vec<u64> = std::iter::once(0)
        .chain(p.assignments.iter().scan(0u64, |acc, a| {
            *acc += a.len() as u64;
            Some(*acc)
        }))
        .collect();
    let flat: Vec<u64> = p.assignments.iter().flatten().map(|&i| i as u64).collect();
    c.push(
        "partition.offsets",
        vec![offsets.len()],
        ArrayData::U64(offsets),
    )?;
    c.push("partition.indices", vec![flat.len()], ArrayData::U64(flat))
}

fn read_partition(c: &Container, meta: PartitionMeta, path: &Path) -> Result<ClientPartition> {
    let (ArrayData::U64(offsets), ArrayData::U64(flat)) = (
        &c.take("partition.offsets", path)?.data,
        &c.take("partition.indices", path)?.data,
    ) else {
        return Err(corrupt(path, "partition arrays have the wrong type"));
    };
    if offsets.len() != meta.num_clients + 1 {
        return Err(corrupt(path, "partition offsets do not match client count"));
    }
    let mut assignments = Vec::with_capacity(meta.num_clients);
    for w in offsets.windows(2) {
        let (a, b) = (w[0] as usize, w[1] as usize);
        if a > b || b > flat.len() {
            return Err(corrupt(path, "partition offsets out of range"));
        }
        assignments.push(flat[a..b].iter().map(|&i| i as usize).collect());
    }
    Ok(ClientPartition {
        assignments,
        beta: meta.beta,
        num_clients: meta.num_clients,
        seed: meta.seed,
    })
}

/// Writes a dataset, optionally bundled with a client partition.
pub fn save_dataset(
    path: &Path,
    dataset: &Dataset,
    partition: Option<&ClientPartition>,
) -> Result<()> {
    let (h, w) = dataset.spec.image_size;
    let n = dataset.len();
    let meta = DatasetMeta {
        spec: dataset.spec.clone(),
        count: n,
        partition: partition.map(|p| PartitionMeta {
            beta: p.beta,
            num_clients: p.num_clients,
            seed: p.seed,
        }),
    };
    let mut c = Container::new(DATASET, serde_json::to_value(&meta)?);
    let mut pixels = Vec::with_capacity(n * h * w * 3);
    let mut masks = Vec::with_capacity(n * h * w);
    let mut bboxes = Vec::with_capacity(n * 4);
    let mut labels = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for img in &dataset.images {
        if img.pixels.dim() != (h, w, 3) {
            return Err(Error::ShapeMismatch(format!(
                "image is {:?}, dataset declares {h}x{w}",
                img.pixels.dim()
            )));
        }
        pixels.extend(img.pixels.iter());
        masks.extend(img.object_mask.iter().map(|&m| m as u8));
        bboxes.extend([img.bbox.x1, img.bbox.y1, img.bbox.x2, img.bbox.y2].map(|v| v as u32));
        labels.push(img.label as u32);
        colors.push(img.background_color_id as u32);
    }
    c.push("pixels", vec![n, h, w, 3], ArrayData::U8(pixels))?;
    c.push("object_mask", vec![n, h, w], ArrayData::U8(masks))?;
    c.push("bbox", vec![n, 4], ArrayData::U32(bboxes))?;
    c.push("label", vec![n], ArrayData::U32(labels))?;
    c.push("background_color_id", vec![n], ArrayData::U32(colors))?;
    if let Some(p) = partition {
        push_partition(&mut c, p)?;
    }
    c.save(path)
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, Option<ClientPartition>)> {
    let c = Container::load_kind(path, DATASET)?;
    let meta: DatasetMeta = serde_json::from_value(c.meta.clone())?;
    let (h, w) = meta.spec.image_size;
    let n = meta.count;
    let pick = |name: &str, shape: Vec<usize>| -> Result<&ArrayData> {
        let a = c.take(name, path)?;
        if a.shape != shape {
            return Err(corrupt(
                path,
                format!("array {name} has shape {:?}", a.shape),
            ));
        }
        Ok(&a.data)
    };
    let (
        ArrayData::U8(pixels),
        ArrayData::U8(masks),
        ArrayData::U32(bboxes),
        ArrayData::U32(labels),
        ArrayData::U32(colors),
    ) = (
        pick("pixels", vec![n, h, w, 3])?,
        pick("object_mask", vec![n, h, w])?,
        pick("bbox", vec![n, 4])?,
        pick("label", vec![n])?,
        pick("background_color_id", vec![n])?,
    )
    else {
        return Err(corrupt(path, "dataset arrays have the wrong type"));
    };
    let images = (0..n)
        .map(|i| {
            let b = &bboxes[i * 4..i * 4 + 4];
            LabeledImage {
                pixels: Array3::from_shape_vec(
                    (h, w, 3),
                    pixels[i * h * w * 3..(i + 1) * h * w * 3].to_vec(),
                )
                .expect("extent checked"),
                label: labels[i] as usize,
                object_mask: Array2::from_shape_fn((h, w), |(y, x)| {
                    masks[i * h * w + y * w + x] != 0
                }),
                bbox: BBox {
                    x1: b[0] as usize,
                    y1: b[1] as usize,
                    x2: b[2] as usize,
                    y2: b[3] as usize,
                },
                background_color_id: colors[i] as usize,
            }
        })
        .collect();
    let partition = match meta.partition {
        Some(pm) => Some(read_partition(&c, pm, path)?),
        None => None,
    };
    Ok((
        Dataset {
            spec: meta.spec,
            images,
        },
        partition,
    ))
}

pub fn save_partition(path: &Path, partition: &ClientPartition) -> Result<()> {
    let meta = PartitionMeta {
        beta: partition.beta,
        num_clients: partition.num_clients,
        seed: partition.seed,
    };
    let mut c = Container::new(PARTITION, serde_json::to_value(&meta)?);
    push_partition(&mut c, partition)?;
    c.save(path)
}

pub fn load_partition(path: &Path) -> Result<ClientPartition> {
    let c = Container::load_kind(path, PARTITION)?;
    let meta: PartitionMeta = serde_json::from_value(c.meta.clone())?;
    read_partition(&c, meta, path)
}

/// Model parameters plus the seed that initialised the run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub seed: u64,
    pub round: usize,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let params = &checkpoint.params;
    let meta = json!({
        "architecture": params.arch,
        "seed": checkpoint.seed,
        "round": checkpoint.round,
    });
    let mut c = Container::new(CHECKPOINT, meta);
    for ((name, data), shape) in params.tensors().into_iter().zip(params.shapes()) {
        c.push(name, shape, ArrayData::F64(data.to_vec()))?;
    }
    c.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    #[derive(Deserialize)]
    struct Meta {
        architecture: Architecture,
        seed: u64,
        round: usize,
    }
    let c = Container::load_kind(path, CHECKPOINT)?;
    let meta: Meta = serde_json::from_value(c.meta.clone())?;
    let named: Vec<(String, Vec<usize>, Vec<f64>)> = c
        .arrays
        .iter()
        .map(|a| match &a.data {
            ArrayData::F64(v) => Ok((a.name.clone(), a.shape.clone(), v.clone())),
            _ => Err(corrupt(path, format!("tensor {} is not f64", a.name))),
        })
        .collect::<Result<_>>()?;
    Ok(Checkpoint {
        params: ModelParams::from_named(meta.architecture, &named)?,
        seed: meta.seed,
        round: meta.round,
    })
}
