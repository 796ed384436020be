//! SimpleCNN: one convolution (ReLU, 2x2 max-pool), a fully connected
//! feature layer (ReLU) and a linear classifier head.
//!
//! The encoder is conv + fc1 and produces the feature vector; the head is
//! fc2. Images are batches laid out `[batch, height, width, rgb]`; feature
//! maps are `[batch, channels, h, w]` taken after the conv ReLU and before
//! pooling.
//!
//! Backpropagation is written by hand. Forward passes that need gradients go
//! through [`ConvPass`] / [`TailPass`], which keep the intermediates the
//! backward functions read.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Layer sizes of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    /// The standard configuration: 3 -> 16 channels, 5x5 kernel, 64-dim feature.
    pub fn simple_cnn(height: usize, width: usize, num_classes: usize) -> Self {
        Architecture {
            height,
            width,
            in_channels: 3,
            conv_channels: 16,
            kernel: 5,
            feature_dim: 64,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Architecture {
            height,
            width,
            in_channels,
            conv_channels,
            kernel,
            feature_dim,
            num_classes,
        } = *self;
        if in_channels == 0 || conv_channels == 0 || feature_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "architecture has a zero-sized layer: {self:?}"
            )));
        }
        if kernel == 0 || kernel > height || kernel > width {
            return Err(Error::InvalidArgument(format!(
                "kernel {kernel} does not fit a {height}x{width} image"
            )));
        }
        if !self.conv_height().is_multiple_of(2) || !self.conv_width().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "conv output {}x{} is not divisible by the 2x2 pool",
                self.conv_height(),
                self.conv_width()
            )));
        }
        Ok(())
    }

    pub fn conv_height(&self) -> usize {
        self.height + 1 - self.kernel
    }

    pub fn conv_width(&self) -> usize {
        self.width + 1 - self.kernel
    }

    pub fn positions(&self) -> usize {
        self.conv_height() * self.conv_width()
    }

    pub fn pooled_height(&self) -> usize {
        self.conv_height() / 2
    }

    pub fn pooled_width(&self) -> usize {
        self.conv_width() / 2
    }

    pub fn flat_dim(&self) -> usize {
        self.conv_channels * self.pooled_height() * self.pooled_width()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

pub const TENSOR_NAMES: [&str; 6] = [
    "conv.weight",
    "conv.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

/// Parameters of the encoder/classifier pair. Also used to hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    /// `[conv_channels, in_channels * k * k]`, patch order (channel, ky, kx).
    pub conv_w: Array2<f64>,
    pub conv_b: Array1<f64>,
    /// `[feature_dim, flat_dim]`
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    /// `[num_classes, feature_dim]`
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

fn contiguous<T>(a: Option<T>) -> T {
    a.expect("parameter tensors are contiguous")
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        ModelParams {
            arch,
            conv_w: Array2::zeros((arch.conv_channels, arch.patch_len())),
            conv_b: Array1::zeros(arch.conv_channels),
            fc1_w: Array2::zeros((arch.feature_dim, arch.flat_dim())),
            fc1_b: Array1::zeros(arch.feature_dim),
            fc2_w: Array2::zeros((arch.num_classes, arch.feature_dim)),
            fc2_b: Array1::zeros(arch.num_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch)
    }

    /// Shapes of the named tensors, in [`TENSOR_NAMES`] order.
    pub fn shapes(&self) -> [Vec<usize>; 6] {
        [
            self.conv_w.shape().to_vec(),
            self.conv_b.shape().to_vec(),
            self.fc1_w.shape().to_vec(),
            self.fc1_b.shape().to_vec(),
            self.fc2_w.shape().to_vec(),
            self.fc2_b.shape().to_vec(),
        ]
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 6] {
        [
            (TENSOR_NAMES[0], contiguous(self.conv_w.as_slice())),
            (TENSOR_NAMES[1], contiguous(self.conv_b.as_slice())),
            (TENSOR_NAMES[2], contiguous(self.fc1_w.as_slice())),
            (TENSOR_NAMES[3], contiguous(self.fc1_b.as_slice())),
            (TENSOR_NAMES[4], contiguous(self.fc2_w.as_slice())),
            (TENSOR_NAMES[5], contiguous(self.fc2_b.as_slice())),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 6] {
        [
            (TENSOR_NAMES[0], contiguous(self.conv_w.as_slice_mut())),
            (TENSOR_NAMES[1], contiguous(self.conv_b.as_slice_mut())),
            (TENSOR_NAMES[2], contiguous(self.fc1_w.as_slice_mut())),
            (TENSOR_NAMES[3], contiguous(self.fc1_b.as_slice_mut())),
            (TENSOR_NAMES[4], contiguous(self.fc2_w.as_slice_mut())),
            (TENSOR_NAMES[5], contiguous(self.fc2_b.as_slice_mut())),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Errors unless `other` has the same architecture (hence the same
    /// tensor names and shapes).
    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.arch != other.arch || self.shapes() != other.shapes() {
            return Err(Error::ShapeMismatch(format!(
                "parameter sets differ: {:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    /// Rebuilds parameters from named tensors. Every name must be present
    /// with the shape the architecture implies.
    pub fn from_named(
        arch: Architecture,
        named: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<Self> {
        arch.validate()?;
        let mut params = Self::zeros(arch);
        let shapes = params.shapes();
        for ((name, dst), shape) in params.tensors_mut().into_iter().zip(shapes) {
            let (_, got_shape, data) = named
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing tensor {name}")))?;
            if *got_shape != shape || data.len() != dst.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: expected shape {shape:?}, found {got_shape:?}"
                )));
            }
            dst.copy_from_slice(data);
        }
        Ok(params)
    }

    /// Squared euclidean distance over all tensors.
    pub fn squared_distance(&self, other: &ModelParams) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .tensors()
            .iter()
            .zip(other.tensors().iter())
            .flat_map(|((_, a), (_, b))| a.iter().zip(b.iter()))
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
pub fn init_params(arch: Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut params = ModelParams::zeros(arch);
    let mut rng = rng_for(seed, &[0x1417]);
    for w in [&mut params.conv_w, &mut params.fc1_w, &mut params.fc2_w] {
        let bound = 1.0 / (w.ncols() as f64).sqrt();
        w.mapv_inplace(|_| rng.random_range(-bound..bound));
    }
    Ok(params)
}

/// Outputs of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `[batch, channels, h, w]`, post-ReLU, pre-pool.
    pub feature_map: Array4<f64>,
    /// `[batch, feature_dim]`, the fc1 output after ReLU.
    pub feature: Array2<f64>,
    /// `[batch, num_classes]`
    pub logits: Array2<f64>,
}

fn check_images(arch: &Architecture, images: &ArrayView4<f64>) -> Result<()> {
    let s = images.shape();
    if s[1] != arch.height || s[2] != arch.width || s[3] != arch.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "images are {:?}, model expects [_, {}, {}, {}]",
            s, arch.height, arch.width, arch.in_channels
        )));
    }
    Ok(())
}

/// Conv layer intermediates.
#[derive(Clone, Debug)]
pub struct ConvPass {
    patches: Array2<f64>,
    pre: Array2<f64>,
    /// `[batch, channels, h, w]`
    pub act: Array4<f64>,
}

impl ConvPass {
    pub fn run(params: &ModelParams, images: ArrayView4<f64>) -> Result<Self> {
        let arch = &params.arch;
        check_images(arch, &images)?;
        let batch = images.shape()[0];
        let (oh, ow, k) = (arch.conv_height(), arch.conv_width(), arch.kernel);
        let positions = oh * ow;
        let cin = arch.in_channels;

        let (h, w) = (arch.height, arch.width);
        // channel-major copy so each kernel row is a contiguous run
        let chw = images.permuted_axes([0, 3, 1, 2]);
        let chw = chw.as_standard_layout();
        let img = chw.as_slice().expect("standard layout");
        let mut data = Vec::with_capacity(batch * positions * arch.patch_len());
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for c in 0..cin {
                        for ky in 0..k {
                            let base = ((b * cin + c) * h + oy + ky) * w + ox;
                            data.extend_from_slice(&img[base..base + k]);
                        }
                    }
                }
            }
        }
        let patches = Array2::from_shape_vec((batch * positions, arch.patch_len()), data)
            .expect("patch count");

        let mut pre = params
            .conv_b
            .broadcast((batch * positions, arch.conv_channels))
            .expect("bias broadcast")
            .to_owned();
        general_mat_mul(1.0, &patches, &params.conv_w.t(), 1.0, &mut pre);

        let channels = arch.conv_channels;
        let mut data = Vec::with_capacity(batch * channels * positions);
        for b in 0..batch {
            let block = pre.slice(ndarray::s![b * positions..(b + 1) * positions, ..]);
            for c in 0..channels {
                data.extend(block.column(c).iter().map(|z| z.max(0.0)));
            }
        }
        let act = Array4::from_shape_vec((batch, channels, oh, ow), data).expect("map size");
        Ok(ConvPass { patches, pre, act })
    }

    /// Accumulates conv weight and bias gradients given `d act`.
    pub fn backward(&self, dact: &Array4<f64>, grads: &mut ModelParams) {
        let channels = self.pre.ncols();
        let positions = dact.shape()[2] * dact.shape()[3];
        let src = dact
            .as_slice()
            .expect("feature map gradients are contiguous");
        let mut dpre = self.pre.clone();
        for (row_idx, mut drow) in dpre.outer_iter_mut().enumerate() {
            let b = row_idx / positions;
            let p = row_idx % positions;
            for (c, d) in drow.iter_mut().enumerate() {
                *d = if *d > 0.0 {
                    src[(b * channels + c) * positions + p]
                } else {
                    0.0
                };
            }
        }
        general_mat_mul(1.0, &dpre.t(), &self.patches, 1.0, &mut grads.conv_w);
        grads.conv_b += &dpre.sum_axis(Axis(0));
    }
}

/// Pool + fc1 intermediates. The input feature map may come from this
/// model's conv layer or be a mix of several maps.
#[derive(Clone, Debug)]
pub struct TailPass {
    map_shape: [usize; 4],
    argmax: Vec<usize>,
    flat: Array2<f64>,
    pre: Array2<f64>,
    pub feature: Array2<f64>,
}

impl TailPass {
    pub fn run(params: &ModelParams, feature_map: ArrayView4<f64>) -> Result<Self> {
        let arch = &params.arch;
        let s = feature_map.shape();
        if s[1] != arch.conv_channels || s[2] != arch.conv_height() || s[3] != arch.conv_width() {
            return Err(Error::ShapeMismatch(format!(
                "feature map is {:?}, model expects [_, {}, {}, {}]",
                s,
                arch.conv_channels,
                arch.conv_height(),
                arch.conv_width()
            )));
        }
        let (batch, channels, oh, ow) = (s[0], s[1], s[2], s[3]);
        let (ph, pw) = (oh / 2, ow / 2);
        let fmap = feature_map.as_standard_layout();
        let src = fmap.as_slice().expect("standard layout");
        let per_sample = channels * oh * ow;
        let flat_dim = arch.flat_dim();
        let mut flat = Array2::<f64>::zeros((batch, flat_dim));
        let mut argmax = vec![0usize; batch * flat_dim];
        for b in 0..batch {
            let sample = &src[b * per_sample..(b + 1) * per_sample];
            let mut row = flat.row_mut(b);
            for c in 0..channels {
                for py in 0..ph {
                    for px in 0..pw {
                        let mut best = c * oh * ow + (2 * py) * ow + 2 * px;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = c * oh * ow + (2 * py + dy) * ow + 2 * px + dx;
                            if sample[idx] > sample[best] {
                                best = idx;
                            }
                        }
                        let j = (c * ph + py) * pw + px;
                        row[j] = sample[best];
                        argmax[b * flat_dim + j] = best;
                    }
                }
            }
        }

        let mut pre = params
            .fc1_b
            .broadcast((batch, arch.feature_dim))
            .expect("bias broadcast")
            .to_owned();
        general_mat_mul(1.0, &flat, &params.fc1_w.t(), 1.0, &mut pre);
        let feature = pre.mapv(|z| z.max(0.0));
        Ok(TailPass {
            map_shape: [batch, channels, oh, ow],
            argmax,
            flat,
            pre,
            feature,
        })
    }

    /// Accumulates fc1 gradients and returns `d feature_map`.
    pub fn backward(
        &self,
        params: &ModelParams,
        dfeature: &Array2<f64>,
        grads: &mut ModelParams,
    ) -> Array4<f64> {
        let mut dpre = dfeature.clone();
        ndarray::Zip::from(&mut dpre)
            .and(&self.pre)
            .for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        general_mat_mul(1.0, &dpre.t(), &self.flat, 1.0, &mut grads.fc1_w);
        grads.fc1_b += &dpre.sum_axis(Axis(0));
        let dflat = dpre.dot(&params.fc1_w);

        let [batch, channels, oh, ow] = self.map_shape;
        let per_sample = channels * oh * ow;
        let flat_dim = dflat.ncols();
        let mut dmap = Array4::<f64>::zeros((batch, channels, oh, ow));
        let dst = dmap.as_slice_mut().expect("standard layout");
        for (b, row) in dflat.outer_iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                dst[b * per_sample + self.argmax[b * flat_dim + j]] += g;
            }
        }
        dmap
    }
}

fn head_logits(params: &ModelParams, feature: ArrayView2<f64>) -> Array2<f64> {
    let mut logits = params
        .fc2_b
        .broadcast((feature.nrows(), params.arch.num_classes))
        .expect("bias broadcast")
        .to_owned();
    general_mat_mul(1.0, &feature, &params.fc2_w.t(), 1.0, &mut logits);
    logits
}

/// Accumulates classifier-head gradients and returns `d feature`.
pub fn head_backward(
    params: &ModelParams,
    feature: &Array2<f64>,
    dlogits: &Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    general_mat_mul(1.0, &dlogits.t(), feature, 1.0, &mut grads.fc2_w);
    grads.fc2_b += &dlogits.sum_axis(Axis(0));
    dlogits.dot(&params.fc2_w)
}

/// Applies only the classifier head to a batch of features.
pub fn classify_feature(params: &ModelParams, feature: ArrayView2<f64>) -> Result<Array2<f64>> {
    if feature.ncols() != params.arch.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "feature width {} but classifier expects {}",
            feature.ncols(),
            params.arch.feature_dim
        )));
    }
    Ok(head_logits(params, feature))
}

/// Runs the encoder tail (pool + fc1 + ReLU) on a feature map.
pub fn encode_feature_map(
    params: &ModelParams,
    feature_map: ArrayView4<f64>,
) -> Result<Array2<f64>> {
    Ok(TailPass::run(params, feature_map)?.feature)
}

pub fn forward(params: &ModelParams, images: ArrayView4<f64>) -> Result<FeatureBundle> {
    let conv = ConvPass::run(params, images)?;
    let tail = TailPass::run(params, conv.act.view())?;
    let logits = head_logits(params, tail.feature.view());
    Ok(FeatureBundle {
        feature_map: conv.act,
        feature: tail.feature,
        logits,
    })
}

/// `p <- p - lr * (g + weight_decay * p)` for every tensor.
pub fn sgd_step(
    params: &ModelParams,
    grads: &ModelParams,
    lr: f64,
    weight_decay: f64,
) -> Result<ModelParams> {
    params.check_compatible(grads)?;
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    if !(lr.is_finite() && lr >= 0.0 && weight_decay.is_finite() && weight_decay >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lr {lr} and weight decay {weight_decay} must be finite and non-negative"
        )));
    }
    let mut next = params.clone();
    for ((_, p), (_, g)) in next.tensors_mut().into_iter().zip(grads.tensors()) {
        for (p, g) in p.iter_mut().zip(g) {
            *p -= lr * (g + weight_decay * *p);
        }
    }
    Ok(next)
}

/// Index of the largest logit in each row (first one on ties).
pub fn predict(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
