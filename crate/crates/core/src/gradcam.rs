//! Grad-CAM over the conv feature map.
//!
//! Channel weights are the spatial means of the gradient of the predicted
//! class logit with respect to the feature map; the map is the ReLU of the
//! weighted channel sum, resampled to image resolution and min-max
//! normalised.

use ndarray::{Array2, Array3, ArrayView3, Axis};

use crate::datagen::BBox;
use crate::error::{Error, Result};
use crate::model::{head_backward, predict, ConvPass, ModelParams, TailPass};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    /// `[height, width]`, values in `[0, 1]`.
    pub heatmap: Array2<f64>,
    pub predicted: usize,
    pub logits: Vec<f64>,
}

/// `ReLU(sum_k w_k A_k)` with `w_k` the spatial mean of `dA_k`.
pub fn weighted_map(
    feature_map: ArrayView3<f64>,
    gradients: ArrayView3<f64>,
) -> Result<Array2<f64>> {
    if feature_map.shape() != gradients.shape() {
        return Err(Error::ShapeMismatch(format!(
            "feature map {:?} vs gradients {:?}",
            feature_map.shape(),
            gradients.shape()
        )));
    }
    let (_, h, w) = feature_map.dim();
    let mut cam = Array2::<f64>::zeros((h, w));
    for (a, g) in feature_map.outer_iter().zip(gradients.outer_iter()) {
        let weight = g.mean().unwrap_or(0.0);
        cam.scaled_add(weight, &a);
    }
    cam.mapv_inplace(|v| v.max(0.0));
    Ok(cam)
}

/// Bilinear resampling of a valid-convolution map back onto the input grid.
/// Output pixel `y` reads the map at `y - offset`, where `offset` is half the
/// kernel, so each map cell lands on the centre of its receptive field;
/// pixels beyond the map edge take the nearest edge value.
pub fn resample_to_input(
    cam: &Array2<f64>,
    height: usize,
    width: usize,
    offset: f64,
) -> Array2<f64> {
    let (h, w) = cam.dim();
    let sample = |pos: f64, len: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (len - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, p - lo as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = sample(y as f64 - offset, h);
        let (x0, x1, fx) = sample(x as f64 - offset, w);
        let top = cam[[y0, x0]] * (1.0 - fx) + cam[[y0, x1]] * fx;
        let bottom = cam[[y1, x0]] * (1.0 - fx) + cam[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Min-max normalisation to `[0, 1]`. A constant map becomes all ones if
/// positive and all zeros otherwise.
pub fn normalize(map: &Array2<f64>) -> Array2<f64> {
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range <= 1e-12 * max.abs().max(1.0) {
        let fill = if max > 0.0 { 1.0 } else { 0.0 };
        return Array2::from_elem(map.raw_dim(), fill);
    }
    map.mapv(|v| (v - min) / range)
}

/// Grad-CAM for one `[height, width, 3]` image.
pub fn grad_cam(params: &ModelParams, image: &Array3<f64>) -> Result<GradCam> {
    let batch = image.view().insert_axis(Axis(0));
    let conv = ConvPass::run(params, batch)?;
    let tail = TailPass::run(params, conv.act.view())?;
    let logits = crate::model::classify_feature(params, tail.feature.view())?;
    let predicted = predict(&logits)[0];

    let mut scratch = params.zeros_like();
    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    dlogits[[0, predicted]] = 1.0;
    let dfeature = head_backward(params, &tail.feature, &dlogits, &mut scratch);
    let dmap = tail.backward(params, &dfeature, &mut scratch);

    let cam = weighted_map(conv.act.index_axis(Axis(0), 0), dmap.index_axis(Axis(0), 0))?;
    let arch = params.arch;
    let offset = (arch.kernel - 1) as f64 / 2.0;
    let heatmap = normalize(&resample_to_input(&cam, arch.height, arch.width, offset));
    Ok(GradCam {
        heatmap,
        predicted,
        logits: logits.row(0).to_vec(),
    })
}

/// Share of the heatmap's total mass that falls inside `bbox`.
pub fn mass_inside(heatmap: &Array2<f64>, bbox: BBox) -> f64 {
    let total = heatmap.sum();
    if total <= 0.0 {
        return 0.0;
    }
    let inside: f64 = heatmap
        .indexed_iter()
        .filter(|((y, x), _)| bbox.contains(*x, *y))
        .map(|(_, v)| *v)
        .sum();
    inside / total
}
