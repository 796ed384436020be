//! Two-component PCA of features from two models over the same samples.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Array1<f64>,
    /// `[2, dim]`, rows are unit principal axes. Each row's largest-magnitude
    /// entry is positive.
    pub components: Array2<f64>,
    pub variances: [f64; 2],
    /// Set when the data does not span two dimensions.
    pub degenerate: bool,
}

impl Pca2 {
    pub fn project(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean).dot(&self.components.t())
    }
}

/// Fits a 2-component PCA on the rows of `x`.
pub fn fit_pca2(x: ArrayView2<f64>) -> Result<Pca2> {
    let (n, dim) = x.dim();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 3 rows, got {n}"
        )));
    }
    if dim < 2 {
        return Err(Error::InvalidArgument(
            "PCA needs at least 2 dimensions".into(),
        ));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(dim, dim, |i, j| cov[[i, j]]));

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut components = Array2::<f64>::zeros((2, dim));
    let mut variances = [0.0; 2];
    for (row, &k) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = (0..dim)
            .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
            .expect("dim >= 2");
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..dim {
            components[[row, j]] = sign * v[j];
        }
        variances[row] = eig.eigenvalues[k].max(0.0);
    }
    let scale = variances[0].max(cov.diag().iter().copied().fold(0.0, f64::max));
    let degenerate = variances[0] <= 1e-12 || variances[1] <= 1e-12 * scale;
    Ok(Pca2 {
        mean,
        components,
        variances,
        degenerate,
    })
}

/// Coordinates of both feature sets under one shared PCA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairProjection {
    pub a: Vec<[f64; 2]>,
    pub b: Vec<[f64; 2]>,
    pub degenerate: bool,
    pub variances: [f64; 2],
}

/// Stacks `features_a` over `features_b`, fits one PCA, and splits the
/// projected rows back by source.
pub fn project_pair(
    features_a: ArrayView2<f64>,
    features_b: ArrayView2<f64>,
) -> Result<PairProjection> {
    if features_a.dim() != features_b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature sets {:?} and {:?}",
            features_a.dim(),
            features_b.dim()
        )));
    }
    if features_a.nrows() < 3 {
        return Err(Error::InvalidArgument("need at least 3 samples".into()));
    }
    let stacked = concatenate![Axis(0), features_a, features_b];
    let pca = fit_pca2(stacked.view())?;
    let coords = if pca.degenerate && pca.variances[0] <= 1e-12 {
        Array2::zeros((stacked.nrows(), 2))
    } else {
        pca.project(stacked.view())
    };
    let n = features_a.nrows();
    let rows = |range: std::ops::Range<usize>| -> Vec<[f64; 2]> {
        range.map(|i| [coords[[i, 0]], coords[[i, 1]]]).collect()
    };
    Ok(PairProjection {
        a: rows(0..n),
        b: rows(n..2 * n),
        degenerate: pca.degenerate,
        variances: pca.variances,
    })
}

/// Mean distance between the two projections of each sample.
pub fn mean_paired_distance(p: &PairProjection) -> f64 {
    let n = p.a.len().max(1) as f64;
    p.a.iter()
        .zip(&p.b)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n
}
