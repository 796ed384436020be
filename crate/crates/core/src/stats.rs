//! Summary statistics used by reports and diagnostics.

use std::collections::BTreeMap;

/// Mean and sample standard deviation; the deviation is `None` for fewer
/// than two values.
pub fn mean_std(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    Some((mean, std))
}

/// Plug-in estimate of the mutual information between the two coordinates
/// of `pairs`, in bits.
pub fn mutual_information_bits(pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut left: BTreeMap<usize, f64> = BTreeMap::new();
    let mut right: BTreeMap<usize, f64> = BTreeMap::new();
    for &(a, b) in pairs {
        *joint.entry((a, b)).or_default() += 1.0;
        *left.entry(a).or_default() += 1.0;
        *right.entry(b).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(a, b), &c)| {
            let p = c / n;
            p * (c * n / (left[&a] * right[&b])).log2()
        })
        .sum::<f64>()
        .max(0.0)
}
