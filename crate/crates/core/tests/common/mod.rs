//! Reference implementations and oracle checks shared by the integration
//! tests and the acceptance harness. Every check returns `Err` with a
//! description of the first mismatch.

#![allow(dead_code)]

use ndarray::{Array2, Array3, Array4, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use fedgid::datagen::{
    dirichlet_partition, generate_dataset, synthetic_digits, Dataset, DatasetSpec, LabeledImage,
    Split,
};
use fedgid::distillation::{feature_kl, gd_loss};
use fedgid::federation::{
    aggregate, batch_objective, epoch_batches, Algorithm, Client, GlobalBatch, ObjectiveTerms,
    TrainConfig,
};
use fedgid::gradcam::weighted_map;
use fedgid::intervention::{
    intervention_loss, mask_box, mix_features, BackgroundExtractor, InterventionConfig,
    InterventionLevel, Interventional,
};
use fedgid::model::{forward, init_params, Architecture, ModelParams};
use fedgid::projection::fit_pca2;
use fedgid::seed::derive_seed;
use fedgid::stats::mutual_information_bits;

pub type Check = Result<(), String>;

pub fn tiny_arch() -> Architecture {
    Architecture {
        height: 6,
        width: 6,
        in_channels: 3,
        conv_channels: 2,
        kernel: 3,
        feature_dim: 4,
        num_classes: 10,
    }
}

pub fn random_images(n: usize, arch: &Architecture, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, arch.height, arch.width, arch.in_channels), |_| {
        rng.random::<f64>()
    })
}

// ---------------------------------------------------------------------------
// Loop-based reference network.

pub struct RefOutput {
    /// `[channels][y][x]` after ReLU.
    pub map: Vec<Vec<Vec<f64>>>,
    pub feature: Vec<f64>,
}

pub fn ref_conv(p: &ModelParams, image: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    let a = p.arch;
    let (oh, ow, k) = (a.conv_height(), a.conv_width(), a.kernel);
    (0..a.conv_channels)
        .map(|o| {
            (0..oh)
                .map(|oy| {
                    (0..ow)
                        .map(|ox| {
                            let mut z = p.conv_b[o];
                            for c in 0..a.in_channels {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        z += p.conv_w[[o, (c * k + ky) * k + kx]]
                                            * image[[oy + ky, ox + kx, c]];
                                    }
                                }
                            }
                            z.max(0.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn ref_tail(p: &ModelParams, map: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let mut flat = Vec::new();
    for ch in map {
        for py in 0..ch.len() / 2 {
            for px in 0..ch[0].len() / 2 {
                let v = ch[2 * py][2 * px]
                    .max(ch[2 * py][2 * px + 1])
                    .max(ch[2 * py + 1][2 * px])
                    .max(ch[2 * py + 1][2 * px + 1]);
                flat.push(v);
            }
        }
    }
    (0..p.arch.feature_dim)
        .map(|j| {
            let z: f64 = p.fc1_b[j]
                + (0..flat.len())
                    .map(|i| p.fc1_w[[j, i]] * flat[i])
                    .sum::<f64>();
            z.max(0.0)
        })
        .collect()
}

pub fn ref_logits(p: &ModelParams, feature: &[f64]) -> Vec<f64> {
    (0..p.arch.num_classes)
        .map(|c| {
            p.fc2_b[c]
                + feature
                    .iter()
                    .enumerate()
                    .map(|(j, f)| p.fc2_w[[c, j]] * f)
                    .sum::<f64>()
        })
        .collect()
}

pub fn ref_forward(p: &ModelParams, image: &Array3<f64>) -> RefOutput {
    let map = ref_conv(p, image);
    let feature = ref_tail(p, &map);
    RefOutput { map, feature }
}

pub fn ref_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    -(logits[label] - m - z.ln())
}

pub fn ref_softmax(x: &[f64], t: f64) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `sum_k p_k (ln p_k - ln q_k)` with both sides softmaxed at temperature `t`.
pub fn ref_kl(student: &[f64], teacher: &[f64], t: f64) -> f64 {
    let p = ref_softmax(student, t);
    let q = ref_softmax(teacher, t);
    p.iter().zip(&q).map(|(p, q)| p * (p.ln() - q.ln())).sum()
}

fn mix_maps(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>], alpha: f64) -> Vec<Vec<Vec<f64>>> {
    a.iter()
        .zip(b)
        .map(|(ca, cb)| {
            ca.iter()
                .zip(cb)
                .map(|(ra, rb)| {
                    ra.iter()
                        .zip(rb)
                        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Which loss terms the reference objective includes.
#[derive(Clone, Copy, Debug)]
pub struct RefTerms {
    pub em: bool,
    pub gi: Option<(InterventionLevel, f64)>,
    pub lambda: f64,
    pub tau: f64,
}

/// Loop-based local objective on one batch. `backgrounds[i]` is the
/// background paired with sample `i`.
pub fn ref_objective(
    local: &ModelParams,
    global: &ModelParams,
    images: &[Array3<f64>],
    labels: &[usize],
    backgrounds: &[Array3<f64>],
    terms: RefTerms,
) -> f64 {
    let n = images.len() as f64;
    let mut total = 0.0;
    for (i, image) in images.iter().enumerate() {
        let own = ref_forward(local, image);
        let teacher = ref_forward(global, image).feature;
        if terms.em {
            total += ref_cross_entropy(&ref_logits(local, &own.feature), labels[i]) / n;
        }
        if let Some((level, alpha)) = terms.gi {
            let bg = ref_forward(global, &backgrounds[i]);
            let f_inv: Vec<f64> = match level {
                InterventionLevel::Feature => own
                    .feature
                    .iter()
                    .zip(&bg.feature)
                    .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                    .collect(),
                InterventionLevel::FeatureMap => {
                    ref_tail(local, &mix_maps(&own.map, &bg.map, alpha))
                }
            };
            total += ref_cross_entropy(&ref_logits(local, &f_inv), labels[i]) / n;
            if terms.lambda > 0.0 {
                total += terms.lambda * ref_kl(&f_inv, &teacher, terms.tau) / n;
            }
        }
        if terms.lambda > 0.0 {
            total += terms.lambda * ref_kl(&own.feature, &teacher, terms.tau) / n;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Parameter vector helpers and finite differences.

pub fn flatten(p: &ModelParams) -> Vec<f64> {
    p.tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().copied())
        .collect()
}

pub fn unflatten(template: &ModelParams, values: &[f64]) -> ModelParams {
    let mut p = template.clone();
    let mut it = values.iter();
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = *it.next().expect("enough values");
        }
    }
    p
}

pub fn central_difference(at: &ModelParams, eps: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let base = flatten(at);
    (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += eps;
            minus[i] -= eps;
            (f(&unflatten(at, &plus)) - f(&unflatten(at, &minus))) / (2.0 * eps)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all coordinates.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .map(|(i, (a, n))| ((a - n).abs() / a.abs().max(n.abs()).max(floor), i))
        .fold(
            (0.0, 0),
            |best, cur| if cur.0 > best.0 { cur } else { best },
        )
}

// ---------------------------------------------------------------------------
// Gradient checks.

struct GradientCase {
    local: ModelParams,
    global: ModelParams,
    images: Array4<f64>,
    backgrounds: Array4<f64>,
    labels: Vec<usize>,
}

fn gradient_case() -> GradientCase {
    let arch = tiny_arch();
    let images = random_images(2, &arch, 21);
    // Background inputs for the pair, already in paired order.
    let backgrounds = random_images(2, &arch, 22);
    GradientCase {
        local: init_params(arch, 1).unwrap(),
        global: init_params(arch, 2).unwrap(),
        images,
        backgrounds,
        labels: vec![3, 7],
    }
}

fn check_gradient(name: &str, terms: ObjectiveTerms) -> Check {
    let case = gradient_case();
    let g = forward(&case.global, case.images.view()).map_err(|e| e.to_string())?;
    let bg = forward(&case.global, case.backgrounds.view()).map_err(|e| e.to_string())?;
    let paired = GlobalBatch {
        features: Some(g.feature.view()),
        background_features: Some(bg.feature.view()),
        background_maps: Some(bg.feature_map.view()),
    };
    let objective = |p: &ModelParams| {
        batch_objective(
            p,
            &case.global,
            case.images.view(),
            &case.labels,
            &paired,
            &terms,
        )
        .unwrap()
        .0
        .total
    };
    let (_, grads) = batch_objective(
        &case.local,
        &case.global,
        case.images.view(),
        &case.labels,
        &paired,
        &terms,
    )
    .map_err(|e| e.to_string())?;
    let analytic = flatten(&grads);
    let numeric = central_difference(&case.local, 1e-6, objective);
    let (err, at) = worst_relative_error(&analytic, &numeric, 1e-5);
    if err > 1e-4 {
        return Err(format!(
            "{name}: relative error {err:.3e} at parameter {at} (analytic {}, numeric {})",
            analytic[at], numeric[at]
        ));
    }
    if analytic.iter().all(|g| *g == 0.0) {
        return Err(format!("{name}: gradient is identically zero"));
    }
    Ok(())
}

fn gi_terms(level: InterventionLevel) -> ObjectiveTerms {
    ObjectiveTerms {
        em: false,
        intervention: Some(InterventionConfig {
            enabled: true,
            alpha: 0.7,
            level,
            ..InterventionConfig::default()
        }),
        lambda_gd: 0.0,
        temperature: 1.0,
        prox_mu: 0.0,
    }
}

pub fn gradient_em() -> Check {
    check_gradient("L_EM", ObjectiveTerms::cross_entropy_only())
}

pub fn gradient_gi_feature() -> Check {
    check_gradient("L_GI (feature)", gi_terms(InterventionLevel::Feature))
}

pub fn gradient_gi_map() -> Check {
    check_gradient(
        "L_GI (feature map)",
        gi_terms(InterventionLevel::FeatureMap),
    )
}

pub fn gradient_gd() -> Check {
    check_gradient(
        "L_GD",
        ObjectiveTerms {
            em: false,
            intervention: None,
            lambda_gd: 1.0,
            temperature: 2.0,
            prox_mu: 0.0,
        },
    )
}

pub fn gradient_full() -> Check {
    for level in [InterventionLevel::Feature, InterventionLevel::FeatureMap] {
        let mut terms = gi_terms(level);
        terms.em = true;
        terms.lambda_gd = 5.0;
        terms.temperature = 0.5;
        check_gradient(&format!("L_total ({level:?})"), terms)?;
    }
    check_gradient(
        "L_EM + prox",
        ObjectiveTerms {
            prox_mu: 0.3,
            ..ObjectiveTerms::cross_entropy_only()
        },
    )
}

/// Loop reference vs the vectorised objective value.
pub fn objective_matches_reference() -> Check {
    let case = gradient_case();
    let g = forward(&case.global, case.images.view()).map_err(|e| e.to_string())?;
    let bg = forward(&case.global, case.backgrounds.view()).map_err(|e| e.to_string())?;
    let paired = GlobalBatch {
        features: Some(g.feature.view()),
        background_features: Some(bg.feature.view()),
        background_maps: Some(bg.feature_map.view()),
    };
    let images: Vec<Array3<f64>> = case.images.outer_iter().map(|a| a.to_owned()).collect();
    let backgrounds: Vec<Array3<f64>> = case
        .backgrounds
        .outer_iter()
        .map(|a| a.to_owned())
        .collect();
    for level in [InterventionLevel::Feature, InterventionLevel::FeatureMap] {
        let mut terms = gi_terms(level);
        terms.em = true;
        terms.lambda_gd = 1.5;
        terms.temperature = 0.8;
        let fast = batch_objective(
            &case.local,
            &case.global,
            case.images.view(),
            &case.labels,
            &paired,
            &terms,
        )
        .map_err(|e| e.to_string())?
        .0
        .total;
        let slow = ref_objective(
            &case.local,
            &case.global,
            &images,
            &case.labels,
            &backgrounds,
            RefTerms {
                em: true,
                gi: Some((level, 0.7)),
                lambda: 1.5,
                tau: 0.8,
            },
        );
        if (fast - slow).abs() > 1e-10 * slow.abs().max(1.0) {
            return Err(format!("{level:?}: objective {fast} vs reference {slow}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Single local step against a hand-rolled step.

pub fn tiny_dataset(n: usize, seed: u64) -> Dataset {
    let spec = DatasetSpec::new(6, 0.9, Split::Train, seed);
    generate_dataset(&spec, &synthetic_digits(n, 6, 6, seed + 1)).unwrap()
}

fn ref_background(image: &LabeledImage) -> Array3<f64> {
    let mut out = image.to_f64();
    let b = image.bbox;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2 {
                for c in 0..3 {
                    out[[y, x, c]] = 0.0;
                }
            }
        }
    }
    out
}

pub fn single_step() -> Check {
    // Uniform backgrounds create exact max-pool ties, where the loss has no
    // gradient; random pixels keep the reference difference well defined.
    let mut data = tiny_dataset(4, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for im in &mut data.images {
        im.pixels.mapv_inplace(|_| rng.random());
    }
    let global = init_params(tiny_arch(), 41).unwrap();
    let mut config = TrainConfig {
        num_clients: 1,
        local_epochs: 1,
        batch_size: 8,
        lr: 0.05,
        weight_decay: 0.01,
        seed: 3,
        algorithm: Algorithm::FedGid,
        ..TrainConfig::default()
    };
    config.intervention.enabled = true;
    config.intervention.level = InterventionLevel::FeatureMap;
    config.intervention.alpha = 0.6;
    config.distill.lambda_gd = 2.0;
    config.distill.temperature = 1.5;
    let extractor = BackgroundExtractor::OracleMask;
    let client = Client::new(0, &data, vec![0, 1, 2, 3], &extractor);
    let (stepped, metrics) = client
        .local_update(&global, &config, 1)
        .map_err(|e| e.to_string())?;

    let batches = epoch_batches(&config, 1, 0, 0, 4);
    if batches.len() != 1 {
        return Err(format!("expected a single batch, got {}", batches.len()));
    }
    let (rows, partners) = &batches[0];
    let images: Vec<Array3<f64>> = rows.iter().map(|&r| data.images[r].to_f64()).collect();
    let labels: Vec<usize> = rows.iter().map(|&r| data.images[r].label).collect();
    let backgrounds: Vec<Array3<f64>> = partners
        .iter()
        .map(|&r| ref_background(&data.images[r]))
        .collect();
    let terms = RefTerms {
        em: true,
        gi: Some((InterventionLevel::FeatureMap, 0.6)),
        lambda: 2.0,
        tau: 1.5,
    };
    let loss = |p: &ModelParams| ref_objective(p, &global, &images, &labels, &backgrounds, terms);
    let grad = central_difference(&global, 1e-6, loss);
    let start = flatten(&global);
    let expected: Vec<f64> = start
        .iter()
        .zip(&grad)
        .map(|(w, g)| w - config.lr * (g + config.weight_decay * w))
        .collect();
    let got = flatten(&stepped);
    let worst = got
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let reference_loss = loss(&global);
    if (metrics.loss_total - reference_loss).abs() > 1e-9 {
        return Err(format!(
            "reported loss {} vs reference {}",
            metrics.loss_total, reference_loss
        ));
    }
    if worst > 1e-6 {
        return Err(format!("single step differs from reference by {worst:.3e}"));
    }
    let recomposed = metrics.loss_em + metrics.loss_gi + 2.0 * metrics.loss_gd;
    if (metrics.loss_total - recomposed).abs() > 1e-6 {
        return Err("reported total is not L_EM + L_GI + lambda L_GD".into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Intervention and distillation oracles.

pub fn masking_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = Array3::from_shape_fn((4, 4, 3), |_| rng.random::<f64>() + 0.1);
    let bbox = fedgid::datagen::BBox {
        x1: 1,
        y1: 1,
        x2: 2,
        y2: 2,
    };
    let masked = mask_box(&image, bbox);
    let mut zeroed = 0;
    for y in 0..4 {
        for x in 0..4 {
            let inside = (1..=2).contains(&x) && (1..=2).contains(&y);
            for c in 0..3 {
                let want = if inside { 0.0 } else { image[[y, x, c]] };
                if masked[[y, x, c]] != want {
                    return Err(format!(
                        "pixel ({x},{y},{c}) is {} not {want}",
                        masked[[y, x, c]]
                    ));
                }
            }
            zeroed += inside as usize;
        }
    }
    if zeroed != 4 {
        return Err(format!("{zeroed} pixels zeroed"));
    }
    Ok(())
}

pub fn mixing_endpoints() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>());
    let b = Array2::from_shape_fn((3, 5), |_| rng.random::<f64>());
    let one = mix_features(a.view(), b.view(), 1.0).map_err(|e| e.to_string())?;
    let zero = mix_features(a.view(), b.view(), 0.0).map_err(|e| e.to_string())?;
    if one != a || zero != b {
        return Err("alpha endpoints do not select the inputs".into());
    }
    Ok(())
}

pub fn intervention_loss_oracle() -> Check {
    let arch = Architecture::simple_cnn(12, 12, 10);
    let params = init_params(arch, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f_inv = Array2::from_shape_fn((3, 64), |_| rng.random::<f64>());
    let labels = [4, 0, 9];
    let got = intervention_loss(&params, &Interventional::Feature(f_inv.clone()), &labels)
        .map_err(|e| e.to_string())?;
    let mut want = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let feature: Vec<f64> = f_inv.row(i).to_vec();
        let logits = ref_logits(&params, &feature);
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        want -= (logits[y].exp() / z).ln();
    }
    want /= 3.0;
    if (got - want).abs() > 1e-9 {
        return Err(format!("L_GI {got} vs direct sum {want}"));
    }
    Ok(())
}

pub fn kl_oracles() -> Check {
    let s = ndarray::array![[1.0, 0.0]];
    let t = ndarray::array![[0.0, 1.0]];
    let got = feature_kl(s.view(), t.view(), 1.0).map_err(|e| e.to_string())?;
    let e = std::f64::consts::E;
    let p1 = e / (e + 1.0);
    let p2 = 1.0 / (e + 1.0);
    let want = p1 * (p1 / p2).ln() + p2 * (p2 / p1).ln();
    if (got - want).abs() > 1e-9 {
        return Err(format!("two-category KL {got} vs {want}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut draw = || Array2::from_shape_fn((4, 6), |_| rng.random_range(-2.0..2.0));
    let (fi, finv, fg) = (draw(), draw(), draw());
    for tau in [0.5, 1.0, 3.0] {
        let total = gd_loss(fi.view(), finv.view(), fg.view(), tau).map_err(|e| e.to_string())?;
        let oracle = |a: &Array2<f64>| -> f64 {
            (0..4)
                .map(|i| ref_kl(&a.row(i).to_vec(), &fg.row(i).to_vec(), tau))
                .sum::<f64>()
                / 4.0
        };
        let want = oracle(&fi) + oracle(&finv);
        if (total - want).abs() > 1e-9 {
            return Err(format!("tau {tau}: L_GD {total} vs {want}"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Aggregation.

pub fn aggregation_oracle() -> Check {
    let arch = Architecture::simple_cnn(12, 12, 10);
    let params: Vec<ModelParams> = (0..3)
        .map(|s| init_params(arch, 100 + s).unwrap())
        .collect();
    let weights = [1.0, 2.0, 3.0];
    let got = aggregate(&params, &weights).map_err(|e| e.to_string())?;
    let flat: Vec<Vec<f64>> = params.iter().map(flatten).collect();
    let out = flatten(&got);
    for i in 0..out.len() {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..3 {
            num += weights[k] * flat[k][i];
            den += weights[k];
        }
        let want = num / den;
        if (out[i] - want).abs() > 1e-12 {
            return Err(format!("coordinate {i}: {} vs {want}", out[i]));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dirichlet partition.

/// Straight-line restatement of the seeded partition sampler: per class, a
/// shuffled index list is cut at `floor(cumsum(p) * n)` with `p` a
/// normalised vector of Gamma(beta, 1) draws; draws that leave a client
/// empty are retried with the next attempt stream.
pub fn reference_partition(
    labels: &[usize],
    clients: usize,
    beta: f64,
    seed: u64,
) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().unwrap() + 1;
    let gamma = Gamma::new(beta, 1.0).unwrap();
    for attempt in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xd112, attempt]));
        let mut out = vec![Vec::new(); clients];
        for class in 0..classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let p = loop {
                let g: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
                let s: f64 = g.iter().sum();
                if s > 0.0 && s.is_finite() {
                    break g.into_iter().map(|v| v / s).collect::<Vec<f64>>();
                }
            };
            let mut cum = 0.0;
            let mut start = 0;
            for k in 0..clients {
                cum += p[k];
                let end = if k + 1 == clients {
                    idx.len()
                } else {
                    ((cum * idx.len() as f64).floor() as usize).clamp(start, idx.len())
                };
                out[k].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if out.iter().all(|c| !c.is_empty()) {
            for c in &mut out {
                c.sort_unstable();
            }
            return out;
        }
    }
    panic!("reference sampler found no valid partition");
}

/// Labels used for the recorded partition: 1 000 examples, 10 classes.
pub fn partition_labels() -> Vec<usize> {
    (0..1000).map(|i| (i * 7 + i / 10) % 10).collect()
}

/// Client sizes recorded from the reference sampler for
/// `partition_labels()`, beta 0.1, 5 clients, seed 7.
pub const RECORDED_SIZES: [usize; 5] = [98, 44, 257, 154, 447];

pub fn dirichlet_oracle() -> Check {
    let labels = partition_labels();
    let got = dirichlet_partition(&labels, 5, 0.1, 7).map_err(|e| e.to_string())?;
    let want = reference_partition(&labels, 5, 0.1, 7);
    if got.assignments != want {
        return Err("partition differs from the reference sampler".into());
    }
    let sizes: Vec<usize> = want.iter().map(Vec::len).collect();
    if sizes != RECORDED_SIZES {
        return Err(format!(
            "sizes {sizes:?} differ from recorded {RECORDED_SIZES:?}"
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Decorrelation.

/// `(raw, injected)` mutual information in bits between background colour
/// and label: in the raw set, and between the injected background and the
/// anchor's label over one epoch of training pairs.
pub fn decorrelation_bits(train: &Dataset, config: &TrainConfig) -> (f64, f64) {
    let raw: Vec<(usize, usize)> = train
        .images
        .iter()
        .map(|im| (im.background_color_id, im.label))
        .collect();
    let mut injected = Vec::with_capacity(train.len());
    for (rows, partners) in epoch_batches(config, 1, 0, 0, train.len()) {
        for (r, p) in rows.iter().zip(&partners) {
            injected.push((train.images[*p].background_color_id, train.images[*r].label));
        }
    }
    (
        mutual_information_bits(&raw),
        mutual_information_bits(&injected),
    )
}

pub fn decorrelation(train: &Dataset) -> Check {
    let (raw, injected) = decorrelation_bits(train, &TrainConfig::default());
    if !(raw > 1.0) {
        return Err(format!("raw MI {raw:.4} bits is not above 1"));
    }
    if !(injected < 0.05) {
        return Err(format!("injected MI {injected:.4} bits is not below 0.05"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PCA and Grad-CAM.

fn power_iteration(cov: &Array2<f64>, seed: u64) -> (f64, Vec<f64>) {
    let d = cov.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 0.5).collect();
    let mut lambda = 0.0;
    for _ in 0..200_000 {
        let w: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| cov[[i, j]] * v[j]).sum())
            .collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        lambda = norm;
        if delta < 1e-15 {
            break;
        }
    }
    (lambda, v)
}

pub fn pca_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = Array2::from_shape_fn((10, 64), |_| rng.random_range(-1.0..1.0));
    let pca = fit_pca2(x.view()).map_err(|e| e.to_string())?;
    let coords = pca.project(x.view());

    let mean = x.mean_axis(Axis(0)).unwrap();
    let centered = &x - &mean;
    let mut cov = Array2::<f64>::zeros((64, 64));
    for i in 0..64 {
        for j in 0..64 {
            cov[[i, j]] = (0..10)
                .map(|r| centered[[r, i]] * centered[[r, j]])
                .sum::<f64>()
                / 9.0;
        }
    }
    let (l1, v1) = power_iteration(&cov, 1);
    let mut deflated = cov.clone();
    for i in 0..64 {
        for j in 0..64 {
            deflated[[i, j]] -= l1 * v1[i] * v1[j];
        }
    }
    let (_, v2) = power_iteration(&deflated, 2);
    for (k, v) in [v1, v2].iter().enumerate() {
        let oracle: Vec<f64> = (0..10)
            .map(|r| (0..64).map(|j| centered[[r, j]] * v[j]).sum())
            .collect();
        let got: Vec<f64> = coords.column(k).to_vec();
        let same = got
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let flipped = got
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a + b).abs())
            .fold(0.0, f64::max);
        if same.min(flipped) > 1e-8 {
            return Err(format!(
                "component {k} differs by {:.3e}",
                same.min(flipped)
            ));
        }
    }
    Ok(())
}

pub fn gradcam_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = Array3::from_shape_fn((3, 4, 5), |_| rng.random_range(-1.0..1.0));
    let g = Array3::from_shape_fn((3, 4, 5), |_| rng.random_range(-1.0..1.0));
    let got = weighted_map(a.view(), g.view()).map_err(|e| e.to_string())?;
    for y in 0..4 {
        for x in 0..5 {
            let mut s = 0.0;
            for k in 0..3 {
                let mut w = 0.0;
                for yy in 0..4 {
                    for xx in 0..5 {
                        w += g[[k, yy, xx]];
                    }
                }
                s += w / 20.0 * a[[k, y, x]];
            }
            let want = s.max(0.0);
            if (got[[y, x]] - want).abs() > 1e-12 {
                return Err(format!("cell ({y},{x}): {} vs {want}", got[[y, x]]));
            }
        }
    }
    Ok(())
}

/// Empirical share of images whose background is the label's colour.
pub fn agreement(images: &[LabeledImage]) -> f64 {
    images
        .iter()
        .filter(|im| im.background_color_id == im.label)
        .count() as f64
        / images.len() as f64
}

pub fn features(params: &ModelParams, images: &Array4<f64>) -> Array2<f64> {
    forward(params, images.view()).unwrap().feature
}

pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
