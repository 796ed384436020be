//! Rounds of broadcast, local training and FedAvg aggregation.
//!
//! Local training minimises, per batch,
//!
//! ```text
//! L_total = L_EM + L_GI + lambda * L_GD            (fedgid)
//! L_total = L_EM + mu/2 * ||w - w_global||^2       (fedprox)
//! L_total = L_EM                                   (fedavg)
//! ```
//!
//! where `L_EM` is cross-entropy on the client's images, `L_GI` the
//! intervention loss and `L_GD` the distillation loss. The global model is
//! frozen for the whole local phase, so its features and background
//! encodings are computed once per round.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClientPartition, Dataset};
use crate::distillation::{feature_kl_grad, DistillConfig};
use crate::error::{Error, Result};
use crate::intervention::{
    batch_permutation, mix_features, BackgroundExtractor, InterventionConfig, InterventionLevel,
};
use crate::loss::cross_entropy;
use crate::model::{
    forward, head_backward, init_params, predict, sgd_step, Architecture, ConvPass, ModelParams,
    TailPass,
};
use crate::seed::{derive_seed, rng_for};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    FedGid,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedGid => "fedgid",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algorithm::FedAvg),
            "fedprox" => Ok(Algorithm::FedProx),
            "fedgid" => Ok(Algorithm::FedGid),
            other => Err(Error::InvalidArgument(format!("unknown algorithm {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_rounds: usize,
    pub num_clients: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub sample_fraction: f64,
    pub seed: u64,
    pub intervention: InterventionConfig,
    pub distill: DistillConfig,
    pub beta: f64,
    pub algorithm: Algorithm,
    pub fedprox_mu: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_rounds: 20,
            num_clients: 5,
            local_epochs: 5,
            batch_size: 64,
            lr: 0.005,
            weight_decay: 0.01,
            sample_fraction: 1.0,
            seed: 0,
            intervention: InterventionConfig::default(),
            distill: DistillConfig::default(),
            beta: 0.1,
            algorithm: Algorithm::FedGid,
            fedprox_mu: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_clients == 0 || self.batch_size == 0 {
            return bad("client count and batch size must be at least 1".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!(
                "sample fraction {} outside (0, 1]",
                self.sample_fraction
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.fedprox_mu >= 0.0) {
            return bad("weight decay and mu must be non-negative".into());
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta {} must be positive", self.beta));
        }
        self.intervention.validate()?;
        self.distill.validate()
    }

    /// Which loss terms local training actually optimises.
    pub fn terms(&self) -> ObjectiveTerms {
        match self.algorithm {
            Algorithm::FedAvg => ObjectiveTerms::cross_entropy_only(),
            Algorithm::FedProx => ObjectiveTerms {
                prox_mu: self.fedprox_mu,
                ..ObjectiveTerms::cross_entropy_only()
            },
            Algorithm::FedGid => ObjectiveTerms {
                em: true,
                intervention: self.intervention.enabled.then_some(self.intervention),
                lambda_gd: self.distill.lambda_gd,
                temperature: self.distill.temperature,
                prox_mu: 0.0,
            },
        }
    }
}

/// Active loss terms of the local objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub em: bool,
    pub intervention: Option<InterventionConfig>,
    /// 0 switches the distillation term off entirely.
    pub lambda_gd: f64,
    pub temperature: f64,
    pub prox_mu: f64,
}

impl ObjectiveTerms {
    pub fn cross_entropy_only() -> Self {
        ObjectiveTerms {
            em: true,
            intervention: None,
            lambda_gd: 0.0,
            temperature: 1.0,
            prox_mu: 0.0,
        }
    }

    fn needs_global_features(&self) -> bool {
        self.lambda_gd > 0.0
    }
}

/// Global-encoder outputs a batch is paired with. Background codes are
/// already permuted: row `i` belongs to the image whose background sample
/// `i` receives.
#[derive(Clone, Copy, Debug)]
pub struct GlobalBatch<'a> {
    pub features: Option<ArrayView2<'a, f64>>,
    pub background_features: Option<ArrayView2<'a, f64>>,
    pub background_maps: Option<ArrayView4<'a, f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLosses {
    pub em: f64,
    pub gi: f64,
    pub gd: f64,
    pub prox: f64,
    pub total: f64,
}

/// Loss and gradient of the local objective on one batch.
///
/// `global` is only read for the proximal term.
pub fn batch_objective(
    local: &ModelParams,
    global: &ModelParams,
    images: ArrayView4<f64>,
    labels: &[usize],
    paired: &GlobalBatch,
    terms: &ObjectiveTerms,
) -> Result<(BatchLosses, ModelParams)> {
    let mut grads = local.zeros_like();
    let mut losses = BatchLosses::default();

    let conv = ConvPass::run(local, images)?;
    let tail = TailPass::run(local, conv.act.view())?;
    let feature = &tail.feature;
    let mut dfeature = Array2::<f64>::zeros(feature.raw_dim());
    let mut dmap: Option<Array4<f64>> = None;

    if terms.em {
        let logits = crate::model::classify_feature(local, feature.view())?;
        let (l, dlogits) = cross_entropy(logits.view(), labels)?;
        losses.em = l;
        dfeature += &head_backward(local, feature, &dlogits, &mut grads);
    }

    let lambda = terms.lambda_gd;
    let global_features =
        if terms.needs_global_features() {
            Some(paired.features.ok_or_else(|| {
                Error::InvalidArgument("distillation needs global features".into())
            })?)
        } else {
            None
        };

    if let Some(gi) = terms.intervention {
        match gi.level {
            InterventionLevel::Feature => {
                let fb = paired.background_features.ok_or_else(|| {
                    Error::InvalidArgument(
                        "feature-level intervention needs background features".into(),
                    )
                })?;
                let f_inv = mix_features(feature.view(), fb, gi.alpha)?;
                let logits = crate::model::classify_feature(local, f_inv.view())?;
                let (l, dlogits) = cross_entropy(logits.view(), labels)?;
                losses.gi = l;
                let mut dinv = head_backward(local, &f_inv, &dlogits, &mut grads);
                if let Some(fg) = global_features {
                    let (kl, g) = feature_kl_grad(f_inv.view(), fg, terms.temperature)?;
                    losses.gd += kl;
                    dinv.scaled_add(lambda, &g);
                }
                dfeature.scaled_add(gi.alpha, &dinv);
            }
            InterventionLevel::FeatureMap => {
                let mb = paired.background_maps.ok_or_else(|| {
                    Error::InvalidArgument("map-level intervention needs background maps".into())
                })?;
                let mixed = mix_features(conv.act.view(), mb, gi.alpha)?;
                let mixed_tail = TailPass::run(local, mixed.view())?;
                let f_inv = &mixed_tail.feature;
                let logits = crate::model::classify_feature(local, f_inv.view())?;
                let (l, dlogits) = cross_entropy(logits.view(), labels)?;
                losses.gi = l;
                let mut dinv = head_backward(local, f_inv, &dlogits, &mut grads);
                if let Some(fg) = global_features {
                    let (kl, g) = feature_kl_grad(f_inv.view(), fg, terms.temperature)?;
                    losses.gd += kl;
                    dinv.scaled_add(lambda, &g);
                }
                let mut dmixed = mixed_tail.backward(local, &dinv, &mut grads);
                dmixed.mapv_inplace(|v| v * gi.alpha);
                dmap = Some(dmixed);
            }
        }
    }

    if let Some(fg) = global_features {
        let (kl, g) = feature_kl_grad(feature.view(), fg, terms.temperature)?;
        losses.gd += kl;
        dfeature.scaled_add(lambda, &g);
    }

    let mut dact = tail.backward(local, &dfeature, &mut grads);
    if let Some(extra) = dmap {
        dact += &extra;
    }
    conv.backward(&dact, &mut grads);

    if terms.prox_mu > 0.0 {
        losses.prox = 0.5 * terms.prox_mu * local.squared_distance(global)?;
        for ((_, g), ((_, w), (_, w0))) in grads
            .tensors_mut()
            .into_iter()
            .zip(local.tensors().into_iter().zip(global.tensors()))
        {
            for ((g, w), w0) in g.iter_mut().zip(w).zip(w0) {
                *g += terms.prox_mu * (w - w0);
            }
        }
    }

    losses.total = losses.em + losses.gi + lambda * losses.gd + losses.prox;
    Ok((losses, grads))
}

/// Per-client metrics for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub loss_em: f64,
    pub loss_gi: f64,
    pub loss_gd: f64,
    pub loss_total: f64,
    pub num_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub per_client: Vec<ClientMetrics>,
    pub global_ood_accuracy: f64,
}

const ENCODE_CHUNK: usize = 256;

/// Frozen global-encoder outputs for every image a client holds.
struct GlobalCodes {
    features: Option<Array2<f64>>,
    background_features: Option<Array2<f64>>,
    background_maps: Option<Array4<f64>>,
}

/// One client: its id and private data. Only parameters and scalar metrics
/// leave [`Client::local_update`].
pub struct Client<'a> {
    pub id: usize,
    dataset: &'a Dataset,
    indices: Vec<usize>,
    extractor: &'a BackgroundExtractor,
}

impl<'a> Client<'a> {
    pub fn new(
        id: usize,
        dataset: &'a Dataset,
        indices: Vec<usize>,
        extractor: &'a BackgroundExtractor,
    ) -> Self {
        Client {
            id,
            dataset,
            indices,
            extractor,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.indices.len()
    }

    fn encode_globals(&self, global: &ModelParams, terms: &ObjectiveTerms) -> Result<GlobalCodes> {
        let n = self.indices.len();
        let arch = global.arch;
        let want_features = terms.needs_global_features();
        let level = terms.intervention.map(|g| g.level);
        let mut codes = GlobalCodes {
            features: want_features.then(|| Array2::zeros((n, arch.feature_dim))),
            background_features: (level == Some(InterventionLevel::Feature))
                .then(|| Array2::zeros((n, arch.feature_dim))),
            background_maps: (level == Some(InterventionLevel::FeatureMap)).then(|| {
                Array4::zeros((n, arch.conv_channels, arch.conv_height(), arch.conv_width()))
            }),
        };
        for start in (0..n).step_by(ENCODE_CHUNK) {
            let end = (start + ENCODE_CHUNK).min(n);
            let chunk = &self.indices[start..end];
            if let Some(f) = codes.features.as_mut() {
                let out = forward(global, self.dataset.batch(chunk).view())?;
                f.slice_mut(ndarray::s![start..end, ..])
                    .assign(&out.feature);
            }
            if level.is_some() {
                let mut bgs = Array4::<f64>::zeros((chunk.len(), arch.height, arch.width, 3));
                for (k, &i) in chunk.iter().enumerate() {
                    let bg = self.extractor.extract(i, &self.dataset.images[i])?;
                    bgs.index_axis_mut(Axis(0), k).assign(&bg);
                }
                let out = forward(global, bgs.view())?;
                if let Some(f) = codes.background_features.as_mut() {
                    f.slice_mut(ndarray::s![start..end, ..])
                        .assign(&out.feature);
                }
                if let Some(m) = codes.background_maps.as_mut() {
                    m.slice_mut(ndarray::s![start..end, .., .., ..])
                        .assign(&out.feature_map);
                }
            }
        }
        Ok(codes)
    }

    /// Trains a copy of `global` on this client's data.
    pub fn local_update(
        &self,
        global: &ModelParams,
        config: &TrainConfig,
        round: usize,
    ) -> Result<(ModelParams, ClientMetrics)> {
        if self.indices.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {} has no data",
                self.id
            )));
        }
        let terms = config.terms();
        let mut params = global.clone();
        let mut sums = BatchLosses::default();
        let mut batches = 0usize;
        if config.local_epochs > 0 {
            let codes = self.encode_globals(global, &terms)?;
            let labels: Vec<usize> = self
                .indices
                .iter()
                .map(|&i| self.dataset.images[i].label)
                .collect();
            for epoch in 0..config.local_epochs {
                for (b, (local_rows, paired_rows)) in
                    epoch_batches(config, round, self.id, epoch, self.indices.len())
                        .into_iter()
                        .enumerate()
                {
                    let local_rows = &local_rows[..];
                    let global_rows: Vec<usize> =
                        local_rows.iter().map(|&r| self.indices[r]).collect();
                    let batch_labels: Vec<usize> = local_rows.iter().map(|&r| labels[r]).collect();
                    let images = self.dataset.batch(&global_rows);
                    let f_g = codes
                        .features
                        .as_ref()
                        .map(|f| f.select(Axis(0), local_rows));
                    let bf = codes
                        .background_features
                        .as_ref()
                        .map(|f| f.select(Axis(0), &paired_rows));
                    let bm = codes
                        .background_maps
                        .as_ref()
                        .map(|m| m.select(Axis(0), &paired_rows));
                    let paired = GlobalBatch {
                        features: f_g.as_ref().map(|a| a.view()),
                        background_features: bf.as_ref().map(|a| a.view()),
                        background_maps: bm.as_ref().map(|a| a.view()),
                    };
                    let (losses, grads) = batch_objective(
                        &params,
                        global,
                        images.view(),
                        &batch_labels,
                        &paired,
                        &terms,
                    )?;
                    if !losses.total.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "loss at round {round}, client {}, epoch {epoch}, batch {b}",
                            self.id
                        )));
                    }
                    params =
                        sgd_step(&params, &grads, config.lr, config.weight_decay).map_err(|e| {
                            Error::NonFinite(format!(
                                "round {round}, client {}, epoch {epoch}, batch {b}: {e}",
                                self.id
                            ))
                        })?;
                    sums.em += losses.em;
                    sums.gi += losses.gi;
                    sums.gd += losses.gd;
                    sums.prox += losses.prox;
                    sums.total += losses.total;
                    batches += 1;
                }
            }
        }
        let mean = |v: f64| {
            if batches == 0 {
                0.0
            } else {
                v / batches as f64
            }
        };
        let metrics = ClientMetrics {
            client_id: self.id,
            loss_em: mean(sums.em),
            loss_gi: mean(sums.gi),
            loss_gd: mean(sums.gd),
            loss_total: mean(sums.total),
            num_samples: self.indices.len(),
        };
        Ok((params, metrics))
    }
}

/// Mini-batches of one local epoch as `(rows, partner_rows)`, both indexing
/// the client's own samples. `partner_rows[j]` is the sample whose background
/// is injected into `rows[j]`: a seeded permutation within the batch.
pub fn epoch_batches(
    config: &TrainConfig,
    round: usize,
    client_id: usize,
    epoch: usize,
    num_samples: usize,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let tags = [round as u64, client_id as u64, epoch as u64];
    let mut order: Vec<usize> = (0..num_samples).collect();
    order.shuffle(&mut rng_for(
        config.seed,
        &[0x5f, tags[0], tags[1], tags[2]],
    ));
    order
        .chunks(config.batch_size)
        .enumerate()
        .map(|(b, rows)| {
            let perm_seed = derive_seed(config.seed, &[0xb6, tags[0], tags[1], tags[2], b as u64]);
            let partners = batch_permutation(rows.len(), perm_seed)
                .into_iter()
                .map(|j| rows[j])
                .collect();
            (rows.to_vec(), partners)
        })
        .collect()
}

/// Weighted average `sum_i w_i p_i / sum_i w_i`, summed in slice order.
pub fn aggregate(params_list: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = params_list
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if weights.len() != params_list.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights for {} parameter sets",
            weights.len(),
            params_list.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(
            "aggregation weights must be non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "aggregation weights are all zero".into(),
        ));
    }
    for p in &params_list[1..] {
        first.check_compatible(p)?;
    }
    let mut out = first.zeros_like();
    for (p, &w) in params_list.iter().zip(weights) {
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(p.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    for (_, dst) in out.tensors_mut() {
        dst.iter_mut().for_each(|d| *d /= total);
    }
    Ok(out)
}

/// [`aggregate`] over `(client_id, params, weight)` triples, summed in
/// client-id order so the result does not depend on arrival order.
pub fn aggregate_updates(updates: &[(usize, ModelParams, f64)]) -> Result<ModelParams> {
    let mut sorted: Vec<&(usize, ModelParams, f64)> = updates.iter().collect();
    sorted.sort_by_key(|u| u.0);
    let params: Vec<ModelParams> = sorted.iter().map(|u| u.1.clone()).collect();
    let weights: Vec<f64> = sorted.iter().map(|u| u.2).collect();
    aggregate(&params, &weights)
}

/// Top-1 accuracy of `params` on a dataset.
pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(ENCODE_CHUNK) {
        let out = forward(params, dataset.batch(chunk).view())?;
        correct += predict(&out.logits)
            .iter()
            .zip(chunk)
            .filter(|(p, &i)| **p == dataset.images[i].label)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Clients taking part in `round`.
pub fn sample_clients(config: &TrainConfig, round: usize) -> Vec<usize> {
    let k = config.num_clients;
    if config.sample_fraction >= 1.0 {
        return (0..k).collect();
    }
    let m = ((config.sample_fraction * k as f64).round() as usize).clamp(1, k);
    let mut chosen = sample(&mut rng_for(config.seed, &[0x5a, round as u64]), k, m).into_vec();
    chosen.sort_unstable();
    chosen
}

pub fn architecture_for(dataset: &Dataset) -> Architecture {
    let (h, w) = dataset.spec.image_size;
    Architecture::simple_cnn(h, w, dataset.spec.num_classes)
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub initial: ModelParams,
    pub global: ModelParams,
    /// Local models of the last round, by client id.
    pub last_local: Vec<(usize, ModelParams)>,
}

/// Observer for a running experiment; each report is delivered as soon as
/// its round completes.
pub trait RoundSink {
    fn round_finished(&mut self, report: &RoundReport, global: &ModelParams) -> Result<()>;
}

impl RoundSink for () {
    fn round_finished(&mut self, _: &RoundReport, _: &ModelParams) -> Result<()> {
        Ok(())
    }
}

pub fn run_experiment(
    config: &TrainConfig,
    train: &Dataset,
    ood_test: &Dataset,
    partition: &ClientPartition,
    extractor: &BackgroundExtractor,
    sink: &mut dyn RoundSink,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    partition.validate(train.len())?;
    if partition.num_clients != config.num_clients {
        return Err(Error::InvalidArgument(format!(
            "partition has {} clients, config asks for {}",
            partition.num_clients, config.num_clients
        )));
    }
    let initial = init_params(architecture_for(train), config.seed)?;
    let clients: Vec<Client> = partition
        .assignments
        .iter()
        .enumerate()
        .map(|(id, idx)| Client::new(id, train, idx.clone(), extractor))
        .collect();

    let mut global = initial.clone();
    let mut reports = Vec::with_capacity(config.num_rounds);
    let mut last_local = Vec::new();
    for round in 1..=config.num_rounds {
        let chosen = sample_clients(config, round);
        let results: Vec<Result<(ModelParams, ClientMetrics)>> = chosen
            .par_iter()
            .map(|&c| clients[c].local_update(&global, config, round))
            .collect();
        let mut updates = Vec::with_capacity(chosen.len());
        let mut per_client = Vec::with_capacity(chosen.len());
        for (&c, r) in chosen.iter().zip(results) {
            let (params, metrics) = r?;
            updates.push((c, params, clients[c].num_samples() as f64));
            per_client.push(metrics);
        }
        global = aggregate_updates(&updates)?;
        let report = RoundReport {
            round,
            per_client,
            global_ood_accuracy: evaluate(&global, ood_test)?,
        };
        sink.round_finished(&report, &global)?;
        reports.push(report);
        last_local = updates.into_iter().map(|(c, p, _)| (c, p)).collect();
    }
    Ok(ExperimentOutcome {
        reports,
        initial,
        global,
        last_local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::seed::rng_for;
    use rand::Rng;

    fn scalar(v: f64) -> ModelParams {
        let arch = Architecture {
            height: 2,
            width: 2,
            in_channels: 1,
            conv_channels: 1,
            kernel: 1,
            feature_dim: 1,
            num_classes: 1,
        };
        let mut p = ModelParams::zeros(arch);
        p.conv_b[0] = v;
        p
    }

    #[test]
    fn aggregate_arithmetic() {
        let out = aggregate(&[scalar(2.0), scalar(4.0)], &[1.0, 1.0]).unwrap();
        assert_eq!(out.conv_b[0], 3.0);
        let p = init_params(Architecture::simple_cnn(8, 8, 10), 1).unwrap();
        let same = aggregate(&[p.clone(), p.clone(), p.clone()], &[0.3, 1.7, 5.0]).unwrap();
        for ((_, a), (_, b)) in same.tensors().iter().zip(p.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn aggregate_errors() {
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(&[scalar(1.0)], &[0.0]).is_err());
        assert!(aggregate(&[scalar(1.0)], &[-1.0]).is_err());
        let other = init_params(Architecture::simple_cnn(8, 8, 10), 1).unwrap();
        assert!(aggregate(&[scalar(1.0), other], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn aggregate_updates_ignores_arrival_order() {
        let arch = Architecture::simple_cnn(8, 8, 10);
        let mut rng = rng_for(3, &[]);
        let updates: Vec<(usize, ModelParams, f64)> = (0..4)
            .map(|c| {
                (
                    c,
                    init_params(arch, c as u64).unwrap(),
                    rng.random_range(1.0..50.0),
                )
            })
            .collect();
        let base = aggregate_updates(&updates).unwrap();
        let mut shuffled = updates.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        assert_eq!(aggregate_updates(&shuffled).unwrap(), base);
    }

    #[test]
    fn client_sampling() {
        let mut cfg = TrainConfig {
            num_clients: 10,
            ..Default::default()
        };
        assert_eq!(sample_clients(&cfg, 1), (0..10).collect::<Vec<_>>());
        cfg.sample_fraction = 0.3;
        let a = sample_clients(&cfg, 1);
        assert_eq!(a.len(), 3);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, sample_clients(&cfg, 1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig {
                sample_fraction: 0.0,
                ..Default::default()
            },
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                num_clients: 0,
                ..Default::default()
            },
            TrainConfig {
                beta: 0.0,
                ..Default::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn algorithm_terms() {
        let mut cfg = TrainConfig::default();
        cfg.algorithm = Algorithm::FedAvg;
        assert_eq!(cfg.terms(), ObjectiveTerms::cross_entropy_only());
        cfg.algorithm = Algorithm::FedProx;
        assert_eq!(cfg.terms().prox_mu, 0.01);
        cfg.algorithm = Algorithm::FedGid;
        assert!(cfg.terms().intervention.is_some());
        cfg.intervention.enabled = false;
        assert!(cfg.terms().intervention.is_none());
    }
}
