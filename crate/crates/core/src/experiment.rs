//! Dataset directories, single runs, ablation sweeps and summary tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{
    dirichlet_partition, generate_dataset, synthetic_digits, ClientPartition, Dataset, DatasetSpec,
    Split,
};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, Algorithm, ExperimentOutcome, TrainConfig};
use crate::intervention::{BackgroundExtractor, InterventionLevel};
use crate::rundir::{RunConfig, RunSummary, RunWriter, PARTITION_FILE};
use crate::seed::derive_seed;
use crate::stats::mean_std;
use crate::storage::{load_dataset, save_dataset, save_partition};

pub const TRAIN_FILE: &str = "train.fgid";
pub const OOD_TEST_FILE: &str = "ood_test.fgid";

/// Settings for a generated ColorMNIST-style dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub correlation: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 12,
            train_size: 12_000,
            test_size: 2_000,
            correlation: 0.9,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, split: Split) -> DatasetSpec {
        let tag = match split {
            Split::Train => 1,
            Split::OodTest => 3,
        };
        DatasetSpec::new(
            self.image_size,
            self.correlation,
            split,
            derive_seed(self.seed, &[tag]),
        )
    }

    pub fn size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size,
            Split::OodTest => self.test_size,
        }
    }

    /// Renders fresh glyphs and colours them for `split`.
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        let spec = self.spec(split);
        let corpus = synthetic_digits(
            self.size(split),
            self.image_size,
            self.image_size,
            derive_seed(spec.seed, &[2]),
        );
        generate_dataset(&spec, &corpus)
    }
}

pub fn split_file(split: Split) -> &'static str {
    match split {
        Split::Train => TRAIN_FILE,
        Split::OodTest => OOD_TEST_FILE,
    }
}

pub fn write_split(dir: &Path, split: Split, dataset: &Dataset) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(split_file(split));
    save_dataset(&path, dataset, None)?;
    Ok(path)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let (dataset, _) = load_dataset(&dir.join(split_file(split)))?;
    if dataset.spec.split != split {
        return Err(Error::InvalidArgument(format!(
            "{} holds a {:?} split",
            dir.join(split_file(split)).display(),
            dataset.spec.split
        )));
    }
    Ok(dataset)
}

/// One ablation configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub label: &'static str,
    pub dir_name: &'static str,
    pub intervention: Option<InterventionLevel>,
    pub distill: bool,
}

impl Variant {
    pub const fn new(
        label: &'static str,
        dir_name: &'static str,
        intervention: Option<InterventionLevel>,
        distill: bool,
    ) -> Self {
        Variant {
            label,
            dir_name,
            intervention,
            distill,
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.intervention.is_none() && !self.distill
    }

    /// `base` with the algorithm and module switches of this variant. The
    /// distillation weight is taken from `base` when distillation is on.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut config = base.clone();
        if self.is_baseline() {
            config.algorithm = Algorithm::FedAvg;
            return config;
        }
        config.algorithm = Algorithm::FedGid;
        config.intervention.enabled = self.intervention.is_some();
        if let Some(level) = self.intervention {
            config.intervention.level = level;
        }
        if !self.distill {
            config.distill.lambda_gd = 0.0;
        }
        config
    }
}

pub const FEDAVG: Variant = Variant::new("fedavg", "fedavg", None, false);
pub const GD: Variant = Variant::new("+GD", "gd", None, true);
pub const GI_F: Variant = Variant::new("+GI_F", "gi_f", Some(InterventionLevel::Feature), false);
pub const GI_FM: Variant = Variant::new(
    "+GI_FM",
    "gi_fm",
    Some(InterventionLevel::FeatureMap),
    false,
);
pub const GI_F_GD: Variant = Variant::new(
    "+GI_F+GD",
    "gi_f_gd",
    Some(InterventionLevel::Feature),
    true,
);
pub const GI_FM_GD: Variant = Variant::new(
    "+GI_FM+GD",
    "gi_fm_gd",
    Some(InterventionLevel::FeatureMap),
    true,
);

pub const VARIANTS: [Variant; 6] = [FEDAVG, GD, GI_F, GI_FM, GI_F_GD, GI_FM_GD];

/// Trials differ in both the initialisation and the partition seed.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add(trial as u64)
}

pub fn partition_for(config: &TrainConfig, train: &Dataset) -> Result<ClientPartition> {
    dirichlet_partition(
        &train.labels(),
        config.num_clients,
        config.beta,
        derive_seed(config.seed, &[0xd1]),
    )
}

pub fn extractor_for(config: &RunConfig) -> Result<BackgroundExtractor> {
    match &config.bbox_file {
        Some(path) => BackgroundExtractor::load_bbox_file(path),
        None => Ok(BackgroundExtractor::OracleMask),
    }
}

/// Runs one configuration on in-memory data. With `out` set, the run
/// directory is written as the run progresses.
pub fn execute_run(
    config: &RunConfig,
    train: &Dataset,
    ood_test: &Dataset,
    out: Option<&Path>,
) -> Result<(RunSummary, ExperimentOutcome)> {
    config.train.validate()?;
    let partition = partition_for(&config.train, train)?;
    let extractor = extractor_for(config)?;
    let mut writer = match out {
        Some(dir) => {
            let w = RunWriter::create(dir, config)?;
            save_partition(&dir.join(PARTITION_FILE), &partition)?;
            Some(w)
        }
        None => None,
    };
    let outcome = match writer.as_mut() {
        Some(w) => run_experiment(&config.train, train, ood_test, &partition, &extractor, w)?,
        None => run_experiment(
            &config.train,
            train,
            ood_test,
            &partition,
            &extractor,
            &mut (),
        )?,
    };
    let summary = RunSummary {
        label: config.label.clone(),
        algorithm: config.train.algorithm.name().to_string(),
        beta: config.train.beta,
        seed: config.train.seed,
        rounds: outcome.reports.len(),
        final_ood_accuracy: outcome
            .reports
            .last()
            .map(|r| r.global_ood_accuracy)
            .unwrap_or(0.0),
    };
    if let Some(w) = writer.as_mut() {
        w.finish(&summary, &outcome.global, &outcome.last_local)?;
    }
    Ok((summary, outcome))
}

/// Loads the dataset named in `config` and runs it into `out`.
pub fn run_from_disk(config: &RunConfig, out: &Path) -> Result<RunSummary> {
    let train = load_split(&config.dataset, Split::Train)?;
    let ood = load_split(&config.dataset, Split::OodTest)?;
    execute_run(config, &train, &ood, Some(out)).map(|(s, _)| s)
}

pub struct AblationRun {
    pub variant: Variant,
    pub trial: usize,
    pub summary: RunSummary,
    pub outcome: ExperimentOutcome,
}

/// Every variant in `variants` for `trials` trials. Run directories go to
/// `<out>/<variant>/trial_<t>` when `out` is set.
pub fn ablate(
    base: &RunConfig,
    variants: &[Variant],
    trials: usize,
    train: &Dataset,
    ood_test: &Dataset,
    out: Option<&Path>,
) -> Result<Vec<AblationRun>> {
    if trials == 0 {
        return Err(Error::InvalidArgument(
            "at least one trial is required".into(),
        ));
    }
    let mut runs = Vec::with_capacity(variants.len() * trials);
    for trial in 0..trials {
        for variant in variants {
            let mut config = base.clone();
            config.label = variant.label.to_string();
            config.train = variant.apply(&base.train);
            config.train.seed = trial_seed(base.train.seed, trial);
            let dir = out.map(|o| o.join(variant.dir_name).join(format!("trial_{trial}")));
            let (summary, outcome) = execute_run(&config, train, ood_test, dir.as_deref())?;
            runs.push(AblationRun {
                variant: *variant,
                trial,
                summary,
                outcome,
            });
        }
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub beta: f64,
    /// Final OOD accuracy per trial, in run order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; absent for a single trial.
    pub std: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    /// One row per `(label, beta)`, in order of first appearance.
    pub fn from_runs<'a>(runs: impl IntoIterator<Item = &'a RunSummary>) -> Self {
        let mut groups: Vec<(String, f64, Vec<f64>)> = Vec::new();
        for run in runs {
            match groups
                .iter_mut()
                .find(|(l, b, _)| *l == run.label && b.to_bits() == run.beta.to_bits())
            {
                Some(group) => group.2.push(run.final_ood_accuracy),
                None => groups.push((run.label.clone(), run.beta, vec![run.final_ood_accuracy])),
            }
        }
        let rows = groups
            .into_iter()
            .map(|(label, beta, accuracies)| {
                let (mean, std) = mean_std(&accuracies).expect("groups are non-empty");
                SummaryRow {
                    label,
                    beta,
                    accuracies,
                    mean,
                    std,
                }
            })
            .collect();
        SummaryTable { rows }
    }

    pub fn row(&self, label: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Fixed-width table with accuracies in percent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>6}  {:>16}",
            "config", "beta", "trials", "OOD acc (%)"
        );
        for row in &self.rows {
            let std = match row.std {
                Some(s) => format!("{:.2}", 100.0 * s),
                None => "n/a".to_string(),
            };
            let cell = format!("{:.2} ± {}", 100.0 * row.mean, std);
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>6}  {:>16}",
                row.label,
                row.beta,
                row.accuracies.len(),
                cell
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
