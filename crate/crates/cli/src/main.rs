use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use serde::Serialize;

use fedgid::datagen::{background_label_agreement, Split};
use fedgid::experiment::{ablate, load_split, write_split, DataConfig, SummaryTable, VARIANTS};
use fedgid::federation::{Algorithm, TrainConfig};
use fedgid::gradcam::{grad_cam, mass_inside};
use fedgid::intervention::InterventionLevel;
use fedgid::model::forward;
use fedgid::projection::{mean_paired_distance, project_pair};
use fedgid::raster::{scatter, write_pgm, write_ppm};
use fedgid::rundir::{read_run, RunConfig};
use fedgid::storage::load_checkpoint;
use fedgid::{Error, Result};

const RUN_ROOT_ENV: &str = "FEDGID_RUN_ROOT";

#[derive(Parser)]
#[command(
    name = "fedgid",
    version,
    about = "Federated OOD generalisation laboratory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a coloured-digit dataset directory.
    GenData(GenDataArgs),
    /// Train one configuration.
    Run(RunArgs),
    /// Train every ablation configuration over several trials.
    Ablate(AblateArgs),
    /// Write Grad-CAM heatmaps for a checkpoint.
    Gradcam(GradcamArgs),
    /// Project two checkpoints' features onto a shared 2-D PCA.
    ProjectFeatures(ProjectArgs),
    /// Summarise finished run directories.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    OodTest,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum GiLevel {
    F,
    Fm,
    Off,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    split: SplitArg,
    #[arg(long, default_value_t = 0.9)]
    correlation: f64,
    #[arg(long, default_value_t = 12_000)]
    train_size: usize,
    #[arg(long, default_value_t = 2_000)]
    test_size: usize,
    #[arg(long, default_value_t = 12)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by gen-data.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 20)]
    rounds: usize,
    #[arg(long, default_value_t = 5)]
    clients: usize,
    #[arg(long, default_value_t = 5)]
    local_epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    wd: f64,
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    #[arg(long = "lambda", default_value_t = 1.0)]
    lambda_gd: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, value_enum, default_value = "fm")]
    gi_level: GiLevel,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// FedProx proximal weight.
    #[arg(long, default_value_t = 0.01)]
    mu: f64,
    #[arg(long, default_value_t = 1.0)]
    sample_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save the global model every N rounds (0: final only).
    #[arg(long, default_value_t = 5)]
    checkpoint_every: usize,
    /// `id x1 y1 x2 y2` box table used instead of exact object masks.
    #[arg(long)]
    bbox_file: Option<PathBuf>,
}

impl TrainArgs {
    fn train_config(&self, algorithm: Algorithm) -> TrainConfig {
        let mut c = TrainConfig {
            num_rounds: self.rounds,
            num_clients: self.clients,
            local_epochs: self.local_epochs,
            batch_size: self.batch,
            lr: self.lr,
            weight_decay: self.wd,
            sample_fraction: self.sample_fraction,
            seed: self.seed,
            beta: self.beta,
            algorithm,
            fedprox_mu: self.mu,
            ..TrainConfig::default()
        };
        c.intervention.alpha = self.alpha;
        match self.gi_level {
            GiLevel::F => c.intervention.level = InterventionLevel::Feature,
            GiLevel::Fm => c.intervention.level = InterventionLevel::FeatureMap,
            GiLevel::Off => c.intervention.enabled = false,
        }
        c.distill.lambda_gd = self.lambda_gd;
        c.distill.temperature = self.tau;
        c
    }

    fn run_config(&self, label: String, algorithm: Algorithm) -> RunConfig {
        RunConfig {
            label,
            dataset: self.dataset.clone(),
            bbox_file: self.bbox_file.clone(),
            checkpoint_every: self.checkpoint_every,
            train: self.train_config(algorithm),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value = "fedgid")]
    algorithm: Algorithm,
    /// Row label in reports; defaults to the algorithm name.
    #[arg(long)]
    label: Option<String>,
    /// Run directory; defaults to a name under $FEDGID_RUN_ROOT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Sweep directory; defaults to $FEDGID_RUN_ROOT/ablation (or ./runs/ablation).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImageSelection {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "ood-test")]
    split: SplitArg,
    /// Image ids, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "count")]
    ids: Vec<usize>,
    /// Use the first N images instead of explicit ids.
    #[arg(long)]
    count: Option<usize>,
}

impl ImageSelection {
    fn split(&self) -> Result<Split> {
        match self.split {
            SplitArg::Train => Ok(Split::Train),
            SplitArg::OodTest => Ok(Split::OodTest),
            SplitArg::Both => Err(Error::InvalidArgument("choose a single split".into())),
        }
    }

    fn ids(&self, available: usize) -> Result<Vec<usize>> {
        let ids = match self.count {
            Some(n) => (0..n).collect(),
            None => self.ids.clone(),
        };
        if ids.is_empty() {
            return Err(Error::InvalidArgument("no images selected".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= available) {
            return Err(Error::InvalidArgument(format!(
                "unknown image id {bad} (dataset has {available} images)"
            )));
        }
        Ok(ids)
    }
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    images: ImageSelection,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    checkpoint_a: PathBuf,
    #[arg(long)]
    checkpoint_b: PathBuf,
    #[command(flatten)]
    images: ImageSelection,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories; each must hold a finished run.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let config = DataConfig {
        image_size: args.image_size,
        train_size: args.train_size,
        test_size: args.test_size,
        correlation: args.correlation,
        seed: args.seed,
    };
    let splits: &[Split] = match args.split {
        SplitArg::Train => &[Split::Train],
        SplitArg::OodTest => &[Split::OodTest],
        SplitArg::Both => &[Split::Train, Split::OodTest],
    };
    for &split in splits {
        let dataset = config.generate(split)?;
        let path = write_split(&args.out, split, &dataset)?;
        println!(
            "{}: {} images, measured correlation {:.4} -> {}",
            match split {
                Split::Train => "train",
                Split::OodTest => "ood_test",
            },
            dataset.len(),
            background_label_agreement(&dataset.images),
            path.display()
        );
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let label = args
        .label
        .clone()
        .unwrap_or_else(|| args.algorithm.name().to_string());
    let config = args.train.run_config(label, args.algorithm);
    let out = args.out.clone().unwrap_or_else(|| {
        run_root().join(format!(
            "{}_beta{}_seed{}",
            config.label.replace('+', "_"),
            config.train.beta,
            config.train.seed
        ))
    });
    let summary = fedgid::experiment::run_from_disk(&config, &out)?;
    println!(
        "{} rounds, final OOD accuracy {:.4} -> {}",
        summary.rounds,
        summary.final_ood_accuracy,
        out.display()
    );
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let base = args.train.run_config(String::new(), Algorithm::FedGid);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| run_root().join("ablation"));
    let train = load_split(&base.dataset, Split::Train)?;
    let ood = load_split(&base.dataset, Split::OodTest)?;
    let runs = ablate(&base, &VARIANTS, args.trials, &train, &ood, Some(&out))?;
    let table = SummaryTable::from_runs(runs.iter().map(|r| &r.summary));
    let text = table.to_text();
    write_text(&out.join("summary.txt"), &text)?;
    write_text(&out.join("summary.json"), &(table.to_json()? + "\n"))?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct CamRecord {
    id: usize,
    label: usize,
    predicted: usize,
    mass_in_box: f64,
    box_fraction: f64,
}

fn gradcam_cmd(args: GradcamArgs) -> Result<()> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let dataset = load_split(&args.images.dataset, args.images.split()?)?;
    let ids = args.images.ids(dataset.len())?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut lines = String::new();
    for id in ids {
        let image = &dataset.images[id];
        let cam = grad_cam(&checkpoint.params, &image.to_f64())?;
        write_pgm(&args.out.join(format!("heatmap_{id:05}.pgm")), &cam.heatmap)?;
        write_ppm(&args.out.join(format!("image_{id:05}.ppm")), &image.pixels)?;
        let record = CamRecord {
            id,
            label: image.label,
            predicted: cam.predicted,
            mass_in_box: mass_inside(&cam.heatmap, image.bbox),
            box_fraction: image.bbox.area() as f64 / (image.height() * image.width()) as f64,
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    write_text(&args.out.join("predictions.jsonl"), &lines)?;
    println!("wrote heatmaps to {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ProjectionRecord<'a> {
    ids: &'a [usize],
    mean_paired_distance: f64,
    #[serde(flatten)]
    projection: &'a fedgid::projection::PairProjection,
}

fn project_cmd(args: ProjectArgs) -> Result<()> {
    let a = load_checkpoint(&args.checkpoint_a)?;
    let b = load_checkpoint(&args.checkpoint_b)?;
    let dataset = load_split(&args.images.dataset, args.images.split()?)?;
    let ids = args.images.ids(dataset.len())?;
    let images = dataset.batch(&ids);
    let fa = forward(&a.params, images.view())?.feature;
    let fb = forward(&b.params, images.view())?.feature;
    let projection = project_pair(fa.view(), fb.view())?;
    let distance = mean_paired_distance(&projection);
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let record = ProjectionRecord {
        ids: &ids,
        mean_paired_distance: distance,
        projection: &projection,
    };
    write_text(
        &args.out.join("coordinates.json"),
        &(serde_json::to_string_pretty(&record)? + "\n"),
    )?;
    let plot = scatter(
        &[
            (&projection.a, [220, 40, 40]),
            (&projection.b, [40, 80, 220]),
        ],
        256,
    );
    write_ppm(&args.out.join("scatter.ppm"), &plot)?;
    if projection.degenerate {
        println!("warning: features do not span two dimensions; projection is degenerate");
    }
    println!(
        "{} samples, mean paired distance {:.6} -> {}",
        images.len_of(Axis(0)),
        distance,
        args.out.display()
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let summaries = args
        .runs
        .iter()
        .map(|dir| read_run(dir))
        .collect::<Result<Vec<_>>>()?;
    let table = SummaryTable::from_runs(&summaries);
    if let Some(path) = &args.json {
        write_text(path, &(table.to_json()? + "\n"))?;
    }
    print!("{}", table.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Gradcam(a) => gradcam_cmd(a),
        Command::ProjectFeatures(a) => project_cmd(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
