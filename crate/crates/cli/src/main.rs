//! `seqembed` command line: data preparation, training, evaluation, plotting
//! and gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use seqembed::config::{load_config, DataSource, Precision};
use seqembed::datasets::{load_idx, make_synthetic_clusters, read_container, split_identity_sequence, write_container};
use seqembed::eval::{cluster_report, embed_dataset, export_scatter, make_pairs, test_accuracy, verification_accuracy};
use seqembed::losses::ClassifierHead;
use seqembed::network::{load_checkpoint, save_checkpoint, Checkpoint};
use seqembed::trainer::{gradcheck, write_metrics_csv, GradcheckConfig, Trainer, RECORD_HEAD};
use seqembed::{Dataset, Error, Rng, Scalar};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Engine(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type CliResult<T = ()> = Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Parser)]
#[command(name = "seqembed", version, about = "Embedding training over identity and sequence data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset container from MNIST IDX files or synthetic blobs,
    /// optionally split into identity and sequence classes.
    MakeData(MakeDataArgs),
    /// Train from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Scatter plot of 2-D embeddings as SVG.
    Plot(PlotArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceKind {
    Mnist,
    Synthetic,
}

#[derive(clap::Args)]
struct MakeDataArgs {
    #[arg(long, value_enum)]
    source: SourceKind,
    /// Output container file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// MNIST image file (IDX).
    #[arg(long)]
    images: Option<PathBuf>,
    /// MNIST label file (IDX).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Synthetic: number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Synthetic: samples per class.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Synthetic: sample dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Synthetic: per-coordinate noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    /// Synthetic: distance of class means from the origin.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Keep this many classes as identities; the rest become sequences.
    #[arg(long)]
    identity_classes: Option<usize>,
    #[arg(long, default_value_t = 5)]
    min_seq_len: usize,
    #[arg(long, default_value_t = 20)]
    max_seq_len: usize,
    /// After splitting, drop the sequence samples.
    #[arg(long, requires = "identity_classes")]
    identity_only: bool,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Verify,
    Cluster,
    Accuracy,
}

#[derive(clap::Args)]
struct DatasetArgs {
    /// Dataset container, or IDX image file when `--labels` is given.
    #[arg(long)]
    dataset: PathBuf,
    /// IDX label file paired with `--dataset`.
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl DatasetArgs {
    fn load(&self) -> CliResult<Dataset<f64>> {
        Ok(match &self.labels {
            Some(labels) => load_idx(&self.dataset, labels)?,
            None => read_container(&self.dataset)?,
        })
    }
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long, value_enum)]
    mode: EvalMode,
    /// Report file; the report is printed either way.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Verification pairs to draw.
    #[arg(long, default_value_t = 6000)]
    pairs: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Seed for pair sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct PlotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file; the report is printed either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(a) => make_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn make_data(a: MakeDataArgs) -> CliResult {
    let mut rng = Rng::new(a.seed);
    let data: Dataset<f64> = match a.source {
        SourceKind::Mnist => {
            let (Some(images), Some(labels)) = (&a.images, &a.labels) else {
                return Err(CliError::Usage("mnist needs --images and --labels".into()));
            };
            load_idx(images, labels)?
        }
        SourceKind::Synthetic => {
            make_synthetic_clusters(&mut rng, a.classes, a.per_class, a.dim, a.spread, a.separation)?
        }
    };
    let data = match a.identity_classes {
        Some(c) => split_identity_sequence(&data, &mut rng, c, a.min_seq_len, a.max_seq_len)?,
        None => data,
    };
    let data = if a.identity_only { data.identity_only() } else { data };
    write_container(&data, &a.out)?;
    let space = data.label_space();
    println!(
        "wrote {}: {} samples of shape {:?}",
        a.out.display(),
        data.len(),
        data.sample_shape()
    );
    println!("identities C={} sequences N={}", space.num_identities(), space.num_sequences());
    let hist = data.sequence_length_histogram();
    if !hist.is_empty() {
        println!("sequence length histogram (length: sequences)");
        for (len, count) in hist {
            println!("  {len}: {count}");
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.output_dir = Some(out);
    }
    cfg.train.validate()?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: set output.dir or pass --out".into()))?;
    let train_src = cfg
        .train_data
        .clone()
        .ok_or_else(|| CliError::Usage("config has no training data (data.train)".into()))?;
    train_src.check_exists()?;
    if let Some(t) = &cfg.test_data {
        t.check_exists()?;
    }
    if let Some(c) = &a.checkpoint {
        if !c.is_file() {
            return Err(CliError::Io {
                path: c.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            });
        }
    }
    std::fs::create_dir_all(&out).map_err(|source| CliError::Io {
        path: out.clone(),
        source,
    })?;
    write_file(&out.join("resolved.cfg"), cfg.to_text())?;
    match cfg.model.precision {
        Precision::F32 => train_as::<f32>(&cfg, &train_src, &out, a.checkpoint.as_deref()),
        Precision::F64 => train_as::<f64>(&cfg, &train_src, &out, a.checkpoint.as_deref()),
    }
}

fn train_as<T: Scalar>(
    cfg: &seqembed::config::ExperimentConfig,
    train_src: &DataSource,
    out: &Path,
    resume: Option<&Path>,
) -> CliResult {
    let data: Dataset<T> = train_src.load()?;
    let space = data.label_space();
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(cfg.train.clone(), space, load_checkpoint(path)?)?,
        None => {
            let model = cfg.model.build::<T>(data.sample_shape(), cfg.train.seed)?;
            Trainer::new(cfg.train.clone(), model, space)?
        }
    };
    eprintln!(
        "training {} samples (C={}, N={}) from iteration {} to {}",
        data.len(),
        space.num_identities(),
        space.num_sequences(),
        trainer.iteration(),
        cfg.train.total_iters
    );
    let every = cfg.train.checkpoint_every;
    trainer.run(&data, |t| {
        let it = t.iteration();
        if every > 0 && it % every == 0 && it < cfg.train.total_iters {
            save_checkpoint(&t.to_checkpoint(), &out.join(format!("checkpoint_{it:06}.sqfm")))?;
            if let Some(last) = t.metrics().last() {
                eprintln!("iteration {it}: loss {:.5} (lr {})", last.total_loss, last.lr);
            }
        }
        Ok(())
    })?;
    save_checkpoint(&trainer.to_checkpoint(), &out.join("final.sqfm"))?;
    write_metrics_csv(trainer.metrics(), &out.join("metrics.csv"))?;
    println!("wrote {}", out.join("final.sqfm").display());
    if let Some(test_src) = &cfg.test_data {
        let test: Dataset<T> = test_src.load()?;
        if !test.has_sequences() && test.label_space().num_identities() == trainer.head().num_classes() {
            let acc = test_accuracy(trainer.model(), trainer.head(), &test)?;
            println!("test accuracy {acc:.4}");
        }
    }
    Ok(())
}

fn load_head(ckpt: &Checkpoint<f64>, path: &Path) -> CliResult<ClassifierHead<f64>> {
    let bytes = ckpt
        .records
        .get(RECORD_HEAD)
        .ok_or_else(|| CliError::Usage(format!("{} has no classifier head", path.display())))?;
    Ok(ClassifierHead::from_bytes(bytes)?)
}

fn eval(a: EvalArgs) -> CliResult {
    let ckpt = load_checkpoint::<f64>(&a.checkpoint)?;
    let data = a.data.load()?;
    let feats = embed_dataset(&ckpt.model, &data)?;
    let report = match a.mode {
        EvalMode::Verify => {
            let pairs = make_pairs(data.true_classes(), a.pairs, &mut Rng::new(a.seed))?;
            let r = verification_accuracy(&feats, &pairs, a.folds)?;
            print!("{}", r.to_text());
            r.to_csv()
        }
        EvalMode::Cluster => {
            let r = cluster_report(&feats, data.true_classes())?;
            print!("{}", r.to_text());
            r.to_csv()
        }
        EvalMode::Accuracy => {
            let head = load_head(&ckpt, &a.checkpoint)?;
            if head.dim() != ckpt.model.embedding_dim() {
                return Err(Error::Dimension(format!(
                    "head expects {}-D features, model produces {}-D",
                    head.dim(),
                    ckpt.model.embedding_dim()
                ))
                .into());
            }
            if data.label_space().num_identities() != head.num_classes() {
                return Err(Error::Consistency(format!(
                    "head has {} classes, dataset has {} identity classes",
                    head.num_classes(),
                    data.label_space().num_identities()
                ))
                .into());
            }
            let acc = test_accuracy(&ckpt.model, &head, &data)?;
            println!("accuracy {acc:.6}");
            format!("accuracy\n{acc}\n")
        }
    };
    if let Some(out) = &a.out {
        write_file(out, report)?;
    }
    Ok(())
}

fn plot(a: PlotArgs) -> CliResult {
    let ckpt = load_checkpoint::<f64>(&a.checkpoint)?;
    let data = a.data.load()?;
    let feats = embed_dataset(&ckpt.model, &data)?;
    export_scatter(&feats, data.true_classes(), &a.out)?;
    println!("wrote {} ({} points)", a.out.display(), data.len());
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CliResult {
    let cfg = GradcheckConfig {
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&cfg, a.trials)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(out, &text)?;
    }
    Ok(())
}
