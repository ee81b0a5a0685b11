//! Command-line flags and their translation into a `RunConfig`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use bqkit::binquant::{BinInit, BqConfig};
use bqkit::codec::LabelEncoding;
use bqkit::gwk::PqConfig;
use bqkit::net::{Arch, BlobSpec, TextureSpec};
use bqkit::run::{
    AnalyzeArgs, AnalyzeMode, Command, CompressArgs, DataSource, EvalArgs, GenDataArgs, GwkArgs, ReportArgs,
    RunConfig, TrainArgs, Variant,
};
use bqkit::{Split, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bqkit", version, about = "Compress small neural networks with binning and weighted product quantization")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "BQKIT_JOBS")]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic dataset file.
    GenData(GenDataCli),
    /// Train a reference network.
    Train(TrainCli),
    /// Run a perturbation sensitivity sweep.
    Analyze(AnalyzeCli),
    /// Bin and quantize a trained model without retraining.
    Compress(CompressCli),
    /// Gradient-weighted product quantization with quantization-aware training.
    Gwk(GwkCli),
    /// Accuracy of a `.nnmod` or `.bqz` model.
    Eval(EvalCli),
    /// Aggregate size, bits-per-weight and accuracy figures.
    Report(ReportCli),
    /// Re-execute a recorded `.run.json` config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ArchName {
    Mlp,
    Cnn,
    CnnPw,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitName {
    Train,
    Test,
}

impl From<SplitName> for Split {
    fn from(s: SplitName) -> Split {
        match s {
            SplitName::Train => Split::Train,
            SplitName::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeName {
    Gaussian,
    Bins,
    GradVsRandom,
    U8Layer,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantName {
    Float,
    U8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EncodingName {
    Packed,
    Huffman,
    Auto,
}

impl From<EncodingName> for LabelEncoding {
    fn from(e: EncodingName) -> LabelEncoding {
        match e {
            EncodingName::Packed => LabelEncoding::Packed,
            EncodingName::Huffman => LabelEncoding::Huffman,
            EncodingName::Auto => LabelEncoding::Auto,
        }
    }
}

/// Generator settings shared by every command that reads data.
#[derive(Debug, Clone, Args)]
pub struct GenOpts {
    /// Classes of generated data.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Blob dimensionality.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 3.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// Texture side length.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    /// Texture pixel noise.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Seed of generated data.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

/// Resolves `blobs`, `textures` or a file path into a data source.
fn source(spec: &str, opts: &GenOpts, samples: usize, split: Split) -> DataSource {
    match spec {
        "blobs" => DataSource::Blobs {
            spec: BlobSpec { classes: opts.classes, dim: opts.dim, separation: opts.separation, spread: opts.spread },
            samples,
            seed: opts.data_seed,
            split,
        },
        "textures" => DataSource::Textures {
            spec: TextureSpec { classes: opts.classes, size: opts.size, noise: opts.noise },
            samples,
            seed: opts.data_seed,
            split,
        },
        path => DataSource::File { path: PathBuf::from(path) },
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(suffix);
    PathBuf::from(p)
}

#[derive(Debug, Args)]
pub struct GenDataCli {
    /// `blobs` or `textures`.
    #[arg(long, default_value = "blobs")]
    pub kind: String,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitName,
    #[command(flatten)]
    pub gen: GenOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCli {
    #[arg(long, value_enum, default_value = "mlp")]
    pub arch: ArchName,
    /// Hidden widths of the MLP.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 16])]
    pub hidden: Vec<usize>,
    /// `blobs`, `textures` or a `.nnd` path.
    #[arg(long, default_value = "blobs")]
    pub data: String,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    /// Held-out data evaluated every epoch.
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub test_samples: usize,
    #[command(flatten)]
    pub gen: GenOpts,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "model.nnmod")]
    pub out: PathBuf,
    /// Per-epoch metrics CSV (default: `<out>.csv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeCli {
    #[arg(long, default_value = "model.nnmod")]
    pub model: PathBuf,
    #[arg(long, default_value = "blobs")]
    pub data: String,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[command(flatten)]
    pub gen: GenOpts,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub mode: ModeName,
    #[arg(long, default_value_t = 0.05)]
    pub std: f64,
    /// Relative magnitude for bin and uint8 sweeps.
    #[arg(long)]
    pub rel: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layers to perturb (default: all weight layers).
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    /// Bins per layer for `--mode bins`.
    #[arg(long, default_value_t = 8)]
    pub bins: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long, default_value = "sensitivity.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompressCli {
    #[arg(long, default_value = "model.nnmod")]
    pub model: PathBuf,
    #[arg(long, default_value = "blobs")]
    pub data: String,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[command(flatten)]
    pub gen: GenOpts,
    #[arg(long, value_enum, default_value = "float")]
    pub variant: VariantName,
    #[arg(long, default_value_t = 16)]
    pub max_bins: usize,
    #[arg(long, default_value_t = 8)]
    pub initial_bins: usize,
    /// Per-bin accuracy drop below which a bin is left alone.
    #[arg(long, default_value_t = 0.02)]
    pub bin_drop: f64,
    /// Largest accepted accuracy drop per layer.
    #[arg(long, default_value_t = 0.01)]
    pub layer_drop: f64,
    #[arg(long, default_value_t = 1000)]
    pub eval_samples: usize,
    #[arg(long)]
    pub layers_to_try: Option<usize>,
    #[arg(long)]
    pub rel: Option<f64>,
    /// Reuse the first accepted layer's bins for later layers.
    #[arg(long)]
    pub share_bins: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "auto")]
    pub encoding: EncodingName,
    #[arg(long, default_value = "model.bqz")]
    pub out: PathBuf,
    /// Per-layer report JSON (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GwkCli {
    #[arg(long, default_value = "model.nnmod")]
    pub model: PathBuf,
    #[arg(long, default_value = "textures")]
    pub data: String,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long)]
    pub test: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub test_samples: usize,
    #[command(flatten)]
    pub gen: GenOpts,
    /// Block size of regular conv and dense layers.
    #[arg(long, default_value_t = 4)]
    pub cv: usize,
    /// Block size of point-wise conv layers.
    #[arg(long, default_value_t = 2)]
    pub pw: usize,
    /// Bits per label; the codebook has 2^bits centroids.
    #[arg(long, default_value_t = 4)]
    pub bits: u32,
    #[arg(long, default_value_t = 1)]
    pub epochs_between_cluster: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Plain means instead of gradient-weighted centroids.
    #[arg(long)]
    pub uniform_weights: bool,
    #[arg(long)]
    pub exempt_first_last: bool,
    #[arg(long, default_value_t = 8)]
    pub weight_bits: u32,
    #[arg(long, default_value_t = 8)]
    pub act_bits: u32,
    /// Gradient scaling factor; 0 is the straight-through estimator.
    #[arg(long, default_value_t = 0.2)]
    pub delta: f64,
    #[arg(long)]
    pub straight_through: bool,
    #[arg(long, default_value_t = 500)]
    pub calibration_samples: usize,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "auto")]
    pub encoding: EncodingName,
    #[arg(long, default_value = "model.bqz")]
    pub out: PathBuf,
    /// Epoch trace CSV (default: `<out>.trace.csv`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Summary JSON (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalCli {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "blobs")]
    pub data: String,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[command(flatten)]
    pub gen: GenOpts,
    /// Accuracy JSON (default: `<model>.eval.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportCli {
    /// `.bqz` or `.nnmod` files to summarize.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Uncompressed model for accuracy deltas.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Data to evaluate on; accuracy is skipped without it.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[command(flatten)]
    pub gen: GenOpts,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

fn train_config(epochs: usize, lr: f64, batch_size: usize, momentum: f64, seed: u64) -> TrainConfig {
    TrainConfig { learning_rate: lr, epochs, batch_size, seed, momentum }
}

impl Cmd {
    /// The config this invocation describes; `Run` loads it from disk.
    pub fn into_config(self) -> Result<RunConfig> {
        let command = match self {
            Cmd::Run { config } => return Ok(RunConfig::load(&config)?),
            Cmd::GenData(a) => {
                if a.kind != "blobs" && a.kind != "textures" {
                    bail!("unknown data kind {:?}; expected blobs or textures", a.kind);
                }
                Command::GenData(GenDataArgs {
                    data: source(&a.kind, &a.gen, a.samples, a.split.into()),
                    out: a.out,
                })
            }
            Cmd::Train(a) => {
                let arch = match a.arch {
                    ArchName::Mlp => Arch::Mlp { hidden: a.hidden },
                    ArchName::Cnn => Arch::Cnn,
                    ArchName::CnnPw => Arch::CnnPw,
                };
                Command::Train(TrainArgs {
                    arch,
                    data: source(&a.data, &a.gen, a.samples, Split::Train),
                    test: a.test.as_deref().map(|t| source(t, &a.gen, a.test_samples, Split::Test)),
                    train: train_config(a.epochs, a.lr, a.batch_size, a.momentum, a.seed),
                    metrics: a.metrics.unwrap_or_else(|| a.out.with_extension("csv")),
                    out: a.out,
                })
            }
            Cmd::Analyze(a) => Command::Analyze(AnalyzeArgs {
                model: a.model,
                data: source(&a.data, &a.gen, a.samples, a.split.into()),
                mode: match a.mode {
                    ModeName::Gaussian => AnalyzeMode::Gaussian,
                    ModeName::Bins => AnalyzeMode::Bins,
                    ModeName::GradVsRandom => AnalyzeMode::GradVsRandom,
                    ModeName::U8Layer => AnalyzeMode::U8Layer,
                },
                std: a.std,
                rel: a.rel,
                fraction: a.fraction,
                seeds: a.seeds,
                seed: a.seed,
                layers: a.layers,
                bins: a.bins,
                batch_size: a.batch_size,
                eval_samples: a.eval_samples,
                out: a.out,
            }),
            Cmd::Compress(a) => {
                let bq = BqConfig {
                    max_bins: a.max_bins,
                    initial_bins: a.initial_bins,
                    per_bin_drop_limit: a.bin_drop,
                    layer_drop_limit: a.layer_drop,
                    init: BinInit::LayerStats,
                    eval_samples: a.eval_samples,
                    layers_to_try: a.layers_to_try.unwrap_or(usize::MAX),
                    rel: a.rel,
                    share_bins: a.share_bins,
                    seed: a.seed,
                };
                Command::Compress(CompressArgs {
                    model: a.model,
                    data: source(&a.data, &a.gen, a.samples, a.split.into()),
                    variant: match a.variant {
                        VariantName::Float => Variant::Float,
                        VariantName::U8 => Variant::U8,
                    },
                    bq,
                    encoding: a.encoding.into(),
                    report: a.report.unwrap_or_else(|| with_suffix(&a.out, ".report.json")),
                    out: a.out,
                })
            }
            Cmd::Gwk(a) => {
                let mut pq = PqConfig::with_bits(a.cv, a.pw, a.bits)?;
                pq.epochs_between_cluster = a.epochs_between_cluster;
                pq.max_iter = a.max_iter;
                pq.tol = a.tol;
                pq.uniform_weights = a.uniform_weights;
                pq.exempt_first_last = a.exempt_first_last;
                Command::Gwk(GwkArgs {
                    model: a.model,
                    data: source(&a.data, &a.gen, a.samples, Split::Train),
                    test: a.test.as_deref().map(|t| source(t, &a.gen, a.test_samples, Split::Test)),
                    pq,
                    weight_bits: a.weight_bits,
                    act_bits: a.act_bits,
                    delta: a.delta,
                    straight_through: a.straight_through,
                    calibration_samples: a.calibration_samples,
                    train: train_config(a.epochs, a.lr, a.batch_size, a.momentum, a.seed),
                    encoding: a.encoding.into(),
                    trace: a.trace.unwrap_or_else(|| with_suffix(&a.out, ".trace.csv")),
                    report: a.report.unwrap_or_else(|| with_suffix(&a.out, ".report.json")),
                    out: a.out,
                })
            }
            Cmd::Eval(a) => Command::Eval(EvalArgs {
                data: source(&a.data, &a.gen, a.samples, a.split.into()),
                out: a.out.unwrap_or_else(|| with_suffix(&a.model, ".eval.json")),
                model: a.model,
            }),
            Cmd::Report(a) => Command::Report(ReportArgs {
                inputs: a.inputs,
                reference: a.reference,
                data: a.data.as_deref().map(|d| source(d, &a.gen, a.samples, a.split.into())),
                out: a.out,
            }),
        };
        Ok(RunConfig::new(command))
    }
}
