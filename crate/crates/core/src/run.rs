//! Reproducible command pipelines.
//!
//! Every command is described by a serializable [`RunConfig`]. Executing a
//! config writes its outputs atomically plus `<out>.run.json`, the config
//! itself, so any run can be repeated from that file alone with
//! byte-identical results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::binquant::{compress_model, initial_bins_invcdf, initial_bins_u8, BqConfig};
use crate::codec::{
    codings_from_bq, codings_from_gwk, compression_ratio, measured_ratio, read_compressed, write_compressed,
    LabelEncoding, BQZ_MAGIC,
};
use crate::gwk::{bits_per_weight, gwk_train, layer_storage, LayerStorage, PqConfig};
use crate::io::write_atomic;
use crate::net::{accumulate_gradients, calibrate_qat, evaluate, train, Arch, BlobSpec, TextureSpec};
use crate::sensitivity::{Baseline, SensitivityReport};
use crate::stats::mean_std;
use crate::store::{read_model, write_model, Model, TensorData, NNMOD_MAGIC};
use crate::{rng, Dataset, Error, Network, Result, Split, TrainConfig};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Where a dataset comes from: a `.nnd` file or a seeded generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    File { path: PathBuf },
    Blobs { spec: BlobSpec, samples: usize, seed: u64, split: Split },
    Textures { spec: TextureSpec, samples: usize, seed: u64, split: Split },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File { path } => Dataset::load(path),
            DataSource::Blobs { spec, samples, seed, split } => spec.generate(*samples, *seed, *split),
            DataSource::Textures { spec, samples, seed, split } => spec.generate(*samples, *seed, *split),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzeMode {
    /// Additive Gaussian noise on each layer.
    Gaussian,
    /// ±rel scaling of each inverse-CDF bin of each layer.
    Bins,
    /// Noise on the top-|gradient| fraction versus a random fraction.
    GradVsRandom,
    /// ±rel scaling of each layer of the uint8-quantized model.
    U8Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Float,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataArgs {
    pub data: DataSource,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    pub arch: Arch,
    pub data: DataSource,
    pub test: Option<DataSource>,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeArgs {
    pub model: PathBuf,
    pub data: DataSource,
    pub mode: AnalyzeMode,
    pub std: f64,
    /// Relative magnitude; 0.5 for bins and 0.03 for uint8 layers when unset.
    pub rel: Option<f64>,
    pub fraction: f64,
    pub seeds: usize,
    pub seed: u64,
    /// Layers to perturb; empty means every weight layer by size.
    pub layers: Vec<String>,
    pub bins: usize,
    /// Batch size for gradient accumulation.
    pub batch_size: usize,
    pub eval_samples: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressArgs {
    pub model: PathBuf,
    pub data: DataSource,
    pub variant: Variant,
    pub bq: BqConfig,
    pub encoding: LabelEncoding,
    pub out: PathBuf,
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GwkArgs {
    pub model: PathBuf,
    pub data: DataSource,
    pub test: Option<DataSource>,
    pub pq: PqConfig,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub delta: f64,
    pub straight_through: bool,
    pub calibration_samples: usize,
    pub train: TrainConfig,
    pub encoding: LabelEncoding,
    pub out: PathBuf,
    pub trace: PathBuf,
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    pub model: PathBuf,
    pub data: DataSource,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportArgs {
    pub inputs: Vec<PathBuf>,
    /// Uncompressed model used for accuracy deltas.
    pub reference: Option<PathBuf>,
    pub data: Option<DataSource>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    GenData(GenDataArgs),
    Train(TrainArgs),
    Analyze(AnalyzeArgs),
    Compress(CompressArgs),
    Gwk(GwkArgs),
    Eval(EvalArgs),
    Report(ReportArgs),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    #[serde(flatten)]
    pub command: Command,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        RunConfig { version: RUN_CONFIG_VERSION, command }
    }

    /// The command's main output file.
    pub fn primary_output(&self) -> &Path {
        match &self.command {
            Command::GenData(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Analyze(a) => &a.out,
            Command::Compress(a) => &a.out,
            Command::Gwk(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Report(a) => &a.out,
        }
    }

    /// `<primary output>.run.json`.
    pub fn config_path(&self) -> PathBuf {
        let mut p = self.primary_output().as_os_str().to_owned();
        p.push(".run.json");
        PathBuf::from(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        if cfg.version != RUN_CONFIG_VERSION {
            return Err(Error::format(format!("unsupported run config version {}", cfg.version)));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Every file written, the run config last.
    pub files: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// Loads a `.nnmod` or `.bqz` model, chosen by magic bytes.
pub fn load_any_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(BQZ_MAGIC) {
        Ok(read_compressed(&bytes)?.model)
    } else if bytes.starts_with(NNMOD_MAGIC) {
        read_model(&bytes)
    } else {
        Err(Error::format(format!("{} is neither a .nnmod nor a .bqz file", path.display())))
    }
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    if cfg.version != RUN_CONFIG_VERSION {
        return Err(Error::format(format!("unsupported run config version {}", cfg.version)));
    }
    let (mut files, summary) = match &cfg.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => run_train(a)?,
        Command::Analyze(a) => run_analyze(a)?,
        Command::Compress(a) => run_compress(a)?,
        Command::Gwk(a) => run_gwk(a)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Report(a) => run_report(a)?,
    };
    let config_path = cfg.config_path();
    write_atomic(&config_path, &cfg.to_json()?)?;
    files.push(config_path);
    Ok(RunOutput { files, summary })
}

type Produced = (Vec<PathBuf>, serde_json::Value);

fn gen_data(a: &GenDataArgs) -> Result<Produced> {
    let data = a.data.load()?;
    data.save(&a.out)?;
    Ok((vec![a.out.clone()], json!({ "samples": data.len(), "classes": data.num_classes() })))
}

fn run_train(a: &TrainArgs) -> Result<Produced> {
    let data = a.data.load()?;
    let test = a.test.as_ref().map(DataSource::load).transpose()?;
    let net = a.arch.build(data.input_shape(), data.num_classes(), a.train.seed)?;
    let outcome = train(&net, &data, &a.train, None, test.as_ref())?;
    let model = outcome.network.to_model()?;
    write_atomic(&a.out, &write_model(&model.manifest, &model.tensors)?)?;

    let mut csv = String::from("epoch,loss,train_accuracy,test_accuracy\n");
    for e in &outcome.epochs {
        let test = e.test_accuracy.map(|t| t.to_string()).unwrap_or_default();
        writeln!(csv, "{},{},{},{}", e.epoch, e.loss, e.train_accuracy, test).unwrap();
    }
    write_atomic(&a.metrics, csv.as_bytes())?;
    let last = outcome.epochs.last();
    Ok((
        vec![a.out.clone(), a.metrics.clone()],
        json!({
            "epochs": outcome.epochs.len(),
            "train_accuracy": last.map(|e| e.train_accuracy),
            "test_accuracy": last.and_then(|e| e.test_accuracy),
        }),
    ))
}

fn run_analyze(a: &AnalyzeArgs) -> Result<Produced> {
    if a.seeds == 0 {
        return Err(Error::arg("at least one seed is required"));
    }
    let mut model = load_any_model(&a.model)?;
    if a.mode == AnalyzeMode::U8Layer {
        model = model.quantized_u8()?;
    }
    let mut data = a.data.load()?;
    if let Some(n) = a.eval_samples {
        data = data.head(n.min(data.len()))?;
    }
    let layers = if a.layers.is_empty() { model.layers_by_param_count() } else { a.layers.clone() };
    let baseline = Baseline::new(&model, &data)?;
    let grads = match a.mode {
        AnalyzeMode::GradVsRandom => Some(accumulate_gradients(&baseline.network, &data, a.batch_size)?),
        _ => None,
    };
    let mut report = SensitivityReport::default();
    for s in 0..a.seeds {
        let seed = rng::derive_seed(a.seed, &["analyze".into(), s.into()]);
        let part = match a.mode {
            AnalyzeMode::Gaussian => baseline.gaussian_layer_sweep(&layers, a.std, seed)?,
            AnalyzeMode::GradVsRandom => {
                baseline.gradient_vs_random(&layers, grads.as_ref().unwrap(), a.std, a.fraction, seed)?
            }
            AnalyzeMode::U8Layer => baseline.layer_magnitude_sweep(&layers, a.rel.unwrap_or(0.03), seed)?,
            AnalyzeMode::Bins => {
                let mut r = SensitivityReport::default();
                for layer in &layers {
                    let t = model.layer_weight(layer)?;
                    let edges = match t.data() {
                        TensorData::U8(codes) => initial_bins_u8(codes, a.bins)?,
                        TensorData::F32(_) => {
                            let (mean, std) = mean_std(t.values_f64());
                            initial_bins_invcdf(mean, std, a.bins)?
                        }
                    };
                    r.extend(baseline.bin_magnitude_sweep(layer, &edges, a.rel.unwrap_or(0.5), seed)?);
                }
                r
            }
        };
        report.extend(part);
    }
    write_atomic(&a.out, report.to_csv_string()?.as_bytes())?;
    Ok((vec![a.out.clone()], json!({ "rows": report.rows.len(), "baseline": baseline.accuracy })))
}

fn run_compress(a: &CompressArgs) -> Result<Produced> {
    let mut model = load_any_model(&a.model)?;
    if a.variant == Variant::U8 {
        model = model.quantized_u8()?;
    }
    let data = a.data.load()?;
    let result = compress_model(&model, &data, &a.bq)?;
    let bytes = write_compressed(&result.model.manifest, &codings_from_bq(&result), a.encoding)?;
    write_atomic(&a.out, &bytes)?;
    let original = write_model(&model.manifest, &model.tensors)?.len();
    let summary = result.summary();
    let report = json!({
        "variant": a.variant,
        "summary": summary,
        "original_bytes": original,
        "compressed_bytes": bytes.len(),
        "measured_ratio": measured_ratio(original, bytes.len()),
    });
    write_atomic(&a.report, &json_bytes(&report)?)?;
    Ok((vec![a.out.clone(), a.report.clone()], report))
}

fn run_gwk(a: &GwkArgs) -> Result<Produced> {
    let model = load_any_model(&a.model)?;
    let data = a.data.load()?;
    let test = a.test.as_ref().map(DataSource::load).transpose()?;
    let net = Network::from_model(&model)?;
    let mut qat = calibrate_qat(&net, &data, a.weight_bits, a.act_bits, a.delta, a.calibration_samples)?;
    qat.straight_through = a.straight_through;
    let outcome = gwk_train(&model, &data, &a.pq, &qat, &a.train, test.as_ref())?;
    let bytes = write_compressed(&outcome.model.manifest, &codings_from_gwk(&outcome), a.encoding)?;
    write_atomic(&a.out, &bytes)?;

    let layer_names: Vec<String> = outcome.layers.iter().map(|l| l.layer.clone()).collect();
    let mut csv = String::from("epoch,loss,train_accuracy,test_accuracy,clustered_accuracy");
    for l in &layer_names {
        write!(csv, ",objective_{l}").unwrap();
    }
    csv.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &outcome.trace {
        let m = &e.metrics;
        write!(
            csv,
            "{},{},{},{},{}",
            m.epoch,
            m.loss,
            m.train_accuracy,
            opt(m.test_accuracy),
            opt(e.clustered_accuracy)
        )
        .unwrap();
        for l in &layer_names {
            write!(csv, ",{}", opt(e.objectives.get(l).copied())).unwrap();
        }
        csv.push('\n');
    }
    write_atomic(&a.trace, csv.as_bytes())?;

    let bpw = outcome.bits_per_weight()?;
    let accuracy = match &test {
        Some(t) => Some(evaluate(&Network::from_model(&outcome.model)?, t)?),
        None => None,
    };
    let report = json!({
        "bits_per_weight": bpw,
        "test_accuracy": accuracy,
        "compressed_bytes": bytes.len(),
        "epochs": outcome.trace.len(),
    });
    write_atomic(&a.report, &json_bytes(&report)?)?;
    Ok((vec![a.out.clone(), a.trace.clone(), a.report.clone()], report))
}

fn run_eval(a: &EvalArgs) -> Result<Produced> {
    let model = load_any_model(&a.model)?;
    let data = a.data.load()?;
    let accuracy = evaluate(&Network::from_model(&model)?, &data)?;
    let result = json!({ "accuracy": accuracy, "samples": data.len() });
    write_atomic(&a.out, &json_bytes(&result)?)?;
    Ok((vec![a.out.clone()], result))
}

fn run_report(a: &ReportArgs) -> Result<Produced> {
    let data = a.data.as_ref().map(DataSource::load).transpose()?;
    let accuracy_of = |m: &Model| -> Result<Option<f64>> {
        match &data {
            Some(d) => Ok(Some(evaluate(&Network::from_model(m)?, d)?)),
            None => Ok(None),
        }
    };
    let reference_accuracy = match &a.reference {
        Some(p) => accuracy_of(&load_any_model(p)?)?,
        None => None,
    };
    let mut entries = Vec::new();
    for path in &a.inputs {
        let bytes = std::fs::read(path)?;
        let (model, storage) = if bytes.starts_with(BQZ_MAGIC) {
            let c = read_compressed(&bytes)?;
            let storage = c.layer_storage();
            (c.model, storage)
        } else {
            let m = read_model(&bytes)?;
            let storage = layer_storage(&m, &[])?;
            (m, storage)
        };
        let float_bytes: usize = model.tensors.iter().map(|t| t.len() * 4).sum();
        let bpw = bits_per_weight(&storage).ok();
        let formula: Vec<_> = storage
            .iter()
            .filter_map(|s| match s {
                LayerStorage::Bins { layer, weight_count, bins, .. } if *bins >= 2 => {
                    compression_ratio(*weight_count, 1, *bins).ok().map(|r| json!({ "layer": layer, "ratio": r }))
                }
                _ => None,
            })
            .collect();
        let accuracy = accuracy_of(&model)?;
        entries.push(json!({
            "path": path,
            "file_bytes": bytes.len(),
            "float_bytes": float_bytes,
            "measured_ratio": measured_ratio(float_bytes, bytes.len()),
            "layers": storage,
            "bits_per_weight": bpw,
            "formula_ratio": formula,
            "accuracy": accuracy,
            "accuracy_delta": reference_accuracy.zip(accuracy).map(|(r, x)| r - x),
        }));
    }
    let report = json!({ "reference_accuracy": reference_accuracy, "inputs": entries });
    write_atomic(&a.out, &json_bytes(&report)?)?;
    Ok((vec![a.out.clone()], report))
}
