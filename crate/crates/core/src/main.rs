use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use arc_core::codec::{decode_image, encode_image, Bitstream};
use arc_core::data::{self, DatasetManifest, IgnorePolicy};
use arc_core::eval::{self, LatencyStats, RateRow, WallClock};
use arc_core::loss::{BoxRole, LossWeights};
use arc_core::model::ModelConfig;
use arc_core::trainer::{self, TrainConfig};
use arc_core::{Error, Model, Precision, TrainingState};

#[derive(Parser)]
#[command(name = "arc", version, about = "Anonymizing learned image codec")]
struct Cli {
    /// TOML file with one table per subcommand (`[train]`, `[encode]`, ...);
    /// keys mirror the long flag names. Flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a CSV log.
    Train(TrainArgs),
    /// Encode an image into an .arc bitstream.
    Encode(CodecArgs),
    /// Decode an .arc bitstream into an 8-bit RGB image.
    Decode(CodecArgs),
    /// Average precision of external detections against annotations.
    EvalAp(EvalApArgs),
    /// Encode or decode latency over a directory of images.
    Bench(BenchArgs),
    /// Write a synthetic toy dataset (PNG images plus annotations).
    Synth(SynthArgs),
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct TrainArgs {
    /// Annotation file (ODGT lines); images are looked up next to it unless --images is given.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV training log [default: <out>.log.csv]
    #[arg(long)]
    log: Option<PathBuf>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Square training size [default: 512, or 64 with --synthetic]
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lambda_bg: Option<f64>,
    #[arg(long)]
    lambda_hbox: Option<f64>,
    #[arg(long)]
    lambda_vbox: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Save every this many epochs (0: only at the end).
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Train on this many generated toy images instead of --data.
    #[arg(long, num_args = 0..=1, default_missing_value = "100")]
    synthetic: Option<usize>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct CodecArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long = "in")]
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct EvalApArgs {
    /// Ground-truth annotation file.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Detection records, one JSON object per line.
    #[arg(long)]
    dets: Option<PathBuf>,
    /// Detection class to evaluate [default: person]
    #[arg(long)]
    class: Option<String>,
    /// Ground-truth role, hbox or vbox [default: vbox]
    #[arg(long)]
    role: Option<String>,
    /// IoU threshold [default: 0.5]
    #[arg(long)]
    iou: Option<f64>,
    /// Append-free CSV report with one row.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Method label for the CSV row [default: model]
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    /// Mean bpp of the evaluated images, for the CSV row.
    #[arg(long)]
    bpp: Option<f64>,
    #[arg(long)]
    bpp_std: Option<f64>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct BenchArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Directory of images (png, jpg, ppm).
    #[arg(long)]
    images: Option<PathBuf>,
    /// Timed runs per image [default: 10]
    #[arg(long)]
    repeats: Option<usize>,
    /// encode or decode [default: encode]
    #[arg(long)]
    op: Option<String>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of images [default: 100]
    #[arg(long)]
    count: Option<usize>,
    /// Square image size [default: 64]
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failure classes mapped onto exit codes 1 (usage), 2 (data/format) and 3 (numeric).
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Run(other),
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Run(Error::Numeric(_) | Error::Freeze(_)) => 3,
            Failure::Run(_) => 2,
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("missing required option --{flag}")))
}

/// Flags given on the command line override keys from the config file table.
fn merge<T: Serialize + DeserializeOwned>(cli: T, file: Option<&toml::Table>) -> CliResult<T> {
    let Some(table) = file else {
        return Ok(cli);
    };
    let mut merged =
        serde_json::to_value(table).map_err(|e| usage(format!("config file: {e}")))?;
    let flags = serde_json::to_value(&cli).map_err(|e| usage(e.to_string()))?;
    if let (Some(dst), serde_json::Value::Object(src)) = (merged.as_object_mut(), flags) {
        for (k, v) in src {
            if !v.is_null() {
                dst.insert(k, v);
            }
        }
    }
    serde_json::from_value(merged).map_err(|e| usage(format!("config file: {e}")))
}

fn config_section(path: Option<&Path>, name: &str) -> CliResult<Option<toml::Table>> {
    let Some(path) = path else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
    match table.get(name) {
        None => Ok(None),
        Some(toml::Value::Table(t)) => Ok(Some(t.clone())),
        Some(_) => Err(usage(format!("config key `{name}` must be a table"))),
    }
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let defaults = LossWeights::default();
    let config = TrainConfig {
        weights: LossWeights {
            lambda_r: args.lambda_r.unwrap_or(defaults.lambda_r),
            lambda_bg: args.lambda_bg.unwrap_or(defaults.lambda_bg),
            lambda_hbox: args.lambda_hbox.unwrap_or(defaults.lambda_hbox),
            lambda_vbox: args.lambda_vbox.unwrap_or(defaults.lambda_vbox),
        },
        epochs: args.epochs.unwrap_or(1),
        batch_size: args.batch.unwrap_or(8),
        learning_rate: args.lr.unwrap_or(1e-4),
        seed: args.seed.unwrap_or(0),
        checkpoint_interval: args.checkpoint_interval.unwrap_or(0),
    };
    config.validate()?;
    if config.learning_rate == 0.0 {
        log::warn!("learning rate is 0: parameters will not change");
    }
    let out = required(args.out, "out")?;
    let size = args.size.unwrap_or(if args.synthetic.is_some() { 64 } else { data::DEFAULT_TARGET_SIZE });
    let model_config = ModelConfig::new(args.n.unwrap_or(256), args.m.unwrap_or(2)).with_input_size(size);
    model_config.validate()?;

    let dataset = match (args.synthetic, &args.data) {
        (Some(count), _) => data::make_synthetic_dataset::<Precision>(count, config.seed, size)?,
        (None, Some(ann)) => {
            let dir = args
                .images
                .clone()
                .unwrap_or_else(|| ann.parent().map(Path::to_path_buf).unwrap_or_default());
            let manifest = DatasetManifest {
                annotations: ann.clone(),
                image_dir: dir,
                target_size: size,
                ignore_policy: IgnorePolicy::Drop,
            };
            manifest.validate(&model_config)?;
            data::load_dataset::<Precision>(&manifest)?
        }
        (None, None) => return Err(usage("either --data or --synthetic is required")),
    };
    if dataset.is_empty() {
        return Err(Failure::Run(Error::Input("the dataset contains no images".into())));
    }

    let mut state = match &args.resume {
        Some(path) => TrainingState::restore_expecting(path, &model_config)?,
        None => TrainingState::new(model_config, config.seed)?,
    };
    let log_path = args.log.unwrap_or_else(|| out.with_extension("log.csv"));
    let records = trainer::train(&mut state, &dataset, None, &config, Some(&log_path), Some(&out))?;
    if records.is_empty() {
        // resumed past the requested epoch count: still leave a checkpoint behind
        state.save(&out, &config)?;
    }
    if let Some(r) = records.last() {
        println!(
            "epoch {} rate {:.6} bg {:.6} hbox {:.6} vbox {:.6} total {:.6}",
            r.epoch, r.rate, r.bg, r.hbox, r.vbox, r.total
        );
    }
    println!("checkpoint {}", out.display());
    Ok(())
}

fn cmd_encode(args: CodecArgs) -> CliResult {
    let bundle = Model::load(&required(args.model, "model")?)?;
    let input = required(args.input, "in")?;
    let out = required(args.out, "out")?;
    let image = data::load_image::<Precision>(&input)?;
    let bs = encode_image(&image, &bundle)?;
    bs.write(&out)?;
    let size = std::fs::metadata(&out).map_err(Error::from)?.len();
    let bpp = 8.0 * size as f64 / (image.width() * image.height()) as f64;
    println!("bytes {size} bpp {bpp:.6}");
    Ok(())
}

fn cmd_decode(args: CodecArgs) -> CliResult {
    let bundle = Model::load(&required(args.model, "model")?)?;
    let bs = Bitstream::read(&required(args.input, "in")?)?;
    let image = decode_image(&bs, &bundle)?;
    data::save_image(&image, &required(args.out, "out")?)?;
    println!("decoded {}x{}", image.width(), image.height());
    Ok(())
}

fn cmd_eval_ap(args: EvalApArgs) -> CliResult {
    let role: BoxRole = args.role.as_deref().unwrap_or("vbox").parse()?;
    let threshold = args.iou.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage(format!("--iou must lie in [0, 1], got {threshold}")));
    }
    let class = args.class.unwrap_or_else(|| "person".into());
    let gt = data::parse_annotations(&required(args.gt, "gt")?, IgnorePolicy::Drop)?;
    let dets = eval::ingest_detections(&required(args.dets, "dets")?)?;
    let r = eval::evaluate_ap(&dets, &gt, &class, role, threshold);
    println!("ap {:.6} tp {} fp {} num_gt {}", r.ap, r.tp, r.fp, r.num_gt);
    if let Some(path) = args.csv {
        let row = RateRow {
            method: args.method.unwrap_or_else(|| "model".into()),
            preset: args.preset.unwrap_or_default(),
            mean_bpp: args.bpp.unwrap_or(f64::NAN),
            bpp_std: args.bpp_std.unwrap_or(f64::NAN),
            ap: r.ap,
            tp: r.tp,
            fp: r.fp,
        };
        eval::rate_precision_report(&[row], &path)?;
    }
    Ok(())
}

fn image_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "ppm" | "pnm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_bench(args: BenchArgs) -> CliResult {
    let bundle = Model::load(&required(args.model, "model")?)?;
    let repeats = args.repeats.unwrap_or(10);
    if repeats == 0 {
        return Err(usage("--repeats must be >= 1"));
    }
    let op = args.op.unwrap_or_else(|| "encode".into());
    let images = image_files(&required(args.images, "images")?)?
        .iter()
        .map(|p| data::load_image::<Precision>(p))
        .collect::<Result<Vec<_>, _>>()?;
    if images.is_empty() {
        return Err(Failure::Run(Error::Input("no images found to benchmark".into())));
    }
    let mut clock = WallClock::default();
    let stats: LatencyStats = match op.as_str() {
        "encode" => eval::latency_bench(&images, repeats, &mut clock, |img| encode_image(img, &bundle).map(|_| ()))?,
        "decode" => {
            let streams = images
                .iter()
                .map(|img| encode_image(img, &bundle))
                .collect::<Result<Vec<_>, _>>()?;
            eval::latency_bench(&streams, repeats, &mut clock, |bs| decode_image(bs, &bundle).map(|_| ()))?
        }
        other => return Err(usage(format!("--op must be encode or decode, got `{other}`"))),
    };
    println!(
        "op {op} min {:.6} mean {:.6} std {:.6} samples {}{}",
        stats.min,
        stats.mean,
        stats.std,
        stats.samples,
        if stats.single_sample { " (single sample: std undefined)" } else { "" }
    );
    if let Some(path) = args.csv {
        eval::write_latency_csv(&op, &stats, &path)?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let out = required(args.out, "out")?;
    let set = data::make_synthetic_dataset::<Precision>(args.count.unwrap_or(100), args.seed.unwrap_or(0), args.size.unwrap_or(64))?;
    let manifest = data::write_dataset(&out, &set)?;
    println!("wrote {} images, annotations {}", set.len(), manifest.annotations.display());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Train(a) => cmd_train(merge(a, config_section(file, "train")?.as_ref())?),
        Command::Encode(a) => cmd_encode(merge(a, config_section(file, "encode")?.as_ref())?),
        Command::Decode(a) => cmd_decode(merge(a, config_section(file, "decode")?.as_ref())?),
        Command::EvalAp(a) => cmd_eval_ap(merge(a, config_section(file, "eval-ap")?.as_ref())?),
        Command::Bench(a) => cmd_bench(merge(a, config_section(file, "bench")?.as_ref())?),
        Command::Synth(a) => cmd_synth(merge(a, config_section(file, "synth")?.as_ref())?),
    }
}

fn init_threads() -> CliResult {
    let Ok(value) = std::env::var("ARC_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| usage(format!("ARC_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Run(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.exit_code())
        }
    }
}
