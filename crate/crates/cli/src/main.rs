use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use dfdetect::blink::{BlinkParams, DEFAULT_MIN_CONSEC, DEFAULT_THRESHOLD};
use dfdetect::eval::{self, EvalReport, Manifest, Prediction, Split, DEFAULT_RATIOS};
use dfdetect::knn::{KnnModel, DEFAULT_K};
use dfdetect::media::Fps;
use dfdetect::net::{self, AdamConfig, EpochMetrics, ModelConfig, TrainOptions};
use dfdetect::pipeline::{self, BatchSummary, HistFormat};
use dfdetect::synth::{self, DatasetSpec, SynthTraceSpec, SynthVideoSpec, MANIFEST_FILE};

mod config;

#[derive(Parser, Debug)]
#[command(name = "dfdetect", version, about = "Histogram and blink based deepfake detection")]
struct Cli {
    /// Seed for generation, splitting, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads; 0 uses one per core. Never changes outputs.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// JSON file of flag values; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Extract per-video grayscale histogram sequences.
    Extract(ExtractArgs),
    /// Detect blinks from landmark files and write per-video reports.
    Blinks(BlinksArgs),
    /// Split the manifest and train a classifier.
    Train(TrainArgs),
    /// Score videos with a trained model.
    Predict(PredictArgs),
    /// Join predictions with manifest labels and write a report.
    Evaluate(EvaluateArgs),
}

const SUBCOMMANDS: &[&str] = &["synth", "extract", "blinks", "train", "predict", "evaluate"];

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct SynthArgs {
    /// Number of REAL items.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    real: u64,
    /// Number of FAKE items.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    fake: u64,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 64)]
    height: u32,
    #[arg(long, default_value_t = 300)]
    frames: usize,
    /// Video frame rate (integer frames per second).
    #[arg(long, default_value_t = 30)]
    fps: u32,
    /// Tonal exponent applied to fake videos.
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    #[arg(long, default_value_t = 6)]
    checker_amp: u8,
    #[arg(long, default_value_t = 2)]
    checker_period: u32,
    /// Blinks per 10 s in real landmark traces.
    #[arg(long, default_value_t = 4.8)]
    real_blink_rate: f64,
    /// Blinks per 10 s in fake landmark traces.
    #[arg(long, default_value_t = 2.2)]
    fake_blink_rate: f64,
    /// Landmark trace length in seconds.
    #[arg(long, default_value_t = 30.0)]
    trace_seconds: f64,
    /// Skip video generation.
    #[arg(long)]
    no_videos: bool,
    /// Skip landmark generation.
    #[arg(long)]
    no_landmarks: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum FormatArg {
    Fhs,
    Json,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Fhs)]
    format: FormatArg,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct BlinksArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Frame rate of the landmark streams.
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// EAR below this value counts as a closed eye.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Minimum closed frames for a blink.
    #[arg(long, default_value_t = DEFAULT_MIN_CONSEC)]
    min_consec: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModelKind {
    HistLstm,
    BlinkKnn,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of histogram files or blink reports.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    /// Global gradient norm cap; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    clip_norm: f64,
    /// Keep the last epoch instead of the best validation epoch.
    #[arg(long)]
    no_restore_best: bool,
    /// Neighbours for blink-knn.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct PredictArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// split.json written by `train`; without it every manifest video is scored.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    subset: Subset,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct EvaluateArgs {
    /// CSV with `video_id,p_fake` rows.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Name recorded in the report.
    #[arg(long, default_value = "model")]
    tag: String,
    /// Bins of the score histogram data file.
    #[arg(long, default_value_t = 20)]
    bins: usize,
}

/// Report a usage error and exit with status 2.
fn usage(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::InvalidValue, msg).exit()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Resolved configuration recorded next to every artifact. Thread count and
/// output location are left out since they never affect the bytes written.
fn run_record(cli: &Cli, name: &str, args: &impl Serialize) -> Value {
    let mut rec = json!({
        "command": name,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cli.seed,
    });
    rec[name] = serde_json::to_value(args).expect("arguments serialize");
    rec
}

fn out_dir(cli: &Cli) -> PathBuf {
    match &cli.out {
        Some(p) => p.clone(),
        None => usage("--out is required"),
    }
}

fn report_failures(summary: &BatchSummary, what: &str) -> Result<()> {
    for (id, err) in &summary.failures {
        eprintln!("{id}: {err}");
    }
    if !summary.failures.is_empty() {
        bail!(
            "{} of {} videos failed {what}",
            summary.failures.len(),
            summary.failures.len() + summary.written.len()
        );
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let out = out_dir(cli);
    let trace = |rate| SynthTraceSpec {
        duration_s: a.trace_seconds,
        blink_rate_per_10s: rate,
        ..SynthTraceSpec::default()
    };
    let spec = DatasetSpec {
        n_real: a.real as usize,
        n_fake: a.fake as usize,
        seed: cli.seed,
        video: (!a.no_videos).then(|| SynthVideoSpec {
            width: a.width,
            height: a.height,
            n_frames: a.frames,
            fps: Fps { num: a.fps, den: 1 },
            gamma: a.gamma,
            checker_amp: a.checker_amp,
            checker_period: a.checker_period,
            ..SynthVideoSpec::default()
        }),
        real_trace: (!a.no_landmarks).then(|| trace(a.real_blink_rate)),
        fake_trace: (!a.no_landmarks).then(|| trace(a.fake_blink_rate)),
    };
    if let Some(Err(e)) = spec.video.map(|v| v.validate()) {
        usage(e);
    }
    for t in [spec.real_trace, spec.fake_trace].into_iter().flatten() {
        if let Err(e) = t.validate() {
            usage(e);
        }
    }
    let manifest = synth::gen_dataset(&spec, &out)?;
    write_json(&out.join("synth.run.json"), &run_record(cli, "synth", a))?;
    info!("generated {} items", manifest.len());
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(())
}

fn cmd_extract(cli: &Cli, a: &ExtractArgs) -> Result<()> {
    let out = out_dir(cli);
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading {}", a.manifest.display()))?;
    let format = match a.format {
        FormatArg::Fhs => HistFormat::Fhs,
        FormatArg::Json => HistFormat::Json,
    };
    let summary = pipeline::extract_histograms(&a.manifest, &manifest, &out, format)?;
    write_json(&out.join("extract.run.json"), &run_record(cli, "extract", a))?;
    info!("wrote {} histogram files", summary.written.len());
    report_failures(&summary, "histogram extraction")
}

fn cmd_blinks(cli: &Cli, a: &BlinksArgs) -> Result<()> {
    let out = out_dir(cli);
    let params = BlinkParams {
        threshold: a.threshold,
        min_consec: a.min_consec,
    };
    if params.validate().is_err() || !(a.fps > 0.0) {
        usage(format!(
            "invalid blink settings: threshold {}, min-consec {}, fps {}",
            a.threshold, a.min_consec, a.fps
        ));
    }
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading {}", a.manifest.display()))?;
    let summary = pipeline::extract_blinks(&a.manifest, &manifest, &out, a.fps, params)?;
    write_json(&out.join("blinks.run.json"), &run_record(cli, "blinks", a))?;
    info!("wrote {} blink reports", summary.written.len());
    report_failures(&summary, "blink analysis")
}

fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut w = create(path)?;
    writeln!(w, "epoch,train_loss,train_accuracy,val_loss,val_accuracy")?;
    for m in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            m.epoch,
            m.train_loss,
            m.train_accuracy,
            opt(m.val_loss),
            opt(m.val_accuracy)
        )?;
    }
    w.flush()?;
    Ok(())
}

fn knn_metrics(model: &KnnModel, manifest: &Manifest, reports: &[dfdetect::blink::BlinkReport]) -> Result<(f64, f64)> {
    let preds = manifest.join(&pipeline::predict_blink_knn(model, reports)?)?;
    Ok((
        eval::log_loss(&preds)?,
        eval::accuracy(&preds, eval::DEFAULT_THRESHOLD)?,
    ))
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let out = out_dir(cli);
    if a.epochs == 0 || a.batch_size == 0 || a.k % 2 == 0 || !(a.clip_norm >= 0.0) {
        usage("epochs and batch-size must be positive, k odd, clip-norm non-negative");
    }
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading {}", a.manifest.display()))?;
    let split = eval::split_dataset(&manifest, DEFAULT_RATIOS, cli.seed)?;
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("split.json"), &split)?;
    let record = run_record(cli, "train", a);

    let history = match a.model {
        ModelKind::HistLstm => {
            let cfg = ModelConfig {
                seed: cli.seed,
                ..ModelConfig::default()
            };
            let opts = TrainOptions {
                epochs: a.epochs,
                batch_size: a.batch_size,
                adam: AdamConfig::default(),
                clip_norm: (a.clip_norm > 0.0).then_some(a.clip_norm),
                restore_best: !a.no_restore_best,
            };
            let outcome = pipeline::train_hist_lstm(&manifest, &a.features, &split, &cfg, &opts)?;
            for m in &outcome.history {
                info!(
                    "epoch {} train loss {:.4} acc {:.3} val loss {:.4} acc {:.3}",
                    m.epoch,
                    m.train_loss,
                    m.train_accuracy,
                    m.val_loss.unwrap_or(f64::NAN),
                    m.val_accuracy.unwrap_or(f64::NAN)
                );
            }
            let meta = json!({
                "run": record,
                "train_options": opts,
                "best_epoch": outcome.best_epoch,
            });
            let mut w = create(&out.join("model.json"))?;
            net::save_model(&mut w, &cfg, &outcome.params, Some(meta))?;
            w.flush()?;
            outcome.history
        }
        ModelKind::BlinkKnn => {
            let train = pipeline::load_blink_reports(&a.features, &split.train)?;
            let val = pipeline::load_blink_reports(&a.features, &split.val)?;
            let model = pipeline::fit_blink_knn(&manifest, &train, a.k)?;
            let (train_loss, train_accuracy) = knn_metrics(&model, &manifest, &train)?;
            let (val_loss, val_accuracy) = knn_metrics(&model, &manifest, &val)?;
            let mut w = create(&out.join("model.json"))?;
            model.to_writer(&mut w)?;
            w.flush()?;
            write_json(&out.join("train.run.json"), &record)?;
            vec![EpochMetrics {
                epoch: 1,
                train_loss,
                train_accuracy,
                val_loss: Some(val_loss),
                val_accuracy: Some(val_accuracy),
            }]
        }
    };
    write_metrics_csv(&out.join("metrics.csv"), &history)?;
    if let Some(last) = history.last() {
        info!("final val accuracy {:?}", last.val_accuracy);
    }
    println!("{}", out.join("model.json").display());
    Ok(())
}

enum LoadedModel {
    Lstm(net::SavedModel),
    Knn(KnnModel),
}

fn load_any_model(path: &Path) -> Result<LoadedModel> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: Value = serde_json::from_str(&text)
        .with_context(|| format!("{} is not JSON", path.display()))?;
    if doc.get("format").is_some() {
        Ok(LoadedModel::Lstm(net::load_model(text.as_bytes())?))
    } else {
        Ok(LoadedModel::Knn(KnnModel::from_reader(text.as_bytes())?))
    }
}

fn cmd_predict(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let out = out_dir(cli);
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading {}", a.manifest.display()))?;
    let ids: Vec<String> = match &a.split {
        Some(path) => {
            let split: Split = pipeline::read_json(path)?;
            match a.subset {
                Subset::Train => split.train,
                Subset::Val => split.val,
                Subset::Test => split.test,
            }
        }
        None => manifest.entries.keys().cloned().collect(),
    };
    let preds: Vec<Prediction> = match load_any_model(&a.model)? {
        LoadedModel::Lstm(m) => {
            let seqs = pipeline::load_histograms(&a.features, &ids)?;
            pipeline::predict_hist_lstm(&m.config, &m.params, &seqs)?
        }
        LoadedModel::Knn(m) => {
            let reports = pipeline::load_blink_reports(&a.features, &ids)?;
            pipeline::predict_blink_knn(&m, &reports)?
        }
    };
    std::fs::create_dir_all(&out)?;
    let path = out.join("predictions.csv");
    let mut w = create(&path)?;
    eval::write_predictions_csv(&preds, &mut w)?;
    w.flush()?;
    write_json(&out.join("predict.run.json"), &run_record(cli, "predict", a))?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let out = out_dir(cli);
    if a.bins == 0 {
        usage("--bins must be positive");
    }
    let manifest = Manifest::load(&a.manifest)
        .with_context(|| format!("loading {}", a.manifest.display()))?;
    let file = File::open(&a.predictions)
        .with_context(|| format!("opening {}", a.predictions.display()))?;
    let preds = manifest.join(&eval::read_predictions_csv(std::io::BufReader::new(file))?)?;
    let mut report = EvalReport::from_predictions(&a.tag, &preds)?;
    report.config = Some(run_record(cli, "evaluate", a));
    std::fs::create_dir_all(&out)?;
    let mut w = create(&out.join("report.json"))?;
    eval::write_report(&report, &mut w)?;
    w.flush()?;
    let mut w = create(&out.join("scores.dat"))?;
    eval::write_score_histogram(&preds, a.bins, &mut w)?;
    w.flush()?;
    println!(
        "n={} accuracy={:.4} log_loss={:.6}",
        report.n, report.accuracy, report.log_loss
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Extract(a) => cmd_extract(cli, a),
        Command::Blinks(a) => cmd_blinks(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Predict(a) => cmd_predict(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let argv = match config::expand_args(argv, SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => usage(format!("{e:#}")),
    };
    let cli = Cli::parse_from(argv);

    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).init();

    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            warn!("could not size the thread pool: {e}");
        }
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
