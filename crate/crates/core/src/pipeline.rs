//! Manifest-level operations shared by the command line and the tests.
//!
//! Per-video work runs on the rayon pool; results are always returned in
//! manifest (video id) order.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blink::{self, BlinkParams, BlinkReport};
use crate::eval::{self, Manifest, ManifestEntry, Prediction, Split};
use crate::histogram::{self, HistogramSequence, SEQ_LEN};
use crate::knn::{KnnModel, KnnPrediction};
use crate::label::Label;
use crate::media::{self, RawSidecar, SourceDescriptor};
use crate::net::{self, ModelConfig, ModelParams, Sample, TrainOptions, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("video `{0}` has no {1} entry in the manifest")]
    MissingPath(String, &'static str),
    #[error("no features for video `{0}`")]
    MissingFeatures(String),
    #[error(transparent)]
    Media(#[from] media::MediaError),
    #[error(transparent)]
    Histogram(#[from] histogram::HistogramError),
    #[error(transparent)]
    Blink(#[from] blink::BlinkError),
    #[error(transparent)]
    Knn(#[from] crate::knn::KnnError),
    #[error(transparent)]
    Net(#[from] net::NetError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Pick a frame source from the path: `.y4m` files, directories of PNGs, or
/// raw gray8 with a `<path>.json` sidecar.
pub fn source_for(path: &Path) -> Result<SourceDescriptor> {
    if path.is_dir() {
        return Ok(SourceDescriptor::png_dir(path));
    }
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("y4m")) {
        return Ok(SourceDescriptor::y4m(path));
    }
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".json");
    let sidecar = RawSidecar::from_json_file(Path::new(&sidecar))?;
    Ok(SourceDescriptor::raw_gray(path, sidecar))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistFormat {
    Fhs,
    Json,
}

impl HistFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HistFormat::Fhs => "fhs",
            HistFormat::Json => "json",
        }
    }
}

/// Outcome of a per-video batch job: successes and failures, each in id order.
#[derive(Debug, Default)]
pub struct BatchSummary {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(String, String)>,
}

fn video_path(manifest_path: &Path, id: &str, e: &ManifestEntry) -> Result<PathBuf> {
    let rel = e
        .video
        .as_deref()
        .ok_or_else(|| PipelineError::MissingPath(id.to_string(), "video"))?;
    Ok(Manifest::resolve(manifest_path, rel))
}

pub fn histogram_sequence_for(manifest_path: &Path, id: &str, e: &ManifestEntry) -> Result<HistogramSequence> {
    let src = source_for(&video_path(manifest_path, id, e)?)?;
    let frames = media::read_frames(&src)?;
    Ok(histogram::build_histogram_sequence(id, &frames, SEQ_LEN)?)
}

pub fn histogram_file(dir: &Path, id: &str, format: HistFormat) -> PathBuf {
    dir.join(format!("{id}.{}", format.extension()))
}

/// Write one histogram file per manifest video into `out_dir`.
pub fn extract_histograms(
    manifest_path: &Path,
    manifest: &Manifest,
    out_dir: &Path,
    format: HistFormat,
) -> Result<BatchSummary> {
    std::fs::create_dir_all(out_dir)?;
    let entries: Vec<(&String, &ManifestEntry)> = manifest.entries.iter().collect();
    let results: Vec<(String, Result<PathBuf>)> = entries
        .par_iter()
        .map(|&(id, e)| {
            let run = || -> Result<PathBuf> {
                let seq = histogram_sequence_for(manifest_path, id, e)?;
                let path = histogram_file(out_dir, id, format);
                let w = BufWriter::new(File::create(&path)?);
                match format {
                    HistFormat::Fhs => seq.write_fhs(w)?,
                    HistFormat::Json => seq.write_json(w)?,
                }
                Ok(path)
            };
            (id.clone(), run())
        })
        .collect();
    Ok(summarize(results))
}

fn summarize(results: Vec<(String, Result<PathBuf>)>) -> BatchSummary {
    let mut summary = BatchSummary::default();
    for (id, r) in results {
        match r {
            Ok(p) => summary.written.push(p),
            Err(e) => summary.failures.push((id, e.to_string())),
        }
    }
    summary
}

pub fn blink_report_for(
    manifest_path: &Path,
    id: &str,
    e: &ManifestEntry,
    fps: f64,
    params: BlinkParams,
) -> Result<BlinkReport> {
    let rel = e
        .landmarks
        .as_deref()
        .ok_or_else(|| PipelineError::MissingPath(id.to_string(), "landmarks"))?;
    let frames = blink::parse_landmarks(&Manifest::resolve(manifest_path, rel))?;
    Ok(blink::analyze(id, &frames, fps, params)?)
}

/// Write one blink report (`<id>.json`) per manifest video into `out_dir`.
pub fn extract_blinks(
    manifest_path: &Path,
    manifest: &Manifest,
    out_dir: &Path,
    fps: f64,
    params: BlinkParams,
) -> Result<BatchSummary> {
    params.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let entries: Vec<(&String, &ManifestEntry)> = manifest.entries.iter().collect();
    let results = entries
        .par_iter()
        .map(|&(id, e)| {
            let run = || -> Result<PathBuf> {
                let report = blink_report_for(manifest_path, id, e, fps, params)?;
                let path = out_dir.join(format!("{id}.json"));
                serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &report)?;
                Ok(path)
            };
            (id.clone(), run())
        })
        .collect();
    Ok(summarize(results))
}

/// Load histogram files for `ids` from `dir`, trying FHS1 then JSON.
pub fn load_histograms(dir: &Path, ids: &[String]) -> Result<Vec<HistogramSequence>> {
    ids.par_iter()
        .map(|id| {
            for format in [HistFormat::Fhs, HistFormat::Json] {
                let path = histogram_file(dir, id, format);
                if path.exists() {
                    let mut seq = HistogramSequence::load(&path)?;
                    seq.video_id = id.clone();
                    return Ok(seq);
                }
            }
            Err(PipelineError::MissingFeatures(id.clone()))
        })
        .collect()
}

pub fn load_blink_reports(dir: &Path, ids: &[String]) -> Result<Vec<BlinkReport>> {
    ids.iter()
        .map(|id| {
            let path = dir.join(format!("{id}.json"));
            if !path.exists() {
                return Err(PipelineError::MissingFeatures(id.clone()));
            }
            Ok(BlinkReport::load(&path)?)
        })
        .collect()
}

fn samples<'a>(seqs: &'a [HistogramSequence], labels: &[Label]) -> Vec<Sample<'a>> {
    seqs.iter()
        .zip(labels)
        .map(|(s, l)| Sample {
            input: s.flat(),
            target: l.as_target(),
        })
        .collect()
}

fn labels_for(manifest: &Manifest, ids: &[String]) -> Result<Vec<Label>> {
    ids.iter()
        .map(|id| Ok(manifest.label(id)?))
        .collect()
}

/// Train the histogram LSTM on the split's train ids, validating on val ids.
pub fn train_hist_lstm(
    manifest: &Manifest,
    features_dir: &Path,
    split: &Split,
    cfg: &ModelConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let train_seqs = load_histograms(features_dir, &split.train)?;
    let val_seqs = load_histograms(features_dir, &split.val)?;
    train_hist_lstm_in_memory(manifest, &train_seqs, &val_seqs, cfg, opts)
}

pub fn train_hist_lstm_in_memory(
    manifest: &Manifest,
    train_seqs: &[HistogramSequence],
    val_seqs: &[HistogramSequence],
    cfg: &ModelConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let train_ids: Vec<String> = train_seqs.iter().map(|s| s.video_id.clone()).collect();
    let val_ids: Vec<String> = val_seqs.iter().map(|s| s.video_id.clone()).collect();
    let train_labels = labels_for(manifest, &train_ids)?;
    let val_labels = labels_for(manifest, &val_ids)?;
    Ok(net::train(
        cfg,
        opts,
        &samples(train_seqs, &train_labels),
        &samples(val_seqs, &val_labels),
    )?)
}

pub fn predict_hist_lstm(
    cfg: &ModelConfig,
    params: &ModelParams,
    seqs: &[HistogramSequence],
) -> Result<Vec<Prediction>> {
    seqs.par_iter()
        .map(|s| {
            Ok(Prediction {
                video_id: s.video_id.clone(),
                p_fake: net::predict(cfg, params, s.flat())?,
                label: None,
            })
        })
        .collect()
}

pub fn fit_blink_knn(manifest: &Manifest, reports: &[BlinkReport], k: usize) -> Result<KnnModel> {
    let training = reports
        .iter()
        .map(|r| Ok((r.features.to_vec(), manifest.label(&r.video_id)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(KnnModel::fit(&training, k)?)
}

pub fn predict_blink_knn(model: &KnnModel, reports: &[BlinkReport]) -> Result<Vec<Prediction>> {
    reports
        .iter()
        .map(|r| {
            let KnnPrediction { p_fake, .. } = model.predict(&r.features.to_vec())?;
            Ok(Prediction {
                video_id: r.video_id.clone(),
                p_fake,
                label: None,
            })
        })
        .collect()
}

/// Read a JSON document from disk.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
