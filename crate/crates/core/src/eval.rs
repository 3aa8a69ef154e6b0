//! Competition-style scoring, stratified splitting and report files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::Label;

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logarithms.
pub const LOG_LOSS_EPS: f64 = 1e-15;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions")]
    EmptyInput,
    #[error("prediction for `{0}` has no label")]
    MissingLabels(String),
    #[error("probability {p} for `{id}` is outside [0, 1]")]
    BadProbability { id: String, p: f64 },
    #[error("video id `{0}` is not in the manifest")]
    UnknownVideoId(String),
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
    #[error("too few videos: {n} cannot fill every split ({counts:?})")]
    TooFewVideos { n: usize, counts: [usize; 3] },
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub video_id: String,
    pub p_fake: f64,
    pub label: Option<Label>,
}

impl Prediction {
    pub fn labeled(video_id: impl Into<String>, p_fake: f64, label: Label) -> Self {
        Prediction {
            video_id: video_id.into(),
            p_fake,
            label: Some(label),
        }
    }
}

fn labeled_pairs(preds: &[Prediction]) -> Result<Vec<(f64, Label)>> {
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    preds
        .iter()
        .map(|p| {
            let label = p
                .label
                .ok_or_else(|| EvalError::MissingLabels(p.video_id.clone()))?;
            if !(0.0..=1.0).contains(&p.p_fake) {
                return Err(EvalError::BadProbability {
                    id: p.video_id.clone(),
                    p: p.p_fake,
                });
            }
            Ok((p.p_fake, label))
        })
        .collect()
}

/// Clipped binary cross-entropy of one prediction.
pub fn clipped_bce(p_fake: f64, target: f64) -> f64 {
    let p = p_fake.clamp(LOG_LOSS_EPS, 1.0 - LOG_LOSS_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

pub fn log_loss(preds: &[Prediction]) -> Result<f64> {
    let pairs = labeled_pairs(preds)?;
    let total: f64 = pairs
        .iter()
        .map(|&(p, y)| clipped_bce(p, y.as_target()))
        .sum();
    Ok(total / pairs.len() as f64)
}

/// A score at or above `threshold` counts as a FAKE call.
pub fn accuracy(preds: &[Prediction], threshold: f64) -> Result<f64> {
    let c = confusion(preds, threshold)?;
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(preds: &[Prediction], threshold: f64) -> Result<Confusion> {
    let mut c = Confusion::default();
    for (p, y) in labeled_pairs(preds)? {
        match (p >= threshold, y.is_fake()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub model_tag: String,
    pub n: usize,
    pub accuracy: f64,
    pub log_loss: f64,
    pub confusion: Confusion,
    /// Resolved run configuration, when the producer recorded one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn from_predictions(model_tag: &str, preds: &[Prediction]) -> Result<Self> {
        let confusion = confusion(preds, DEFAULT_THRESHOLD)?;
        Ok(EvalReport {
            model_tag: model_tag.to_string(),
            n: preds.len(),
            accuracy: (confusion.tp + confusion.tn) as f64 / preds.len() as f64,
            log_loss: log_loss(preds)?,
            confusion,
            config: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.confusion.total() != self.n {
            return Err(EvalError::MalformedReport(format!(
                "confusion counts sum to {}, n is {}",
                self.confusion.total(),
                self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(EvalError::MalformedReport(format!(
                "accuracy {}",
                self.accuracy
            )));
        }
        if !(self.log_loss >= 0.0) {
            return Err(EvalError::MalformedReport(format!(
                "log loss {}",
                self.log_loss
            )));
        }
        Ok(())
    }
}

pub fn write_report<W: Write>(report: &EvalReport, w: W) -> Result<()> {
    serde_json::to_writer_pretty(w, report)?;
    Ok(())
}

pub fn read_report<R: Read>(r: R) -> Result<EvalReport> {
    let report: EvalReport =
        serde_json::from_reader(r).map_err(|e| EvalError::MalformedReport(e.to_string()))?;
    report.validate()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: Label,
    /// Video path relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<String>,
    /// Landmark JSONL path relative to the manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
}

/// Video id to label and file locations, ordered by id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label(&self, id: &str) -> Result<Label> {
        self.entries
            .get(id)
            .map(|e| e.label)
            .ok_or_else(|| EvalError::UnknownVideoId(id.to_string()))
    }

    pub fn to_writer<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Resolve an entry-relative path against the manifest location.
    pub fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(rel)
    }

    /// Attach manifest labels to unlabeled predictions.
    pub fn join(&self, preds: &[Prediction]) -> Result<Vec<Prediction>> {
        preds
            .iter()
            .map(|p| {
                Ok(Prediction {
                    label: Some(self.label(&p.video_id)?),
                    ..p.clone()
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Largest-remainder rounding of `total * ratios`, ties to the earlier slot.
fn apportion(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| total as f64 * r);
    // Guard against 0.7 * 20 landing a hair under 14.
    let mut counts = exact.map(|x| (x + 1e-9).floor() as usize);
    let mut left = total.saturating_sub(counts.iter().sum());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[s] += 1;
        left -= 1;
    }
    counts
}

/// Seeded stratified train/val/test split.
///
/// Overall split sizes come from largest-remainder rounding. Each label's
/// share of a split is its floored exact share plus at most one extra video,
/// assigned so the per-split totals are met. Within a label, ids are shuffled
/// and cut contiguously. Each returned list is sorted by id.
pub fn split_dataset(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(EvalError::BadRatios(ratios));
    }
    if manifest.is_empty() {
        return Err(EvalError::EmptyInput);
    }

    let mut groups: BTreeMap<Label, Vec<&str>> = BTreeMap::new();
    for (id, e) in &manifest.entries {
        groups.entry(e.label).or_default().push(id);
    }
    let totals = apportion(manifest.len(), &ratios);
    if totals.iter().any(|&c| c == 0) {
        return Err(EvalError::TooFewVideos {
            n: manifest.len(),
            counts: totals,
        });
    }

    let floors: Vec<[usize; 3]> = groups
        .values()
        .map(|ids| ratios.map(|r| (ids.len() as f64 * r + 1e-9).floor() as usize))
        .collect();
    let mut quotas = floors.clone();
    let mut col_left: Vec<usize> = (0..3)
        .map(|s| totals[s] - floors.iter().map(|f| f[s]).sum::<usize>())
        .collect();
    let mut row_left: Vec<(usize, usize)> = groups
        .values()
        .zip(&floors)
        .enumerate()
        .map(|(g, (ids, f))| (g, ids.len() - f.iter().sum::<usize>()))
        .collect();
    // Greedy bipartite fill: rows with the most leftovers pick the splits
    // with the most remaining room. Each cell receives at most one extra.
    row_left.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(g, need) in &row_left {
        let mut cols = [0usize, 1, 2];
        cols.sort_by(|&a, &b| col_left[b].cmp(&col_left[a]).then(a.cmp(&b)));
        for &s in cols.iter().take(need) {
            debug_assert!(col_left[s] > 0);
            quotas[g][s] += 1;
            col_left[s] -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (ids, quota) in groups.values().zip(&quotas) {
        let mut ids: Vec<&str> = ids.clone();
        ids.shuffle(&mut rng);
        let (a, rest) = ids.split_at(quota[0]);
        let (b, c) = rest.split_at(quota[1]);
        split.train.extend(a.iter().map(|s| s.to_string()));
        split.val.extend(b.iter().map(|s| s.to_string()));
        split.test.extend(c.iter().map(|s| s.to_string()));
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    video_id: String,
    p_fake: f64,
}

/// Submission-shaped CSV: header `video_id,p_fake`.
pub fn write_predictions_csv<W: Write>(preds: &[Prediction], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in preds {
        out.serialize(CsvRow {
            video_id: p.video_id.clone(),
            p_fake: p.p_fake,
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(r: R) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["video_id", "p_fake"] {
        return Err(EvalError::MalformedReport(format!(
            "predictions header must be video_id,p_fake, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize()
        .map(|row| {
            let row: CsvRow = row?;
            if !(0.0..=1.0).contains(&row.p_fake) {
                return Err(EvalError::BadProbability {
                    id: row.video_id,
                    p: row.p_fake,
                });
            }
            Ok(Prediction {
                video_id: row.video_id,
                p_fake: row.p_fake,
                label: None,
            })
        })
        .collect()
}

/// Whitespace-separated score histogram per label, readable by gnuplot.
pub fn write_score_histogram<W: Write>(preds: &[Prediction], bins: usize, mut w: W) -> Result<()> {
    let bins = bins.max(1);
    let mut real = vec![0usize; bins];
    let mut fake = vec![0usize; bins];
    for p in preds {
        let b = ((p.p_fake * bins as f64) as usize).min(bins - 1);
        match p.label {
            Some(Label::Fake) => fake[b] += 1,
            Some(Label::Real) => real[b] += 1,
            None => {}
        }
    }
    writeln!(w, "# bin_lo bin_hi real fake")?;
    for b in 0..bins {
        writeln!(
            w,
            "{} {} {} {}",
            b as f64 / bins as f64,
            (b + 1) as f64 / bins as f64,
            real[b],
            fake[b]
        )?;
    }
    Ok(())
}
