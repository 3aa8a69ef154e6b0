//! Eye-blink statistics from 68-point facial landmark streams.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];

pub const LANDMARK_COUNT: usize = 68;
/// First landmark of the right eye in the 68-point layout (points 36..=41).
pub const RIGHT_EYE: usize = 36;
/// First landmark of the left eye (points 42..=47).
pub const LEFT_EYE: usize = 42;

pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const DEFAULT_MIN_CONSEC: usize = 3;

#[derive(Debug, Error)]
pub enum BlinkError {
    #[error("line {line}: expected {LANDMARK_COUNT} points, got {got}")]
    BadPointCount { line: usize, got: usize },
    #[error("line {line}: frame index {frame} does not follow {prev}")]
    NonMonotoneFrameIndex { line: usize, frame: u64, prev: u64 },
    #[error("line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("degenerate eye: horizontal span is zero (frame {frame:?})")]
    DegenerateEye { frame: Option<u64> },
    #[error("landmark stream is empty")]
    EmptyStream,
    #[error("invalid detection parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BlinkError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkFrame {
    #[serde(rename = "frame")]
    pub frame_index: u64,
    pub points: Vec<Point>,
}

impl LandmarkFrame {
    pub fn right_eye(&self) -> [Point; 6] {
        self.points[RIGHT_EYE..RIGHT_EYE + 6].try_into().unwrap()
    }

    pub fn left_eye(&self) -> [Point; 6] {
        self.points[LEFT_EYE..LEFT_EYE + 6].try_into().unwrap()
    }
}

/// Parse one JSONL landmark line. `line` is 1-based for diagnostics.
fn parse_landmark_line(text: &str, line: usize) -> Result<LandmarkFrame> {
    let frame: LandmarkFrame =
        serde_json::from_str(text).map_err(|e| BlinkError::MalformedLine {
            line,
            msg: e.to_string(),
        })?;
    if frame.points.len() != LANDMARK_COUNT {
        return Err(BlinkError::BadPointCount {
            line,
            got: frame.points.len(),
        });
    }
    if frame.points.iter().flatten().any(|c| !c.is_finite()) {
        return Err(BlinkError::MalformedLine {
            line,
            msg: "non-finite coordinate".into(),
        });
    }
    Ok(frame)
}

/// Reads landmark frames from JSON lines, enforcing strictly increasing
/// frame indices. Blank lines are skipped.
pub fn read_landmarks<R: BufRead>(reader: R) -> Result<Vec<LandmarkFrame>> {
    let mut frames: Vec<LandmarkFrame> = Vec::new();
    for (i, text) in reader.lines().enumerate() {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let frame = parse_landmark_line(&text, i + 1)?;
        if let Some(prev) = frames.last() {
            if frame.frame_index <= prev.frame_index {
                return Err(BlinkError::NonMonotoneFrameIndex {
                    line: i + 1,
                    frame: frame.frame_index,
                    prev: prev.frame_index,
                });
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn parse_landmarks(path: &Path) -> Result<Vec<LandmarkFrame>> {
    read_landmarks(BufReader::new(std::fs::File::open(path)?))
}

pub fn write_landmarks<W: Write>(mut w: W, frames: &[LandmarkFrame]) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Six-landmark eye aspect ratio, `(|p2-p6| + |p3-p5|) / (2 |p1-p4|)`.
pub fn eye_aspect_ratio(eye: &[Point; 6]) -> Result<f64> {
    let [p1, p2, p3, p4, p5, p6] = *eye;
    let span = dist(p1, p4);
    if span == 0.0 {
        return Err(BlinkError::DegenerateEye { frame: None });
    }
    Ok((dist(p2, p6) + dist(p3, p5)) / (2.0 * span))
}

/// Per-frame mean EAR of both eyes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarTrace {
    pub fps: f64,
    pub values: Vec<f64>,
}

impl EarTrace {
    pub fn duration_s(&self) -> f64 {
        self.values.len() as f64 / self.fps
    }
}

pub fn ear_trace(frames: &[LandmarkFrame], fps: f64) -> Result<EarTrace> {
    if frames.is_empty() {
        return Err(BlinkError::EmptyStream);
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(BlinkError::InvalidParams(format!("fps {fps}")));
    }
    let values = frames
        .iter()
        .map(|f| {
            let with_frame = |e| match e {
                BlinkError::DegenerateEye { .. } => BlinkError::DegenerateEye {
                    frame: Some(f.frame_index),
                },
                other => other,
            };
            let right = eye_aspect_ratio(&f.right_eye()).map_err(with_frame)?;
            let left = eye_aspect_ratio(&f.left_eye()).map_err(with_frame)?;
            Ok((left + right) / 2.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EarTrace { fps, values })
}

/// Closed-eye interval, both ends inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlinkEvent {
    #[serde(rename = "start")]
    pub start_frame: usize,
    #[serde(rename = "end")]
    pub end_frame: usize,
}

impl BlinkEvent {
    pub fn duration_frames(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlinkParams {
    pub threshold: f64,
    pub min_consec: usize,
}

impl Default for BlinkParams {
    fn default() -> Self {
        BlinkParams {
            threshold: DEFAULT_THRESHOLD,
            min_consec: DEFAULT_MIN_CONSEC,
        }
    }
}

impl BlinkParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(BlinkError::InvalidParams(format!(
                "threshold {} must be positive",
                self.threshold
            )));
        }
        if self.min_consec == 0 {
            return Err(BlinkError::InvalidParams("min_consec must be >= 1".into()));
        }
        Ok(())
    }
}

/// Maximal runs of values below `threshold` lasting at least `min_consec`
/// frames.
pub fn detect_blinks(values: &[f64], params: BlinkParams) -> Result<Vec<BlinkEvent>> {
    params.validate()?;
    let mut events = Vec::new();
    let mut run_start = None;
    for (i, &v) in values.iter().enumerate() {
        match (v < params.threshold, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                if i - s >= params.min_consec {
                    events.push(BlinkEvent {
                        start_frame: s,
                        end_frame: i - 1,
                    });
                }
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        if values.len() - s >= params.min_consec {
            events.push(BlinkEvent {
                start_frame: s,
                end_frame: values.len() - 1,
            });
        }
    }
    Ok(events)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlinkFeatures {
    pub blinks_per_10s: f64,
    pub mean_blink_duration_s: f64,
    pub mean_inter_blink_gap_s: f64,
    pub mean_ear: f64,
}

impl BlinkFeatures {
    pub const DIM: usize = 4;

    pub fn to_vec(&self) -> [f64; Self::DIM] {
        [
            self.blinks_per_10s,
            self.mean_blink_duration_s,
            self.mean_inter_blink_gap_s,
            self.mean_ear,
        ]
    }
}

/// Gaps are measured between the end of one blink and the start of the next.
pub fn blink_features(trace: &EarTrace, events: &[BlinkEvent]) -> BlinkFeatures {
    let duration = trace.duration_s();
    let n = events.len();
    let mean_blink_duration_s = if n == 0 {
        0.0
    } else {
        events.iter().map(|e| e.duration_frames() as f64).sum::<f64>() / n as f64 / trace.fps
    };
    let mean_inter_blink_gap_s = if n < 2 {
        duration
    } else {
        let gaps: f64 = events
            .windows(2)
            .map(|w| (w[1].start_frame - w[0].end_frame - 1) as f64)
            .sum();
        gaps / (n - 1) as f64 / trace.fps
    };
    let mean_ear = trace.values.iter().sum::<f64>() / trace.values.len().max(1) as f64;
    BlinkFeatures {
        blinks_per_10s: n as f64 * 10.0 / duration,
        mean_blink_duration_s,
        mean_inter_blink_gap_s,
        mean_ear,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlinkReport {
    pub video_id: String,
    pub params: BlinkParams,
    pub blinks: Vec<BlinkEvent>,
    pub features: BlinkFeatures,
}

/// Full landmark-to-features pass for one video.
pub fn analyze(
    video_id: &str,
    frames: &[LandmarkFrame],
    fps: f64,
    params: BlinkParams,
) -> Result<BlinkReport> {
    let trace = ear_trace(frames, fps)?;
    let blinks = detect_blinks(&trace.values, params)?;
    let features = blink_features(&trace, &blinks);
    Ok(BlinkReport {
        video_id: video_id.to_string(),
        params,
        blinks,
        features,
    })
}

impl BlinkReport {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(
            std::fs::File::open(path)?,
        ))?)
    }
}
