//! Labeled synthetic data: procedural videos with an optional tonal shift and
//! checkerboard overlay, and EAR traces with a controlled blink rate.
//!
//! All generation is a pure function of the spec and its seed. Dataset items
//! derive their seeds from `(dataset seed, item index)`, so parallel
//! generation produces identical files in any order.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blink::{EarTrace, LandmarkFrame, Point, LANDMARK_COUNT, LEFT_EYE, RIGHT_EYE};
use crate::eval::{Manifest, ManifestEntry};
use crate::label::Label;
use crate::media::{Fps, FrameSequence};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Media(#[from] crate::media::MediaError),
    #[error(transparent)]
    Blink(#[from] crate::blink::BlinkError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Spatial lattice spacing of the value-noise field, in pixels.
const NOISE_CELL_PX: usize = 16;
/// Temporal lattice spacing, in frames.
const NOISE_CELL_FRAMES: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthVideoSpec {
    pub width: u32,
    pub height: u32,
    pub n_frames: usize,
    pub fps: Fps,
    pub base_seed: u64,
    pub fake: bool,
    /// Tonal transfer exponent applied to fake content.
    pub gamma: f64,
    /// Checkerboard amplitude added to fake content, 0..=32.
    pub checker_amp: u8,
    /// Checkerboard cell size in pixels.
    pub checker_period: u32,
}

impl Default for SynthVideoSpec {
    fn default() -> Self {
        SynthVideoSpec {
            width: 64,
            height: 64,
            n_frames: 300,
            fps: Fps { num: 30, den: 1 },
            base_seed: 0,
            fake: false,
            gamma: 0.9,
            checker_amp: 6,
            checker_period: 2,
        }
    }
}

impl SynthVideoSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.width == 0 || self.height == 0 || self.n_frames == 0 {
            return bad(format!(
                "{}x{} with {} frames",
                self.width, self.height, self.n_frames
            ));
        }
        if self.fps.num == 0 || self.fps.den == 0 {
            return bad("zero frame rate".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {}", self.gamma));
        }
        if self.checker_amp > 32 {
            return bad(format!("checker_amp {} exceeds 32", self.checker_amp));
        }
        if self.checker_period == 0 {
            return bad("checker_period must be >= 1".into());
        }
        Ok(())
    }

    /// Same content, unmanipulated.
    pub fn real_twin(&self) -> Self {
        SynthVideoSpec {
            fake: false,
            ..*self
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Seeded trilinear value noise in `[0, 255]`, smoothstep-interpolated.
struct ValueNoise {
    nx: usize,
    ny: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(width: usize, height: usize, frames: usize, rng: &mut ChaCha8Rng) -> Self {
        let nx = width.div_ceil(NOISE_CELL_PX) + 1;
        let ny = height.div_ceil(NOISE_CELL_PX) + 1;
        let nt = frames.div_ceil(NOISE_CELL_FRAMES) + 1;
        let lattice = (0..nx * ny * nt).map(|_| rng.gen_range(0.0..255.0)).collect();
        ValueNoise { nx, ny, lattice }
    }

    fn at(&self, x: usize, y: usize, t: usize) -> f64 {
        self.lattice[(t * self.ny + y) * self.nx + x]
    }

    fn frame(&self, width: usize, height: usize, t: usize) -> Vec<u8> {
        let (t0, ft) = (t / NOISE_CELL_FRAMES, t % NOISE_CELL_FRAMES);
        let wt = smoothstep(ft as f64 / NOISE_CELL_FRAMES as f64);
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let (y0, fy) = (y / NOISE_CELL_PX, y % NOISE_CELL_PX);
            let wy = smoothstep(fy as f64 / NOISE_CELL_PX as f64);
            for x in 0..width {
                let (x0, fx) = (x / NOISE_CELL_PX, x % NOISE_CELL_PX);
                let wx = smoothstep(fx as f64 / NOISE_CELL_PX as f64);
                let plane = |tt: usize| {
                    let a = lerp(self.at(x0, y0, tt), self.at(x0 + 1, y0, tt), wx);
                    let b = lerp(self.at(x0, y0 + 1, tt), self.at(x0 + 1, y0 + 1, tt), wx);
                    lerp(a, b, wy)
                };
                let v = lerp(plane(t0), plane(t0 + 1), wt);
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + (b - a) * w
}

/// Lookup table for `v -> round(255 (v / 255)^gamma)`.
pub fn gamma_table(gamma: f64) -> [u8; 256] {
    let mut lut = [0u8; 256];
    for (v, out) in lut.iter_mut().enumerate() {
        *out = if gamma == 1.0 {
            v as u8
        } else {
            (255.0 * (v as f64 / 255.0).powf(gamma))
                .round()
                .clamp(0.0, 255.0) as u8
        };
    }
    lut
}

/// Centered region covering a quarter of the frame: `(x0, y0, w, h)`.
pub fn checker_region(width: u32, height: u32) -> (u32, u32, u32, u32) {
    let (w, h) = (width / 2, height / 2);
    ((width - w) / 2, (height - h) / 2, w, h)
}

/// Apply the fake-video manipulation to one frame in place.
fn manipulate(frame: &mut [u8], spec: &SynthVideoSpec, lut: &[u8; 256]) {
    for v in frame.iter_mut() {
        *v = lut[*v as usize];
    }
    if spec.checker_amp == 0 {
        return;
    }
    let (x0, y0, rw, rh) = checker_region(spec.width, spec.height);
    let amp = spec.checker_amp as i16;
    let period = spec.checker_period;
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            let cell = (x - x0) / period + (y - y0) / period;
            let delta = if cell % 2 == 0 { amp } else { -amp };
            let idx = y as usize * spec.width as usize + x as usize;
            frame[idx] = (frame[idx] as i16 + delta).clamp(0, 255) as u8;
        }
    }
}

pub fn gen_video(spec: &SynthVideoSpec) -> Result<FrameSequence> {
    spec.validate()?;
    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.base_seed);
    let noise = ValueNoise::new(w, h, spec.n_frames, &mut rng);
    let lut = gamma_table(spec.gamma);
    let frames = (0..spec.n_frames)
        .map(|t| {
            let mut f = noise.frame(w, h, t);
            if spec.fake {
                manipulate(&mut f, spec, &lut);
            }
            f
        })
        .collect();
    Ok(FrameSequence::new(spec.width, spec.height, spec.fps, frames)?)
}

/// Y4M header line written by [`write_y4m_to`].
pub fn y4m_header(seq: &FrameSequence) -> String {
    format!(
        "YUV4MPEG2 W{} H{} F{}:{} Ip A1:1 C420\n",
        seq.width(),
        seq.height(),
        seq.fps().num,
        seq.fps().den
    )
}

/// Luma carries the frame; both 4:2:0 chroma planes are flat 128.
pub fn write_y4m_to<W: Write>(seq: &FrameSequence, mut w: W) -> std::io::Result<()> {
    let chroma = vec![
        128u8;
        crate::media::Chroma::C420.chroma_bytes(seq.width(), seq.height())
    ];
    w.write_all(y4m_header(seq).as_bytes())?;
    for f in seq.frames() {
        w.write_all(b"FRAME\n")?;
        w.write_all(f)?;
        w.write_all(&chroma)?;
    }
    w.flush()
}

pub fn write_y4m(seq: &FrameSequence, path: &Path) -> Result<()> {
    write_y4m_to(seq, BufWriter::new(File::create(path)?))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTraceSpec {
    pub duration_s: f64,
    pub fps: f64,
    pub blink_rate_per_10s: f64,
    pub open_ear: f64,
    pub closed_ear: f64,
    /// Inclusive blink length range in frames.
    pub blink_len_frames: (usize, usize),
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for SynthTraceSpec {
    fn default() -> Self {
        SynthTraceSpec {
            duration_s: 30.0,
            fps: 30.0,
            blink_rate_per_10s: 4.8,
            open_ear: 0.30,
            closed_ear: 0.08,
            blink_len_frames: (3, 9),
            jitter_sigma: 0.01,
            seed: 0,
        }
    }
}

/// Attempts at placing one blink before it is dropped.
const MAX_PLACEMENT_TRIES: usize = 1000;

impl SynthTraceSpec {
    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if !(self.fps > 0.0 && self.duration_s > 0.0) || self.n_frames() == 0 {
            return bad(format!("{} s at {} fps", self.duration_s, self.fps));
        }
        if !(self.blink_rate_per_10s >= 0.0 && self.blink_rate_per_10s.is_finite()) {
            return bad(format!("blink rate {}", self.blink_rate_per_10s));
        }
        let (lo, hi) = self.blink_len_frames;
        if lo == 0 || lo > hi || hi > self.n_frames() {
            return bad(format!("blink length range {lo}..={hi}"));
        }
        if !(self.closed_ear >= 0.0 && self.closed_ear < self.open_ear) {
            return bad(format!(
                "closed EAR {} must be below open EAR {}",
                self.closed_ear, self.open_ear
            ));
        }
        if !(self.jitter_sigma >= 0.0) {
            return bad(format!("jitter {}", self.jitter_sigma));
        }
        Ok(())
    }
}

/// Closed-eye intervals `(start, len)` sorted by start, with at least one
/// open frame between consecutive blinks.
fn place_blinks(spec: &SynthTraceSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let n = spec.n_frames();
    let lambda = spec.blink_rate_per_10s / 10.0 * spec.duration_s;
    let count = if lambda > 0.0 {
        Poisson::new(lambda).expect("positive rate").sample(rng) as usize
    } else {
        0
    };
    let (lo, hi) = spec.blink_len_frames;
    let mut blinks: Vec<(usize, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..MAX_PLACEMENT_TRIES {
            let len = rng.gen_range(lo..=hi);
            let start = rng.gen_range(0..=n - len);
            let clear = blinks
                .iter()
                .all(|&(s, l)| start + len < s || s + l < start);
            if clear {
                blinks.push((start, len));
                break;
            }
        }
    }
    blinks.sort_unstable();
    blinks
}

pub fn gen_ear_trace(spec: &SynthTraceSpec) -> Result<EarTrace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blinks = place_blinks(spec, &mut rng);
    let mut values = vec![spec.open_ear; spec.n_frames()];
    for (s, l) in blinks {
        values[s..s + l].fill(spec.closed_ear);
    }
    if spec.jitter_sigma > 0.0 {
        let jitter = Normal::new(0.0, spec.jitter_sigma).expect("valid sigma");
        for v in values.iter_mut() {
            *v = (*v + jitter.sample(&mut rng)).max(0.0);
        }
    }
    Ok(EarTrace {
        fps: spec.fps,
        values,
    })
}

/// Horizontal eye span of rendered faces, in pixels.
const EYE_WIDTH: f64 = 30.0;
const RIGHT_EYE_CENTER: Point = [100.0, 120.0];
const LEFT_EYE_CENTER: Point = [160.0, 120.0];

/// Six eye landmarks whose aspect ratio is exactly `ear` (up to rounding):
/// corners on the horizontal axis, lids at one sixth of the span in from
/// each corner, lid separation `ear * width`.
pub fn eye_points(center: Point, ear: f64) -> [Point; 6] {
    let [cx, cy] = center;
    let half_w = EYE_WIDTH / 2.0;
    let lid_x = EYE_WIDTH / 6.0;
    let half_h = ear * EYE_WIDTH / 2.0;
    [
        [cx - half_w, cy],
        [cx - lid_x, cy - half_h],
        [cx + lid_x, cy - half_h],
        [cx + half_w, cy],
        [cx + lid_x, cy + half_h],
        [cx - lid_x, cy + half_h],
    ]
}

/// Static face outline for the non-eye landmarks.
fn face_template() -> Vec<Point> {
    (0..LANDMARK_COUNT)
        .map(|k| {
            let a = k as f64 / LANDMARK_COUNT as f64 * std::f64::consts::TAU;
            [(130.0 + 70.0 * a.cos()).round(), (150.0 + 90.0 * a.sin()).round()]
        })
        .collect()
}

/// 68-point landmark frames whose mean EAR reproduces `trace`.
pub fn render_landmarks(trace: &EarTrace) -> Vec<LandmarkFrame> {
    let template = face_template();
    trace
        .values
        .iter()
        .enumerate()
        .map(|(i, &ear)| {
            let mut points = template.clone();
            points[RIGHT_EYE..RIGHT_EYE + 6].copy_from_slice(&eye_points(RIGHT_EYE_CENTER, ear));
            points[LEFT_EYE..LEFT_EYE + 6].copy_from_slice(&eye_points(LEFT_EYE_CENTER, ear));
            LandmarkFrame {
                frame_index: i as u64,
                points,
            }
        })
        .collect()
}

/// SplitMix64 finalizer; spreads `(seed, index)` into independent item seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_real: usize,
    pub n_fake: usize,
    pub seed: u64,
    /// Template for videos; `fake` and `base_seed` are set per item. `None`
    /// skips video generation.
    pub video: Option<SynthVideoSpec>,
    /// Templates for real and fake blink traces; `seed` is set per item.
    /// `None` skips landmark generation.
    pub real_trace: Option<SynthTraceSpec>,
    pub fake_trace: Option<SynthTraceSpec>,
}

impl DatasetSpec {
    pub fn id_for(&self, index: usize) -> String {
        let width = (self.n_real + self.n_fake)
            .saturating_sub(1)
            .to_string()
            .len()
            .max(5);
        format!("vid{index:0width$}")
    }

    pub fn label_for(&self, index: usize) -> Label {
        if index < self.n_real {
            Label::Real
        } else {
            Label::Fake
        }
    }

    /// Video spec for item `index`.
    pub fn video_spec(&self, index: usize) -> Option<SynthVideoSpec> {
        self.video.map(|v| SynthVideoSpec {
            base_seed: derive_seed(self.seed, 2 * index as u64),
            fake: self.label_for(index).is_fake(),
            ..v
        })
    }

    /// Trace spec for item `index`.
    pub fn trace_spec(&self, index: usize) -> Option<SynthTraceSpec> {
        let template = match self.label_for(index) {
            Label::Real => self.real_trace,
            Label::Fake => self.fake_trace,
        };
        template.map(|t| SynthTraceSpec {
            seed: derive_seed(self.seed, 2 * index as u64 + 1),
            ..t
        })
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write videos, landmark files and `manifest.json` under `out_dir`.
pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.n_real == 0 || spec.n_fake == 0 {
        return Err(SynthError::InvalidSpec(
            "need at least one real and one fake item".into(),
        ));
    }
    if let Some(v) = spec.video {
        v.validate()?;
    }
    for t in [spec.real_trace, spec.fake_trace].into_iter().flatten() {
        t.validate()?;
    }
    fs::create_dir_all(out_dir)?;
    if spec.video.is_some() {
        fs::create_dir_all(out_dir.join("videos"))?;
    }
    let any_trace = spec.real_trace.is_some() || spec.fake_trace.is_some();
    if any_trace {
        fs::create_dir_all(out_dir.join("landmarks"))?;
    }

    let total = spec.n_real + spec.n_fake;
    let entries = (0..total)
        .into_par_iter()
        .map(|i| {
            let id = spec.id_for(i);
            let mut entry = ManifestEntry {
                label: spec.label_for(i),
                video: None,
                landmarks: None,
            };
            if let Some(vs) = spec.video_spec(i) {
                let rel = format!("videos/{id}.y4m");
                write_y4m(&gen_video(&vs)?, &out_dir.join(&rel))?;
                entry.video = Some(rel);
            }
            if let Some(ts) = spec.trace_spec(i) {
                let rel = format!("landmarks/{id}.jsonl");
                let frames = render_landmarks(&gen_ear_trace(&ts)?);
                let file = BufWriter::new(File::create(out_dir.join(&rel))?);
                crate::blink::write_landmarks(file, &frames)?;
                entry.landmarks = Some(rel);
            }
            Ok((id, entry))
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        entries: entries.into_iter().collect(),
    };
    let file = BufWriter::new(File::create(out_dir.join(MANIFEST_FILE))?);
    manifest.to_writer(file)?;
    Ok(manifest)
}
