//! Per-frame grayscale histograms and the fixed-length per-video sequence fed
//! to the recurrent classifier.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::FrameSequence;

pub const BINS: usize = 256;
/// Histograms per video.
pub const SEQ_LEN: usize = 300;
/// Histograms per recurrent chunk.
pub const CHUNK_LEN: usize = 10;

const FHS_MAGIC: &[u8; 4] = b"FHS1";

#[derive(Debug, Error)]
pub enum HistogramError {
    #[error("frame has no samples")]
    EmptyFrame,
    #[error("histogram has zero total mass")]
    ZeroMass,
    #[error("video has no frames")]
    EmptySource,
    #[error("sequence length {len} is not a multiple of chunk length {chunk}")]
    Unchunkable { len: usize, chunk: usize },
    #[error("malformed histogram file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HistogramError>;

/// Raw per-value sample counts of one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawHistogram(pub [u64; BINS]);

impl RawHistogram {
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

/// L1-normalized histogram (a probability vector over luminance values).
pub type NormHistogram = [f64; BINS];

pub fn frame_histogram(frame: &[u8]) -> Result<RawHistogram> {
    if frame.is_empty() {
        return Err(HistogramError::EmptyFrame);
    }
    let mut bins = [0u64; BINS];
    for &v in frame {
        bins[v as usize] += 1;
    }
    Ok(RawHistogram(bins))
}

pub fn normalize_histogram(h: &RawHistogram) -> Result<NormHistogram> {
    let total = h.total();
    if total == 0 {
        return Err(HistogramError::ZeroMass);
    }
    let total = total as f64;
    let mut out = [0.0; BINS];
    for (o, &c) in out.iter_mut().zip(h.0.iter()) {
        *o = c as f64 / total;
    }
    Ok(out)
}

/// Fixed-length sequence of normalized histograms for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramSequence {
    pub video_id: String,
    pub rows: Vec<NormHistogram>,
}

/// Index of the source frame feeding output row `i` of `target_len`, for a
/// video of `n_frames` frames. Short videos repeat their last frame.
pub fn source_frame_index(i: usize, n_frames: usize, target_len: usize) -> usize {
    if n_frames >= target_len {
        // i < target_len, so the product fits comfortably for any real video.
        ((i as u128 * n_frames as u128) / target_len as u128) as usize
    } else {
        i.min(n_frames - 1)
    }
}

pub fn build_histogram_sequence(
    video_id: &str,
    video: &FrameSequence,
    target_len: usize,
) -> Result<HistogramSequence> {
    let n = video.len();
    if n == 0 {
        return Err(HistogramError::EmptySource);
    }
    let mut rows: Vec<NormHistogram> = Vec::with_capacity(target_len);
    let mut last: Option<(usize, NormHistogram)> = None;
    for i in 0..target_len {
        let src = source_frame_index(i, n, target_len);
        let row = match last {
            Some((idx, row)) if idx == src => row,
            _ => normalize_histogram(&frame_histogram(&video.frames()[src])?)?,
        };
        last = Some((src, row));
        rows.push(row);
    }
    Ok(HistogramSequence {
        video_id: video_id.to_string(),
        rows,
    })
}

impl HistogramSequence {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows laid out contiguously, `len() * BINS` values.
    pub fn flat(&self) -> &[f64] {
        self.rows.as_flattened()
    }

    pub fn chunks(&self, chunk_len: usize) -> Result<Vec<&[NormHistogram]>> {
        chunk_sequence(&self.rows, chunk_len)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        let doc = SequenceJson {
            video_id: self.video_id.clone(),
            rows: self.rows.iter().map(|r| r.to_vec()).collect(),
        };
        serde_json::to_writer(w, &doc)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let doc: SequenceJson = serde_json::from_reader(r)?;
        let rows = doc
            .rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                <NormHistogram>::try_from(r.as_slice()).map_err(|_| {
                    HistogramError::Format(format!("row {i} has {} bins", r.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HistogramSequence {
            video_id: doc.video_id,
            rows,
        })
    }

    /// Compact binary form: `FHS1`, u32 rows, u32 bins, then little-endian f64s.
    pub fn write_fhs<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.rows.len() * BINS * 8);
        buf.extend_from_slice(FHS_MAGIC);
        buf.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(BINS as u32).to_le_bytes());
        for v in self.flat() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// The binary form has no id field, so the caller supplies it.
    pub fn read_fhs<R: Read>(mut r: R, video_id: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..4] != FHS_MAGIC {
            return Err(HistogramError::Format("missing FHS1 magic".into()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let bins = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bins != BINS {
            return Err(HistogramError::Format(format!("{bins} bins, expected {BINS}")));
        }
        let body = &bytes[12..];
        if body.len() != rows * BINS * 8 {
            return Err(HistogramError::Format(format!(
                "payload is {} bytes, header implies {}",
                body.len(),
                rows * BINS * 8
            )));
        }
        let mut out = Vec::with_capacity(rows);
        for row_bytes in body.chunks_exact(BINS * 8) {
            let mut row = [0.0; BINS];
            for (v, b) in row.iter_mut().zip(row_bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(b.try_into().unwrap());
            }
            out.push(row);
        }
        Ok(HistogramSequence {
            video_id: video_id.to_string(),
            rows: out,
        })
    }

    /// Load either format, chosen by extension (`.json`, otherwise FHS1).
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        if path.extension().is_some_and(|e| e == "json") {
            Self::read_json(file)
        } else {
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Self::read_fhs(file, &id)
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceJson {
    video_id: String,
    rows: Vec<Vec<f64>>,
}

/// Split rows into consecutive windows of `chunk_len`; chunk `k` holds rows
/// `k*chunk_len .. (k+1)*chunk_len`.
pub fn chunk_sequence<T>(rows: &[T], chunk_len: usize) -> Result<Vec<&[T]>> {
    if chunk_len == 0 || rows.len() % chunk_len != 0 {
        return Err(HistogramError::Unchunkable {
            len: rows.len(),
            chunk: chunk_len,
        });
    }
    Ok(rows.chunks_exact(chunk_len).collect())
}

/// Mean of normalized histograms over all rows.
pub fn mean_histogram(rows: &[NormHistogram]) -> NormHistogram {
    let mut out = [0.0; BINS];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Expected luminance under a normalized histogram.
pub fn histogram_mean_value(h: &NormHistogram) -> f64 {
    h.iter().enumerate().map(|(v, p)| v as f64 * p).sum()
}
