//! Frame sources: a Y4M subset, directories of PNG frames and raw planar gray8.
//!
//! Everything is reduced to 8-bit luminance. Chroma planes in Y4M inputs are
//! skipped, RGB PNG pixels go through [`rgb_to_gray`].

use std::fs::File;
use std::io::{BufRead, BufReader, ErrorKind, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("stream does not start with the YUV4MPEG2 magic")]
    MissingMagic,
    #[error("required header token {0} is missing")]
    MissingRequiredToken(char),
    #[error("malformed header token `{0}`")]
    MalformedToken(String),
    #[error("unsupported input: {0}")]
    Unsupported(String),
    #[error("frame {frame} is truncated: expected {expected} bytes")]
    TruncatedFrame { frame: usize, expected: usize },
    #[error("source contains no frames")]
    EmptySource,
    #[error("frame {frame} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        frame: usize,
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("invalid frame sequence: {0}")]
    Invalid(String),
    #[error("{kind:?} sources {what} a sidecar")]
    Sidecar { kind: SourceKind, what: &'static str },
    #[error("png decode failed for {path}: {msg}")]
    Png { path: PathBuf, msg: String },
    #[error("bad sidecar: {0}")]
    SidecarParse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MediaError>;

/// Frame rate as an exact rational.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fps {
    pub num: u32,
    pub den: u32,
}

impl Fps {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(MediaError::Invalid(format!("frame rate {num}:{den}")));
        }
        Ok(Fps { num, den })
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Default for Fps {
    fn default() -> Self {
        Fps { num: 30, den: 1 }
    }
}

/// An ordered run of 8-bit grayscale frames sharing one size and frame rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSequence {
    width: u32,
    height: u32,
    fps: Fps,
    frames: Vec<Vec<u8>>,
}

impl FrameSequence {
    pub fn new(width: u32, height: u32, fps: Fps, frames: Vec<Vec<u8>>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MediaError::Invalid(format!("dimensions {width}x{height}")));
        }
        if fps.num == 0 || fps.den == 0 {
            return Err(MediaError::Invalid("zero frame rate".into()));
        }
        if frames.is_empty() {
            return Err(MediaError::EmptySource);
        }
        let plane = width as usize * height as usize;
        for (i, f) in frames.iter().enumerate() {
            if f.len() != plane {
                return Err(MediaError::Invalid(format!(
                    "frame {i} has {} samples, expected {plane}",
                    f.len()
                )));
            }
        }
        Ok(FrameSequence {
            width,
            height,
            fps,
            frames,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn fps(&self) -> Fps {
        self.fps
    }

    pub fn frames(&self) -> &[Vec<u8>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn plane_size(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Y4m,
    PngDir,
    RawGray,
}

/// Header record accompanying a raw gray8 file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSidecar {
    pub width: u32,
    pub height: u32,
    pub fps_num: u32,
    pub fps_den: u32,
}

impl RawSidecar {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceDescriptor {
    pub kind: SourceKind,
    pub path: PathBuf,
    pub sidecar: Option<RawSidecar>,
}

impl SourceDescriptor {
    pub fn y4m(path: impl Into<PathBuf>) -> Self {
        SourceDescriptor {
            kind: SourceKind::Y4m,
            path: path.into(),
            sidecar: None,
        }
    }

    pub fn png_dir(path: impl Into<PathBuf>) -> Self {
        SourceDescriptor {
            kind: SourceKind::PngDir,
            path: path.into(),
            sidecar: None,
        }
    }

    pub fn raw_gray(path: impl Into<PathBuf>, sidecar: RawSidecar) -> Self {
        SourceDescriptor {
            kind: SourceKind::RawGray,
            path: path.into(),
            sidecar: Some(sidecar),
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.kind, self.sidecar.is_some()) {
            (SourceKind::RawGray, false) => Err(MediaError::Sidecar {
                kind: self.kind,
                what: "require",
            }),
            (SourceKind::Y4m | SourceKind::PngDir, true) => Err(MediaError::Sidecar {
                kind: self.kind,
                what: "must not carry",
            }),
            _ => Ok(()),
        }
    }
}

/// BT.601 luma, rounded half away from zero.
pub fn rgb_to_gray(r: u8, g: u8, b: u8) -> u8 {
    let y = 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    y.round().clamp(0.0, 255.0) as u8
}

/// Chroma layout of a Y4M stream, restricted to what we can decode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Chroma {
    C420,
    C444,
    Mono,
}

impl Chroma {
    /// Bytes of chroma following the luma plane in each frame.
    pub fn chroma_bytes(self, width: u32, height: u32) -> usize {
        let (w, h) = (width as usize, height as usize);
        match self {
            Chroma::C420 => 2 * w.div_ceil(2) * h.div_ceil(2),
            Chroma::C444 => 2 * w * h,
            Chroma::Mono => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Y4mHeader {
    pub width: u32,
    pub height: u32,
    pub fps_num: u32,
    pub fps_den: u32,
    /// Colorspace tag without the leading `C`, e.g. `420jpeg`.
    pub colorspace: String,
}

impl Y4mHeader {
    pub fn chroma(&self) -> Result<Chroma> {
        match self.colorspace.as_str() {
            "420" | "420jpeg" | "420paldv" | "420mpeg2" => Ok(Chroma::C420),
            "444" => Ok(Chroma::C444),
            "mono" => Ok(Chroma::Mono),
            other => Err(MediaError::Unsupported(format!("colorspace C{other}"))),
        }
    }

    pub fn colorspace_tag(&self) -> String {
        format!("C{}", self.colorspace)
    }
}

const Y4M_MAGIC: &[u8] = b"YUV4MPEG2";

/// Parse the header line at the start of a Y4M stream. Anything after the
/// first newline is ignored.
pub fn parse_y4m_header(bytes: &[u8]) -> Result<Y4mHeader> {
    let line = bytes.split(|&b| b == b'\n').next().unwrap_or(bytes);
    let text = std::str::from_utf8(line).map_err(|_| MediaError::MissingMagic)?;
    let mut tokens = text.split(' ').filter(|t| !t.is_empty());
    if tokens.next().map(str::as_bytes) != Some(Y4M_MAGIC) {
        return Err(MediaError::MissingMagic);
    }

    let (mut width, mut height, mut fps) = (None, None, None);
    let mut colorspace = String::from("420");
    for tok in tokens {
        let (tag, value) = tok.split_at(1);
        let malformed = || MediaError::MalformedToken(tok.to_string());
        match tag {
            "W" => width = Some(value.parse::<u32>().map_err(|_| malformed())?),
            "H" => height = Some(value.parse::<u32>().map_err(|_| malformed())?),
            "F" => {
                let (n, d) = value.split_once(':').ok_or_else(malformed)?;
                let n = n.parse::<u32>().map_err(|_| malformed())?;
                let d = d.parse::<u32>().map_err(|_| malformed())?;
                fps = Some((n, d));
            }
            "I" => match value {
                "p" | "?" => {}
                "t" | "b" | "m" => {
                    return Err(MediaError::Unsupported(format!("interlacing {tok}")));
                }
                _ => return Err(malformed()),
            },
            "C" => {
                if value.is_empty() {
                    return Err(malformed());
                }
                colorspace = value.to_string();
            }
            "A" | "X" => {}
            _ => return Err(malformed()),
        }
    }

    let width = width.ok_or(MediaError::MissingRequiredToken('W'))?;
    let height = height.ok_or(MediaError::MissingRequiredToken('H'))?;
    let (fps_num, fps_den) = fps.ok_or(MediaError::MissingRequiredToken('F'))?;
    if width == 0 || height == 0 {
        return Err(MediaError::MalformedToken(format!("W{width} H{height}")));
    }
    if fps_num == 0 || fps_den == 0 {
        return Err(MediaError::MalformedToken(format!("F{fps_num}:{fps_den}")));
    }
    Ok(Y4mHeader {
        width,
        height,
        fps_num,
        fps_den,
        colorspace,
    })
}

pub fn read_frames(src: &SourceDescriptor) -> Result<FrameSequence> {
    src.validate()?;
    match src.kind {
        SourceKind::Y4m => read_y4m(BufReader::new(File::open(&src.path)?)),
        SourceKind::PngDir => read_png_dir(&src.path),
        SourceKind::RawGray => {
            let sidecar = src.sidecar.expect("validated above");
            read_raw_gray(BufReader::new(File::open(&src.path)?), sidecar)
        }
    }
}

/// Decode a Y4M stream keeping only the luma plane of each frame.
pub fn read_y4m<R: BufRead>(mut reader: R) -> Result<FrameSequence> {
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if !line.ends_with(b"\n") {
        // A header without its newline is either empty or cut short.
        if !line.starts_with(Y4M_MAGIC) {
            return Err(MediaError::MissingMagic);
        }
    }
    let header = parse_y4m_header(&line)?;
    let chroma = header.chroma()?;
    let plane = header.width as usize * header.height as usize;
    let mut skip = vec![0u8; chroma.chroma_bytes(header.width, header.height)];

    let mut frames = Vec::new();
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        if !line.starts_with(b"FRAME") || !line.ends_with(b"\n") {
            return Err(MediaError::TruncatedFrame {
                frame: frames.len(),
                expected: plane + skip.len(),
            });
        }
        let mut luma = vec![0u8; plane];
        let expected = plane + skip.len();
        let truncated = |e: std::io::Error| match e.kind() {
            ErrorKind::UnexpectedEof => MediaError::TruncatedFrame {
                frame: frames.len(),
                expected,
            },
            _ => MediaError::Io(e),
        };
        reader.read_exact(&mut luma).map_err(truncated)?;
        reader.read_exact(&mut skip).map_err(truncated)?;
        frames.push(luma);
    }

    FrameSequence::new(
        header.width,
        header.height,
        Fps::new(header.fps_num, header.fps_den)?,
        frames,
    )
}

pub fn read_raw_gray<R: Read>(mut reader: R, sidecar: RawSidecar) -> Result<FrameSequence> {
    let fps = Fps::new(sidecar.fps_num, sidecar.fps_den)?;
    if sidecar.width == 0 || sidecar.height == 0 {
        return Err(MediaError::Invalid(format!(
            "dimensions {}x{}",
            sidecar.width, sidecar.height
        )));
    }
    let plane = sidecar.width as usize * sidecar.height as usize;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.is_empty() {
        return Err(MediaError::EmptySource);
    }
    if bytes.len() % plane != 0 {
        return Err(MediaError::TruncatedFrame {
            frame: bytes.len() / plane,
            expected: plane,
        });
    }
    let frames = bytes.chunks_exact(plane).map(<[u8]>::to_vec).collect();
    FrameSequence::new(sidecar.width, sidecar.height, fps, frames)
}

/// Frame rate assumed for PNG directories, which carry no timing.
pub const PNG_DIR_FPS: Fps = Fps { num: 30, den: 1 };

fn read_png_dir(dir: &Path) -> Result<FrameSequence> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();

    let mut frames = Vec::with_capacity(paths.len());
    let mut dims = None;
    for (i, path) in paths.iter().enumerate() {
        let (w, h, luma) = decode_png_gray(path)?;
        match dims {
            None => dims = Some((w, h)),
            Some((want_w, want_h)) if (want_w, want_h) != (w, h) => {
                return Err(MediaError::DimensionMismatch {
                    frame: i,
                    want_w,
                    want_h,
                    got_w: w,
                    got_h: h,
                });
            }
            _ => {}
        }
        frames.push(luma);
    }
    let (w, h) = dims.ok_or(MediaError::EmptySource)?;
    FrameSequence::new(w, h, PNG_DIR_FPS, frames)
}

/// Decode an 8-bit, non-interlaced gray or RGB PNG to luminance.
pub fn decode_png_gray(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let png_err = |msg: String| MediaError::Png {
        path: path.to_path_buf(),
        msg,
    };
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let info = reader.info();
    if info.interlaced {
        return Err(png_err("interlaced images are not supported".into()));
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!("bit depth {:?}", info.bit_depth)));
    }
    let color = info.color_type;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| png_err(e.to_string()))?;
    let (w, h) = (frame.width, frame.height);
    let data = &buf[..frame.buffer_size()];
    let row_bytes = frame.line_size;
    let luma = match color {
        png::ColorType::Grayscale => data
            .chunks_exact(row_bytes)
            .flat_map(|row| row[..w as usize].iter().copied())
            .collect(),
        png::ColorType::Rgb => data
            .chunks_exact(row_bytes)
            .flat_map(|row| {
                row[..3 * w as usize]
                    .chunks_exact(3)
                    .map(|px| rgb_to_gray(px[0], px[1], px[2]))
            })
            .collect(),
        other => return Err(png_err(format!("color type {other:?}"))),
    };
    Ok((w, h, luma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn header_with_all_tokens() {
        let h = parse_y4m_header(b"YUV4MPEG2 W4 H4 F30:1 Ip A1:1 C420\n").unwrap();
        assert_eq!((h.width, h.height, h.fps_num, h.fps_den), (4, 4, 30, 1));
        assert_eq!(h.colorspace_tag(), "C420");
    }

    #[test]
    fn header_defaults_colorspace() {
        let h = parse_y4m_header(b"YUV4MPEG2 W2 H2 F1:1").unwrap();
        assert_eq!((h.width, h.height, h.fps_num, h.fps_den), (2, 2, 1, 1));
        assert_eq!(h.colorspace_tag(), "C420");
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            parse_y4m_header(b"AVI W2 H2 F1:1"),
            Err(MediaError::MissingMagic)
        ));
        assert!(matches!(
            parse_y4m_header(b"YUV4MPEG2 H2 F1:1"),
            Err(MediaError::MissingRequiredToken('W'))
        ));
        assert!(matches!(
            parse_y4m_header(b"YUV4MPEG2 W2 F1:1"),
            Err(MediaError::MissingRequiredToken('H'))
        ));
        assert!(matches!(
            parse_y4m_header(b"YUV4MPEG2 W2 H2"),
            Err(MediaError::MissingRequiredToken('F'))
        ));
        assert!(matches!(
            parse_y4m_header(b"YUV4MPEG2 Wx H2 F1:1"),
            Err(MediaError::MalformedToken(_))
        ));
        assert!(matches!(
            parse_y4m_header(b"YUV4MPEG2 W2 H2 F30"),
            Err(MediaError::MalformedToken(_))
        ));
        assert!(matches!(
            parse_y4m_header(b"YUV4MPEG2 W2 H2 F30:1 It"),
            Err(MediaError::Unsupported(_))
        ));
    }

    #[test]
    fn luma_weights() {
        assert_eq!(rgb_to_gray(255, 255, 255), 255);
        assert_eq!(rgb_to_gray(0, 0, 0), 0);
        assert_eq!(rgb_to_gray(255, 0, 0), 76);
        for v in 0..=255u8 {
            assert_eq!(rgb_to_gray(v, v, v), v);
        }
    }

    #[test]
    fn y4m_keeps_luma_and_skips_chroma() {
        let mut bytes = b"YUV4MPEG2 W2 H2 F25:1 C420jpeg\n".to_vec();
        for f in 0..3u8 {
            bytes.extend_from_slice(b"FRAME\n");
            bytes.extend_from_slice(&[f, f + 1, f + 2, f + 3]);
            bytes.extend_from_slice(&[128, 128]);
        }
        let seq = read_y4m(Cursor::new(bytes)).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.frames()[2], vec![2, 3, 4, 5]);
        assert_eq!(seq.fps(), Fps { num: 25, den: 1 });
    }

    #[test]
    fn y4m_mono_and_444() {
        let mut mono = b"YUV4MPEG2 W2 H1 F1:1 Cmono\nFRAME\n".to_vec();
        mono.extend_from_slice(&[9, 8]);
        assert_eq!(read_y4m(Cursor::new(mono)).unwrap().frames()[0], [9, 8]);

        let mut full = b"YUV4MPEG2 W1 H1 F1:1 C444\nFRAME\n".to_vec();
        full.extend_from_slice(&[7, 1, 2]);
        assert_eq!(read_y4m(Cursor::new(full)).unwrap().frames()[0], [7]);
    }

    #[test]
    fn y4m_truncated_and_empty() {
        let mut bytes = b"YUV4MPEG2 W2 H2 F1:1\nFRAME\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 128]);
        assert!(matches!(
            read_y4m(Cursor::new(bytes)),
            Err(MediaError::TruncatedFrame { frame: 0, .. })
        ));
        let empty = b"YUV4MPEG2 W2 H2 F1:1\n".to_vec();
        assert!(matches!(
            read_y4m(Cursor::new(empty)),
            Err(MediaError::EmptySource)
        ));
    }

    #[test]
    fn raw_gray_size_arithmetic() {
        let side = RawSidecar {
            width: 2,
            height: 2,
            fps_num: 30,
            fps_den: 1,
        };
        let seq = read_raw_gray(Cursor::new(vec![0u8; 8]), side).unwrap();
        assert_eq!(seq.len(), 2);
        assert!(matches!(
            read_raw_gray(Cursor::new(vec![0u8; 7]), side),
            Err(MediaError::TruncatedFrame { .. })
        ));
        assert!(matches!(
            read_raw_gray(Cursor::new(Vec::new()), side),
            Err(MediaError::EmptySource)
        ));
    }

    #[test]
    fn sidecar_rules() {
        let side = RawSidecar {
            width: 1,
            height: 1,
            fps_num: 1,
            fps_den: 1,
        };
        let mut src = SourceDescriptor::y4m("x.y4m");
        src.sidecar = Some(side);
        assert!(matches!(read_frames(&src), Err(MediaError::Sidecar { .. })));
        let src = SourceDescriptor {
            kind: SourceKind::RawGray,
            path: "x.raw".into(),
            sidecar: None,
        };
        assert!(matches!(read_frames(&src), Err(MediaError::Sidecar { .. })));
    }

    #[test]
    fn frame_sequence_rejects_bad_frames() {
        assert!(matches!(
            FrameSequence::new(2, 2, Fps::default(), vec![]),
            Err(MediaError::EmptySource)
        ));
        assert!(FrameSequence::new(2, 2, Fps::default(), vec![vec![0; 3]]).is_err());
    }
}
