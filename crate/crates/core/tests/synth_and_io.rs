use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use dfdetect::blink::{self, parse_landmarks, BlinkParams, BlinkReport};
use dfdetect::eval::{self, EvalReport, Manifest, Prediction};
use dfdetect::histogram::{
    build_histogram_sequence, histogram_mean_value, mean_histogram, HistogramSequence, SEQ_LEN,
};
use dfdetect::media::{self, read_frames, MediaError, RawSidecar, SourceDescriptor};
use dfdetect::pipeline::{self, HistFormat};
use dfdetect::synth::{
    gen_dataset, gen_ear_trace, gen_video, render_landmarks, write_y4m, DatasetSpec,
    SynthTraceSpec, SynthVideoSpec, MANIFEST_FILE,
};
use dfdetect::Label;

fn video(fake: bool, seed: u64) -> SynthVideoSpec {
    SynthVideoSpec {
        width: 32,
        height: 32,
        n_frames: 40,
        base_seed: seed,
        fake,
        ..SynthVideoSpec::default()
    }
}

fn mean_hist(spec: &SynthVideoSpec) -> [f64; 256] {
    let seq = build_histogram_sequence("v", &gen_video(spec).unwrap(), SEQ_LEN).unwrap();
    mean_histogram(&seq.rows)
}

fn l1(a: &[f64; 256], b: &[f64; 256]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[test]
fn gamma_below_one_brightens_every_pair() {
    for seed in 0..8 {
        let fake = SynthVideoSpec {
            checker_amp: 0,
            ..video(true, seed)
        };
        let real = histogram_mean_value(&mean_hist(&fake.real_twin()));
        let shifted = histogram_mean_value(&mean_hist(&fake));
        assert!(shifted > real, "seed {seed}: {shifted} <= {real}");
    }
}

#[test]
fn detectability_grows_with_manipulation_strength() {
    for seed in 1..=4 {
        let full = SynthVideoSpec {
            base_seed: seed,
            fake: true,
            ..SynthVideoSpec::default()
        };
        let real = mean_hist(&full.real_twin());
        let mut last = -1.0;
        for gamma in [1.0, 0.97, 0.93, 0.9, 0.8, 0.6] {
            let d = l1(&mean_hist(&SynthVideoSpec { gamma, checker_amp: 0, ..full }), &real);
            assert!(d >= last, "seed {seed} gamma {gamma}: {d} < {last}");
            last = d;
        }
        // Single-step amplitude changes sit inside the sampling roughness of
        // one video's histogram; the trend shows on a 4x grid.
        let mut last = -1.0;
        for amp in [0u8, 2, 8, 32] {
            let d = l1(&mean_hist(&SynthVideoSpec { gamma: 1.0, checker_amp: amp, ..full }), &real);
            assert!(d >= last, "seed {seed} amp {amp}: {d} < {last}");
            last = d;
        }
    }
}

#[test]
fn y4m_file_size_follows_plane_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = video(true, 4);
    let seq = gen_video(&spec).unwrap();
    let path = dir.path().join("v.y4m");
    write_y4m(&seq, &path).unwrap();
    let header = "YUV4MPEG2 W32 H32 F30:1 Ip A1:1 C420\n".len();
    let per_frame = "FRAME\n".len() + 32 * 32 * 3 / 2;
    assert_eq!(
        fs::metadata(&path).unwrap().len() as usize,
        header + 40 * per_frame
    );
    let back = read_frames(&SourceDescriptor::y4m(&path)).unwrap();
    assert_eq!(back, seq);
    let hdr = media::parse_y4m_header(&fs::read(&path).unwrap()).unwrap();
    assert_eq!((hdr.width, hdr.height, hdr.fps_num, hdr.fps_den), (32, 32, 30, 1));
    assert_eq!(hdr.colorspace_tag(), "C420");
}

#[test]
fn rendered_landmarks_reproduce_the_trace() {
    let spec = SynthTraceSpec {
        seed: 17,
        ..SynthTraceSpec::default()
    };
    let trace = gen_ear_trace(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.jsonl");
    blink::write_landmarks(BufWriter::new(File::create(&path).unwrap()), &render_landmarks(&trace))
        .unwrap();
    let parsed = parse_landmarks(&path).unwrap();
    let back = blink::ear_trace(&parsed, spec.fps).unwrap();
    assert_eq!(back.values.len(), trace.values.len());
    for (a, b) in back.values.iter().zip(&trace.values) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn zero_rate_trace_has_no_blinks() {
    let spec = SynthTraceSpec {
        blink_rate_per_10s: 0.0,
        seed: 3,
        ..SynthTraceSpec::default()
    };
    let trace = gen_ear_trace(&spec).unwrap();
    assert!(blink::detect_blinks(&trace.values, BlinkParams::default())
        .unwrap()
        .is_empty());
}

fn small_dataset(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_real: 4,
        n_fake: 3,
        seed,
        video: Some(SynthVideoSpec {
            width: 16,
            height: 12,
            n_frames: 20,
            ..SynthVideoSpec::default()
        }),
        real_trace: Some(SynthTraceSpec {
            duration_s: 5.0,
            ..SynthTraceSpec::default()
        }),
        fake_trace: Some(SynthTraceSpec {
            duration_s: 5.0,
            blink_rate_per_10s: 2.2,
            ..SynthTraceSpec::default()
        }),
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_generation_is_deterministic_and_consistent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = small_dataset(5);
    let manifest = gen_dataset(&spec, a.path()).unwrap();
    gen_dataset(&spec, b.path()).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));

    assert_eq!(manifest.len(), 7);
    let fakes = manifest.entries.values().filter(|e| e.label == Label::Fake).count();
    assert_eq!(fakes, 3);
    let manifest_path = a.path().join(MANIFEST_FILE);
    assert_eq!(Manifest::load(&manifest_path).unwrap(), manifest);
    for (id, e) in &manifest.entries {
        assert!(id.starts_with("vid") && id.len() == 8, "{id}");
        for rel in [&e.video, &e.landmarks] {
            assert!(Manifest::resolve(&manifest_path, rel.as_ref().unwrap()).is_file());
        }
    }

    let c = tempfile::tempdir().unwrap();
    gen_dataset(&small_dataset(6), c.path()).unwrap();
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn pipeline_extracts_features_for_every_video() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(&small_dataset(8), &dir.path().join("ds")).unwrap();
    let mpath = dir.path().join("ds").join(MANIFEST_FILE);
    let ids: Vec<String> = manifest.entries.keys().cloned().collect();

    for format in [HistFormat::Fhs, HistFormat::Json] {
        let out = dir.path().join(format!("h_{}", format.extension()));
        let summary = pipeline::extract_histograms(&mpath, &manifest, &out, format).unwrap();
        assert_eq!(summary.written.len(), 7);
        assert!(summary.failures.is_empty());
        let seqs = pipeline::load_histograms(&out, &ids).unwrap();
        for (s, id) in seqs.iter().zip(&ids) {
            assert_eq!(&s.video_id, id);
            assert_eq!(s.rows.len(), SEQ_LEN);
        }
    }
    let fhs = pipeline::load_histograms(&dir.path().join("h_fhs"), &ids).unwrap();
    let json = pipeline::load_histograms(&dir.path().join("h_json"), &ids).unwrap();
    assert_eq!(fhs, json);

    let out = dir.path().join("blinks");
    let summary =
        pipeline::extract_blinks(&mpath, &manifest, &out, 30.0, BlinkParams::default()).unwrap();
    assert_eq!(summary.written.len(), 7);
    let reports = pipeline::load_blink_reports(&out, &ids).unwrap();
    assert!(reports.iter().all(|r| r.params == BlinkParams::default()));
    let reloaded = BlinkReport::load(&summary.written[0]).unwrap();
    assert_eq!(reloaded, reports[0]);
}

#[test]
fn missing_video_is_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(&small_dataset(2), dir.path()).unwrap();
    let mpath = dir.path().join(MANIFEST_FILE);
    fs::remove_file(dir.path().join("videos/vid00001.y4m")).unwrap();
    let summary =
        pipeline::extract_histograms(&mpath, &manifest, &dir.path().join("h"), HistFormat::Fhs)
            .unwrap();
    assert_eq!(summary.written.len(), 6);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].0, "vid00001");
}

#[test]
fn histogram_files_round_trip() {
    let seq = build_histogram_sequence("abc", &gen_video(&video(true, 1)).unwrap(), SEQ_LEN).unwrap();
    let mut fhs = Vec::new();
    seq.write_fhs(&mut fhs).unwrap();
    assert_eq!(&fhs[..4], b"FHS1");
    assert_eq!(fhs.len(), 12 + SEQ_LEN * 256 * 8);
    assert_eq!(HistogramSequence::read_fhs(fhs.as_slice(), "abc").unwrap(), seq);
    let mut json = Vec::new();
    seq.write_json(&mut json).unwrap();
    assert_eq!(HistogramSequence::read_json(json.as_slice()).unwrap(), seq);
}

#[test]
fn report_round_trip_keeps_full_precision() {
    let preds = vec![
        Prediction::labeled("a", 0.8, Label::Fake),
        Prediction::labeled("b", 0.1, Label::Real),
        Prediction::labeled("c", 0.5, Label::Real),
    ];
    let mut report = EvalReport::from_predictions("m", &preds).unwrap();
    report.log_loss = 0.19207;
    let mut bytes = Vec::new();
    eval::write_report(&report, &mut bytes).unwrap();
    let back = eval::read_report(bytes.as_slice()).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.log_loss.to_bits(), 0.19207f64.to_bits());

    let extra = String::from_utf8(bytes.clone()).unwrap().replacen('{', "{\"bogus\": 1,", 1);
    assert!(eval::read_report(extra.as_bytes()).is_err());
    let broken = String::from_utf8(bytes).unwrap().replace("\"tp\": 1", "\"tp\": 5");
    assert!(matches!(
        eval::read_report(broken.as_bytes()),
        Err(eval::EvalError::MalformedReport(_))
    ));
}

fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, data: &[u8]) {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path).unwrap()), w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header().unwrap().write_image_data(data).unwrap();
}

#[test]
fn png_directory_reads_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("b.png"), 2, 2, png::ColorType::Grayscale, &[1, 2, 3, 4]);
    write_png(&dir.path().join("a.png"), 2, 2, png::ColorType::Rgb, &[255; 12]);
    let seq = read_frames(&SourceDescriptor::png_dir(dir.path())).unwrap();
    assert_eq!(seq.len(), 2);
    assert_eq!(seq.frames()[0], vec![255; 4]);
    assert_eq!(seq.frames()[1], vec![1, 2, 3, 4]);
    assert_eq!(seq.fps(), media::PNG_DIR_FPS);

    write_png(&dir.path().join("c.png"), 3, 1, png::ColorType::Grayscale, &[0; 3]);
    assert!(matches!(
        read_frames(&SourceDescriptor::png_dir(dir.path())),
        Err(MediaError::DimensionMismatch { .. })
    ));
}

#[test]
fn empty_png_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        read_frames(&SourceDescriptor::png_dir(dir.path())),
        Err(MediaError::EmptySource)
    ));
}

#[test]
fn raw_gray_needs_whole_frames() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.gray");
    fs::write(&path, [7u8; 2 * 3 * 2]).unwrap();
    fs::write(
        dir.path().join("clip.gray.json"),
        r#"{"width": 2, "height": 3, "fps_num": 25, "fps_den": 1}"#,
    )
    .unwrap();
    let src = pipeline::source_for(&path).unwrap();
    let seq = read_frames(&src).unwrap();
    assert_eq!((seq.len(), seq.fps().num), (2, 25));

    fs::write(&path, [7u8; 2 * 3 * 2 + 1]).unwrap();
    assert!(matches!(
        read_frames(&src),
        Err(MediaError::TruncatedFrame { .. })
    ));
    let sidecar = RawSidecar {
        width: 2,
        height: 3,
        fps_num: 25,
        fps_den: 1,
    };
    assert!(matches!(
        media::read_raw_gray([1u8; 5].as_slice(), sidecar),
        Err(MediaError::TruncatedFrame { .. })
    ));
}
