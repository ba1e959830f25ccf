//! Frame-sequence ingestion and synthetic motion clips.
//!
//! A dataset on disk is one directory per sequence, each containing
//! `frame_<k>.png` files (8-bit RGB or grayscale). Scanning is deterministic:
//! sequences sort lexicographically, frames sort by filename, and the
//! train/val/test partition is a seeded shuffle of sequence ids. Sequences
//! longer than the configured segment length contribute one record per
//! stride-1 sliding window.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fractions of the sequence pool assigned to train/val/test.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.60, 0.20, 0.20);

/// A T-frame clip of `C×H×W` images in `[0,1]`; the unit of training and inference.
#[derive(Debug, Clone)]
pub struct VideoSegment {
    /// Frames shaped `[T, C, H, W]`, values in `[0, 1]`.
    pub frames: Array4<f32>,
    /// Identifier of the originating sequence (plus window offset, when sliced).
    pub source_id: String,
    /// Original frame positions within the source sequence.
    pub frame_indices: Vec<usize>,
}

impl VideoSegment {
    /// Build a segment, enforcing the type invariants: `T ≥ 3`, `C ∈ {1,3}`,
    /// all values finite and in `[0,1]`.
    pub fn new(frames: Array4<f32>, source_id: String, frame_indices: Vec<usize>) -> Result<Self> {
        let (t, c, _h, _w) = frames.dim();
        if t < 3 {
            return Err(Error::Data(format!(
                "segment {source_id}: needs T >= 3 frames, got {t}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::Data(format!(
                "segment {source_id}: channels must be 1 or 3, got {c}"
            )));
        }
        if frame_indices.len() != t {
            return Err(Error::Data(format!(
                "segment {source_id}: {} frame indices for {t} frames",
                frame_indices.len()
            )));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Data(format!(
                "segment {source_id}: pixel value {v} outside [0,1]"
            )));
        }
        Ok(Self {
            frames,
            source_id,
            frame_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.dim().1
    }

    pub fn height(&self) -> usize {
        self.frames.dim().2
    }

    pub fn width(&self) -> usize {
        self.frames.dim().3
    }
}

/// Dataset split selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Where a dataset lives and how segments are extracted from it.
#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    /// Frames per segment (windows of this length are extracted).
    pub segment_length: usize,
    /// Target (height, width) after bilinear resize.
    pub resize_to: (usize, usize),
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
    pub split: Split,
    /// Train/val/test fractions; must sum to 1.
    pub split_fractions: (f64, f64, f64),
    /// Seed for the split-assignment shuffle.
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(root_path: impl Into<PathBuf>) -> Self {
        Self {
            root_path: root_path.into(),
            segment_length: 7,
            resize_to: (64, 64),
            channels: 3,
            split: Split::Train,
            split_fractions: SPLIT_FRACTIONS,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_length < 3 {
            return Err(Error::Config(format!(
                "segment_length must be >= 3, got {}",
                self.segment_length
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.resize_to.0 == 0 || self.resize_to.1 == 0 {
            return Err(Error::Config("resize_to dimensions must be nonzero".into()));
        }
        let (a, b, c) = self.split_fractions;
        if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
            return Err(Error::Config(format!(
                "split fractions must be nonnegative and sum to 1, got ({a}, {b}, {c})"
            )));
        }
        Ok(())
    }
}

/// One extractable segment: a sequence id and the frame files backing it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceRecord {
    /// `<sequence>#<start>` for sliding windows, `<sequence>` when exact-length.
    pub sequence_id: String,
    /// Paths of the window's frames, in temporal order.
    pub frame_paths: Vec<PathBuf>,
    /// Position of the window's first frame within the source sequence.
    pub start_index: usize,
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()),
        Some("png") | Some("PNG")
    )
}

/// Enumerate usable segment records under `spec.root_path` for `spec.split`.
///
/// Ordering is deterministic (lexicographic by sequence directory, then frame
/// filename); split membership comes from a seeded shuffle of sequence ids, so
/// two calls with the same root and seed return identical lists. Sequences
/// shorter than `segment_length` are skipped with a warning; zero usable
/// sequences is an error.
pub fn scan_dataset(spec: &DatasetSpec) -> Result<Vec<SequenceRecord>> {
    spec.validate()?;
    if !spec.root_path.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} does not exist",
            spec.root_path.display()
        )));
    }

    let mut sequences: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let entries =
        std::fs::read_dir(&spec.root_path).map_err(|e| Error::io(&spec.root_path, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&spec.root_path, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let seq_id = entry.file_name().to_string_lossy().into_owned();
        let mut frames: Vec<PathBuf> = std::fs::read_dir(&path)
            .map_err(|e| Error::io(&path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        frames.sort();
        if frames.len() < spec.segment_length {
            log::warn!(
                "sequence {seq_id}: {} frames < segment length {}, skipping",
                frames.len(),
                spec.segment_length
            );
            continue;
        }
        sequences.insert(seq_id, frames);
    }

    if sequences.is_empty() {
        return Err(Error::Data(format!(
            "no usable sequences under {} (need >= {} frames each)",
            spec.root_path.display(),
            spec.segment_length
        )));
    }

    // Assign whole sequences to splits so windows of one clip never straddle
    // the train/test boundary.
    let mut ids: Vec<&String> = sequences.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = (n as f64 * spec.split_fractions.0).round() as usize;
    let n_val = (n as f64 * spec.split_fractions.1).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let selected: Vec<&String> = match spec.split {
        Split::Train => ids[..n_train].to_vec(),
        Split::Val => ids[n_train..n_train + n_val].to_vec(),
        Split::Test => ids[n_train + n_val..].to_vec(),
    };
    let mut selected: Vec<String> = selected.into_iter().cloned().collect();
    selected.sort();

    let mut records = Vec::new();
    for seq_id in &selected {
        let frames = &sequences[seq_id];
        let n_windows = frames.len() - spec.segment_length + 1;
        for start in 0..n_windows {
            let id = if n_windows == 1 {
                seq_id.clone()
            } else {
                format!("{seq_id}#{start}")
            };
            records.push(SequenceRecord {
                sequence_id: id,
                frame_paths: frames[start..start + spec.segment_length].to_vec(),
                start_index: start,
            });
        }
    }
    Ok(records)
}

fn decode_frame(path: &Path, spec: &DatasetSpec) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    let (th, tw) = spec.resize_to;
    let img = if img.width() as usize != tw || img.height() as usize != th {
        image::imageops::resize(
            &img,
            tw as u32,
            th as u32,
            image::imageops::FilterType::Triangle,
        )
        .into()
    } else {
        img
    };
    let mut out = Vec::with_capacity(spec.channels * th * tw);
    match spec.channels {
        1 => {
            let g = img.to_luma8();
            for y in 0..th {
                for x in 0..tw {
                    out.push(g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0);
                }
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for c in 0..3 {
                for y in 0..th {
                    for x in 0..tw {
                        out.push(rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0);
                    }
                }
            }
        }
        _ => unreachable!("validated in DatasetSpec"),
    }
    Ok(out)
}

/// Decode a record's frames into a normalized [`VideoSegment`].
///
/// Frames are resized with bilinear interpolation and scaled from 8-bit
/// integers to `[0,1]`.
pub fn load_segment(record: &SequenceRecord, spec: &DatasetSpec) -> Result<VideoSegment> {
    let t = record.frame_paths.len();
    let (h, w) = spec.resize_to;
    let mut data = Vec::with_capacity(t * spec.channels * h * w);
    for path in &record.frame_paths {
        data.extend(decode_frame(path, spec)?);
    }
    let frames = Array4::from_shape_vec((t, spec.channels, h, w), data)
        .map_err(|e| Error::Data(format!("segment {}: {e}", record.sequence_id)))?;
    let indices = (record.start_index..record.start_index + t).collect();
    VideoSegment::new(frames, record.sequence_id.clone(), indices)
}

/// Quantize one `[C,H,W]` frame slice to 8-bit and write it as a PNG.
pub fn save_frame_png(frame: ndarray::ArrayView3<'_, f32>, path: &Path) -> Result<()> {
    let (c, h, w) = frame.dim();
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(x as u32, y as u32, image::Luma([quant(frame[[0, y, x]])]));
                }
            }
            img.save(path)
                .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
        }
        3 => {
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        quant(frame[[0, y, x]]),
                        quant(frame[[1, y, x]]),
                        quant(frame[[2, y, x]]),
                    ];
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            img.save(path)
                .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
        }
        _ => Err(Error::Data(format!("cannot encode {c}-channel frame"))),
    }
}

/// Write all frames of a segment as `frame_<k>.png` under `dir`.
pub fn save_segment_png(segment: &VideoSegment, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, frame) in segment.frames.outer_iter().enumerate() {
        save_frame_png(frame, &dir.join(format!("frame_{k:02}.png")))?;
    }
    Ok(())
}

/// Background intensity of generated toy frames (8-bit).
pub const TOY_BACKGROUND: u8 = 26;
/// Foreground (moving square) intensity of generated toy frames (8-bit).
pub const TOY_FOREGROUND: u8 = 230;
/// Side length of the toy square, relative to the frame height.
const TOY_SQUARE_FRACTION: f64 = 0.4;

/// Velocities the toy generator samples from (px/frame).
const TOY_VELOCITIES: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

/// Parameters of one generated toy sequence.
#[derive(Debug, Clone, Copy)]
pub struct ToyMotion {
    /// Top-left corner of the square in frame 0 (row, col).
    pub start: (i64, i64),
    /// Constant velocity in (rows, cols) px/frame.
    pub velocity: (i64, i64),
    /// Side length of the square in pixels.
    pub side: i64,
}

fn render_toy_frame(h: usize, w: usize, top: i64, left: i64, side: i64) -> image::GrayImage {
    let mut img = image::GrayImage::from_pixel(w as u32, h as u32, image::Luma([TOY_BACKGROUND]));
    for y in top.max(0)..(top + side).min(h as i64) {
        for x in left.max(0)..(left + side).min(w as i64) {
            img.put_pixel(x as u32, y as u32, image::Luma([TOY_FOREGROUND]));
        }
    }
    img
}

/// Generate `n_sequences` directories of `t` grayscale frames each, depicting
/// a bright square translating with a constant per-sequence velocity over a
/// dark background. Motion is linear with integer velocity and the square
/// stays in-bounds, so every intermediate frame equals its predecessor
/// shifted by the velocity. Deterministic under `seed`.
pub fn make_toy_dataset(
    out_path: &Path,
    n_sequences: usize,
    t: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<ToyMotion>> {
    if t < 3 {
        return Err(Error::Config(format!("toy dataset needs T >= 3, got {t}")));
    }
    let side = (((h.min(w)) as f64 * TOY_SQUARE_FRACTION).round() as i64).max(2);
    std::fs::create_dir_all(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut motions = Vec::with_capacity(n_sequences);
    for s in 0..n_sequences {
        use rand::Rng;
        let velocity = TOY_VELOCITIES[rng.gen_range(0..TOY_VELOCITIES.len())];
        // Start positions keeping the square in-bounds across all T frames.
        let travel = (t as i64 - 1) * velocity.0.abs();
        let lo_r = if velocity.0 < 0 { travel } else { 0 };
        let hi_r = h as i64 - side - if velocity.0 > 0 { travel } else { 0 };
        let travel_c = (t as i64 - 1) * velocity.1.abs();
        let lo_c = if velocity.1 < 0 { travel_c } else { 0 };
        let hi_c = w as i64 - side - if velocity.1 > 0 { travel_c } else { 0 };
        if hi_r < lo_r || hi_c < lo_c {
            return Err(Error::Config(format!(
                "toy frames {h}x{w} too small for side {side} moving {velocity:?} over {t} frames"
            )));
        }
        let start = (rng.gen_range(lo_r..=hi_r), rng.gen_range(lo_c..=hi_c));
        let dir = out_path.join(format!("seq_{s:03}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for k in 0..t {
            let top = start.0 + k as i64 * velocity.0;
            let left = start.1 + k as i64 * velocity.1;
            let img = render_toy_frame(h, w, top, left, side);
            let path = dir.join(format!("frame_{k:02}.png"));
            img.save(&path)
                .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        }
        motions.push(ToyMotion {
            start,
            velocity,
            side,
        });
    }
    Ok(motions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn toy_spec(root: &Path, t: usize, hw: usize, channels: usize) -> DatasetSpec {
        let mut spec = DatasetSpec::new(root);
        spec.segment_length = t;
        spec.resize_to = (hw, hw);
        spec.channels = channels;
        spec.split_fractions = (1.0, 0.0, 0.0);
        spec
    }

    #[test]
    fn scan_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_dataset(dir.path(), 3, 7, 16, 16, 42).unwrap();
        let spec = toy_spec(dir.path(), 7, 16, 1);
        let records = scan_dataset(&spec).unwrap();
        assert_eq!(records.len(), 3);
        let again = scan_dataset(&spec).unwrap();
        assert_eq!(records, again);
    }

    #[test]
    fn scan_skips_short_sequences() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_dataset(dir.path(), 1, 5, 16, 16, 1).unwrap();
        let spec = toy_spec(dir.path(), 7, 16, 1);
        match scan_dataset(&spec) {
            Err(Error::Data(_)) => {}
            other => panic!("expected DataError for zero usable sequences, got {other:?}"),
        }
    }

    #[test]
    fn scan_missing_root_is_config_error() {
        let spec = toy_spec(Path::new("/nonexistent/mivid-root"), 7, 16, 1);
        assert!(matches!(scan_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn sliding_windows_extracted() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_dataset(dir.path(), 1, 9, 24, 24, 3).unwrap();
        let spec = toy_spec(dir.path(), 7, 24, 1);
        let records = scan_dataset(&spec).unwrap();
        assert_eq!(records.len(), 3); // 9 - 7 + 1 windows
        assert_eq!(records[0].start_index, 0);
        assert_eq!(records[2].start_index, 2);
    }

    #[test]
    fn load_segment_shape_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_dataset(dir.path(), 1, 7, 32, 48, 7).unwrap();
        let mut spec = toy_spec(dir.path(), 7, 16, 3);
        spec.resize_to = (16, 16);
        let records = scan_dataset(&spec).unwrap();
        let seg = load_segment(&records[0], &spec).unwrap();
        assert_eq!(seg.frames.dim(), (7, 3, 16, 16));
    }

    #[test]
    fn normalization_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let seq = dir.path().join("s0");
        std::fs::create_dir_all(&seq).unwrap();
        for k in 0..3 {
            let v = if k == 0 { 0u8 } else { 255u8 };
            image::GrayImage::from_pixel(8, 8, image::Luma([v]))
                .save(seq.join(format!("frame_{k:02}.png")))
                .unwrap();
        }
        // three frames: black, white, white
        let spec = toy_spec(dir.path(), 3, 8, 1);
        let records = scan_dataset(&spec).unwrap();
        let seg = load_segment(&records[0], &spec).unwrap();
        assert!(seg.frames.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 0.0));
        assert!(seg.frames.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn undecodable_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let seq = dir.path().join("s0");
        std::fs::create_dir_all(&seq).unwrap();
        for k in 0..3 {
            std::fs::write(seq.join(format!("frame_{k:02}.png")), b"not a png").unwrap();
        }
        let spec = toy_spec(dir.path(), 3, 8, 1);
        let records = scan_dataset(&spec).unwrap();
        match load_segment(&records[0], &spec) {
            Err(Error::Data(msg)) => assert!(msg.contains("frame_00.png"), "message: {msg}"),
            other => panic!("expected DataError, got {other:?}"),
        }
    }

    #[test]
    fn toy_dataset_reproducible_byte_for_byte() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_toy_dataset(a.path(), 8, 7, 32, 32, 42).unwrap();
        make_toy_dataset(b.path(), 8, 7, 32, 32, 42).unwrap();
        for s in 0..8 {
            for k in 0..7 {
                let rel = format!("seq_{s:03}/frame_{k:02}.png");
                let fa = std::fs::read(a.path().join(&rel)).unwrap();
                let fb = std::fs::read(b.path().join(&rel)).unwrap();
                assert_eq!(fa, fb, "bytes differ for {rel}");
            }
        }
    }

    #[test]
    fn toy_frames_shift_by_velocity() {
        let dir = tempfile::tempdir().unwrap();
        let motions = make_toy_dataset(dir.path(), 6, 7, 32, 32, 5).unwrap();
        for (s, m) in motions.iter().enumerate() {
            let (dy, dx) = m.velocity;
            for k in 1..7usize {
                let prev = image::open(
                    dir.path().join(format!("seq_{s:03}/frame_{:02}.png", k - 1)),
                )
                .unwrap()
                .to_luma8();
                let cur = image::open(dir.path().join(format!("seq_{s:03}/frame_{k:02}.png")))
                    .unwrap()
                    .to_luma8();
                for y in 0..32i64 {
                    for x in 0..32i64 {
                        let (sy, sx) = (y - dy, x - dx);
                        let expect = if (0..32).contains(&sy) && (0..32).contains(&sx) {
                            prev.get_pixel(sx as u32, sy as u32)[0]
                        } else {
                            TOY_BACKGROUND
                        };
                        assert_eq!(cur.get_pixel(x as u32, y as u32)[0], expect);
                    }
                }
            }
        }
    }

    #[test]
    fn toy_palette_only() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_dataset(dir.path(), 4, 7, 16, 16, 9).unwrap();
        for entry in walk_pngs(dir.path()) {
            let img = image::open(&entry).unwrap().to_luma8();
            for p in img.pixels() {
                assert!(p[0] == TOY_BACKGROUND || p[0] == TOY_FOREGROUND);
            }
        }
    }

    fn walk_pngs(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for seq in std::fs::read_dir(root).unwrap() {
            let seq = seq.unwrap().path();
            if seq.is_dir() {
                for f in std::fs::read_dir(seq).unwrap() {
                    let f = f.unwrap().path();
                    if is_image_file(&f) {
                        out.push(f);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn png_roundtrip_within_one_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut frames = Array4::<f32>::zeros((3, 3, 12, 12));
        for v in frames.iter_mut() {
            use rand::Rng;
            *v = rng.gen_range(0.0..1.0);
        }
        let seg = VideoSegment::new(frames.clone(), "rt".into(), vec![0, 1, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("rt");
        save_segment_png(&seg, &out).unwrap();

        let mut spec = DatasetSpec::new(dir.path());
        spec.segment_length = 3;
        spec.resize_to = (12, 12);
        spec.channels = 3;
        spec.split_fractions = (1.0, 0.0, 0.0);
        let records = scan_dataset(&spec).unwrap();
        let reloaded = load_segment(&records[0], &spec).unwrap();
        let max_err = frames
            .iter()
            .zip(reloaded.frames.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0, "round-trip error {max_err}");
    }

    #[test]
    fn splits_disjoint_and_exhaustive() {
        let dir = tempfile::tempdir().unwrap();
        make_toy_dataset(dir.path(), 10, 7, 16, 16, 13).unwrap();
        let mut spec = toy_spec(dir.path(), 7, 16, 1);
        spec.split_fractions = SPLIT_FRACTIONS;
        let mut seen = std::collections::BTreeSet::new();
        let mut total = 0;
        for split in [Split::Train, Split::Val, Split::Test] {
            spec.split = split;
            for r in scan_dataset(&spec).unwrap() {
                assert!(seen.insert(r.sequence_id.clone()), "duplicate {}", r.sequence_id);
                total += 1;
            }
        }
        assert_eq!(total, 10);
    }

    #[test]
    fn segment_invariants_enforced() {
        let frames = Array4::<f32>::zeros((2, 1, 4, 4));
        assert!(VideoSegment::new(frames, "short".into(), vec![0, 1]).is_err());
        let frames = Array4::<f32>::zeros((3, 2, 4, 4));
        assert!(VideoSegment::new(frames, "chan".into(), vec![0, 1, 2]).is_err());
        let mut frames = Array4::<f32>::zeros((3, 1, 4, 4));
        frames[[0, 0, 0, 0]] = 1.5;
        assert!(VideoSegment::new(frames, "range".into(), vec![0, 1, 2]).is_err());
    }
}
