//! Frame-quality evaluation: PSNR, SSIM, perceptual patch distance, and
//! per-dataset aggregation with a CSV report format.
//!
//! Everything is computed in `f64` from the stored frame values. The dynamic
//! range is `L = 1` internally (frames live in `[0,1]`); dB values are
//! identical under the 255-range convention since PSNR depends only on
//! `MSE / L^2`, which a unit test asserts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayView3};

use crate::error::{Error, Result};
use crate::losses::{lpips_distance, ConvPyramidBackend, FeatureBackend, DEFAULT_BACKEND_SEED};
use crate::tensor::Scalar;

/// PSNR reported for identical frames (the MSE = 0 singularity).
pub const PSNR_CAP_DB: f64 = 99.0;
/// Width of the SSIM Gaussian window.
const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB: `10 log10(L^2 / MSE)` with the MSE taken
/// over all channels and pixels. Identical frames return [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(pred: ArrayView3<'_, T>, gt: ArrayView3<'_, T>, l: f64) -> f64 {
    assert_eq!(pred.dim(), gt.dim(), "shape mismatch");
    assert!(l > 0.0, "dynamic range must be positive");
    let n = pred.len() as f64;
    let mse: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        10.0 * (l * l / mse).log10()
    }
}

fn gaussian_kernel(window: usize) -> Vec<f64> {
    let c = (window / 2) as f64;
    let mut k: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Structural similarity with a Gaussian-weighted sliding window, computed
/// per channel over fully interior window positions and averaged.
///
/// `c1 = (k1 L)^2`, `c2 = (k2 L)^2`.
pub fn ssim<T: Scalar>(
    pred: ArrayView3<'_, T>,
    gt: ArrayView3<'_, T>,
    l: f64,
    window: usize,
    k1: f64,
    k2: f64,
) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Metric(format!(
            "shape mismatch {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if window % 2 == 0 || window == 0 {
        return Err(Error::Metric(format!("window must be odd, got {window}")));
    }
    let (c, h, w) = pred.dim();
    if h < window || w < window {
        return Err(Error::Metric(format!(
            "frame {h}x{w} smaller than the {window}-tap window"
        )));
    }
    let kern = gaussian_kernel(window);
    let c1 = (k1 * l) * (k1 * l);
    let c2 = (k2 * l) * (k2 * l);
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ci in 0..c {
        for y0 in 0..=(h - window) {
            for x0 in 0..=(w - window) {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..window {
                    let wy = kern[dy];
                    for dx in 0..window {
                        let wgt = wy * kern[dx];
                        let a = pred[[ci, y0 + dy, x0 + dx]].as_f64();
                        let b = gt[[ci, y0 + dy, x0 + dx]].as_f64();
                        mx += wgt * a;
                        my += wgt * b;
                        mxx += wgt * a * a;
                        myy += wgt * b * b;
                        mxy += wgt * a * b;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let vxy = mxy - mx * my;
                let val = ((2.0 * mx * my + c1) * (2.0 * vxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                acc += val;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Perceptual patch distance between two frames under the given backend.
/// Shares its implementation with the training-side loss (unit weight).
pub fn lpips_metric<T: Scalar>(
    pred: ArrayView3<'_, T>,
    gt: ArrayView3<'_, T>,
    backend: &dyn FeatureBackend<T>,
) -> f64 {
    let to4 = |v: ArrayView3<'_, T>| {
        let (c, h, w) = v.dim();
        let mut a = Array4::<T>::zeros((1, c, h, w));
        a.index_axis_mut(ndarray::Axis(0), 0).assign(&v);
        a
    };
    lpips_distance(&to4(pred), &to4(gt), backend)
}

/// Which frames of each sequence are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameSelection {
    /// The center frame only (index `n / 2`).
    #[default]
    Center,
    All,
}

/// Evaluation parameters.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Dynamic range of the stored frames.
    pub l: f64,
    pub selection: FrameSelection,
    pub backend_seed: u64,
    pub ssim_window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            l: 1.0,
            selection: FrameSelection::Center,
            backend_seed: DEFAULT_BACKEND_SEED,
            ssim_window: 11,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

/// One evaluated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub sequence_id: String,
    pub frame_index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: f64,
}

/// Per-frame metrics plus their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_frame: Vec<MetricEntry>,
    pub aggregate_psnr: f64,
    pub aggregate_ssim: f64,
    pub aggregate_lpips: f64,
    /// Dynamic range the dB values refer to.
    pub l: f64,
    /// Identity of the feature backend behind the lpips column.
    pub backend_id: String,
}

impl MetricsReport {
    fn from_entries(entries: Vec<MetricEntry>, l: f64, backend_id: String) -> Self {
        let n = entries.len().max(1) as f64;
        let (mut p, mut s, mut lp) = (0.0, 0.0, 0.0);
        for e in &entries {
            p += e.psnr_db;
            s += e.ssim;
            lp += e.lpips;
        }
        Self {
            per_frame: entries,
            aggregate_psnr: p / n,
            aggregate_ssim: s / n,
            aggregate_lpips: lp / n,
            l,
            backend_id,
        }
    }
}

fn list_sequences(root: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let mut frames: Vec<PathBuf> = std::fs::read_dir(&path)
            .map_err(|e| Error::io(&path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && matches!(p.extension().and_then(|e| e.to_str()), Some("png") | Some("PNG"))
            })
            .collect();
        frames.sort();
        out.insert(entry.file_name().to_string_lossy().into_owned(), frames);
    }
    Ok(out)
}

fn load_rgb_frame(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out[[c, y, x]] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Evaluate matching sequence directories of predicted and ground-truth
/// frames. Structure must match exactly; unmatched sequences or frames are a
/// [`Error::Data`] listing every offender.
pub fn evaluate_directory(pred_dir: &Path, gt_dir: &Path, cfg: &EvalConfig) -> Result<MetricsReport> {
    let pred = list_sequences(pred_dir)?;
    let gt = list_sequences(gt_dir)?;

    let mut mismatches = Vec::new();
    for k in pred.keys() {
        if !gt.contains_key(k) {
            mismatches.push(format!("sequence {k} only in {}", pred_dir.display()));
        }
    }
    for k in gt.keys() {
        if !pred.contains_key(k) {
            mismatches.push(format!("sequence {k} only in {}", gt_dir.display()));
        }
    }
    for (k, pf) in &pred {
        if let Some(gf) = gt.get(k) {
            let pn: Vec<_> = pf.iter().filter_map(|p| p.file_name()).collect();
            let gn: Vec<_> = gf.iter().filter_map(|p| p.file_name()).collect();
            if pn != gn {
                mismatches.push(format!("sequence {k}: frame sets differ ({pn:?} vs {gn:?})"));
            }
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Data(format!(
            "prediction/ground-truth structure mismatch: {}",
            mismatches.join("; ")
        )));
    }

    let backend = ConvPyramidBackend::<f32>::new(3, cfg.backend_seed);
    let mut entries = Vec::new();
    for (seq, pf) in &pred {
        let gf = &gt[seq];
        let indices: Vec<usize> = match cfg.selection {
            FrameSelection::Center => vec![pf.len() / 2],
            FrameSelection::All => (0..pf.len()).collect(),
        };
        for idx in indices {
            let a = load_rgb_frame(&pf[idx])?;
            let b = load_rgb_frame(&gf[idx])?;
            if a.dim() != b.dim() {
                return Err(Error::Data(format!(
                    "sequence {seq} frame {idx}: {:?} vs {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
            entries.push(MetricEntry {
                sequence_id: seq.clone(),
                frame_index: idx,
                psnr_db: psnr(a.view(), b.view(), cfg.l),
                ssim: ssim(a.view(), b.view(), cfg.l, cfg.ssim_window, cfg.k1, cfg.k2)?,
                lpips: lpips_metric(a.view(), b.view(), &backend),
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "no evaluable sequences under {}",
            pred_dir.display()
        )));
    }
    Ok(MetricsReport::from_entries(entries, cfg.l, backend.id()))
}

/// Serialize a report: CSV header, one row per frame, an `aggregate` row,
/// and a trailing comment naming the backend and dynamic range.
pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = String::from("sequence,frame,psnr_db,ssim,lpips\n");
    for e in &report.per_frame {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.sequence_id, e.frame_index, e.psnr_db, e.ssim, e.lpips
        ));
    }
    out.push_str(&format!(
        "aggregate,,{},{},{}\n",
        report.aggregate_psnr, report.aggregate_ssim, report.aggregate_lpips
    ));
    out.push_str(&format!("# backend={} L={}\n", report.backend_id, report.l));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parse a file produced by [`write_report`].
pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("sequence,frame,psnr_db,ssim,lpips") => {}
        other => {
            return Err(Error::Data(format!(
                "{}: bad report header {other:?}",
                path.display()
            )))
        }
    }
    let mut entries = Vec::new();
    let mut aggregate = None;
    let mut backend_id = String::new();
    let mut l = 1.0f64;
    for line in lines {
        if let Some(rest) = line.strip_prefix("# backend=") {
            if let Some((b, lv)) = rest.rsplit_once(" L=") {
                backend_id = b.to_string();
                l = lv
                    .parse()
                    .map_err(|e| Error::Data(format!("bad L value {lv}: {e}")))?;
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Data(format!("bad report row: {line}")));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Data(format!("bad number {s}: {e}")))
        };
        if fields[0] == "aggregate" {
            aggregate = Some((parse(fields[2])?, parse(fields[3])?, parse(fields[4])?));
        } else {
            entries.push(MetricEntry {
                sequence_id: fields[0].to_string(),
                frame_index: fields[1]
                    .parse()
                    .map_err(|e| Error::Data(format!("bad frame index {}: {e}", fields[1])))?,
                psnr_db: parse(fields[2])?,
                ssim: parse(fields[3])?,
                lpips: parse(fields[4])?,
            });
        }
    }
    let (ap, as_, al) =
        aggregate.ok_or_else(|| Error::Data(format!("{}: missing aggregate row", path.display())))?;
    Ok(MetricsReport {
        per_frame: entries,
        aggregate_psnr: ap,
        aggregate_ssim: as_,
        aggregate_lpips: al,
        l,
        backend_id,
    })
}
