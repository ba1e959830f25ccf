//! Training loop, learning-rate schedule, run orchestration, and the
//! interpolation entry point.
//!
//! The loop is single-threaded and fully seeded: masks, timesteps, and noise
//! all come from one ChaCha stream whose position is checkpointed, and the
//! per-epoch batch order is derived from `(seed, epoch)` alone, so a resumed
//! run replays exactly the steps the uninterrupted run would have taken.

pub mod adam;
pub mod checkpoint;

pub use adam::{adam_step, adam_update_tensor, ADAM_EPS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LrSchedule, TrainingConfig};
use crate::diffusion::{
    build_schedule, forward_noise, reconstruct_x0, sample, NoiseSchedule, SigmaMode,
};
use crate::error::{Error, Result};
use crate::losses::{
    diffusion_loss, diffusion_loss_backward, lpips_loss, lpips_loss_backward, perceptual_loss,
    perceptual_loss_backward, pixel_loss, pixel_loss_backward, scatter_masked_frames,
    select_masked_frames, total_loss, ConvPyramidBackend, FeatureBackend, LossReport, LossWeights,
};
use crate::masking::{hybrid_mask, MaskVector};
use crate::videodata::{load_segment, scan_dataset, save_frame_png, Split, VideoSegment};

/// Learning rate at an optimizer step.
///
/// Cosine annealing decays from `lr` at step 0 to 0 at `total_steps`;
/// constant ignores the step.
pub fn lr_at(step: usize, total_steps: usize, schedule: LrSchedule, lr: f64) -> f64 {
    match schedule {
        LrSchedule::Constant => lr,
        LrSchedule::CosineAnneal => {
            if total_steps == 0 {
                return lr;
            }
            let frac = step as f64 / total_steps as f64;
            lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
        }
    }
}

/// Optional warm-up of the feature-space weights: when enabled, lambda_perc
/// and lambda_lpips ramp linearly from 0 to their configured values over the
/// first half of training.
pub fn effective_weights(
    step: usize,
    total_steps: usize,
    base: &LossWeights,
    adaptive: bool,
) -> LossWeights {
    if !adaptive {
        return *base;
    }
    let half = (total_steps / 2).max(1);
    let factor = (step as f64 / half as f64).min(1.0);
    LossWeights {
        lambda_perc: base.lambda_perc * factor,
        lambda_lpips: base.lambda_lpips * factor,
        ..*base
    }
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 round over seed ^ rotated salt.
    let mut z = seed ^ salt.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded shuffle of `0..n`, a pure function of `(seed, epoch)`.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

struct LogFile {
    file: std::fs::File,
    path: PathBuf,
}

impl LogFile {
    fn open(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("train_log.csv");
        let fresh = !path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            writeln!(file, "step,epoch,lr,loss_total,loss_diff,loss_pix,loss_perc,loss_lpips")
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self { file, path })
    }

    fn record(&mut self, step: u64, epoch: usize, lr: f64, r: &LossReport) -> Result<()> {
        writeln!(
            self.file,
            "{step},{epoch},{lr},{},{},{},{},{}",
            r.total, r.diff, r.pix, r.perc, r.lpips
        )
        .map_err(|e| Error::io(&self.path, e))
    }
}

fn restore_rng(ck: &Checkpoint) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
    rng.set_word_pos(ck.rng_word_pos);
    rng
}

/// Train per the configuration, optionally resuming from a checkpoint file.
///
/// When resuming, the run-control settings of `cfg` (epochs, max_steps,
/// checkpoint cadence, output directory) apply, but the architecture, data,
/// and seed keys must match the checkpoint.
pub fn train(cfg: &TrainingConfig, resume_from: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;

    let mut state = match resume_from {
        None => Checkpoint::fresh(cfg)?,
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config.model_config() != cfg.model_config() {
                return Err(Error::Checkpoint(format!(
                    "{}: architecture in checkpoint differs from the provided config",
                    path.display()
                )));
            }
            if ck.config.seed != cfg.seed || ck.config.data_root != cfg.data_root {
                log::warn!("resume: seed or data root differ from checkpoint; using provided config");
            }
            let mut ck = ck;
            ck.config = cfg.clone();
            ck
        }
    };

    let sched = build_schedule(cfg.schedule_kind, cfg.t_d, cfg.beta_start, cfg.beta_end)?;
    let spec = cfg.dataset_spec(Split::Train);
    let records = scan_dataset(&spec)?;
    let segments: Vec<VideoSegment> = records
        .iter()
        .map(|r| load_segment(r, &spec))
        .collect::<Result<_>>()?;
    let n = segments.len();
    let bpe = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * bpe;
    let weights = cfg.loss_weights();
    let backend = ConvPyramidBackend::<f32>::with_default_seed(cfg.channels);
    let use_backend = weights.lambda_perc > 0.0 || weights.lambda_lpips > 0.0;
    let mask_cfg = cfg.mask_config();

    let mut rng = restore_rng(&state);
    let mut log_file = LogFile::open(&cfg.out_dir)?;
    let mut last_good: Option<PathBuf> = None;

    log::info!(
        "training on {n} segments ({} parameters, {total_steps} total steps)",
        state.params.param_count()
    );

    let start_step = state.step;
    let mut stop = cfg.max_steps > 0 && state.step >= cfg.max_steps as u64;
    let start_epoch = (state.step / bpe as u64) as usize;
    'epochs: for epoch in start_epoch..cfg.epochs {
        if stop {
            break;
        }
        let order = epoch_order(n, cfg.seed, epoch);
        let skip_batches = if epoch == start_epoch {
            (state.step % bpe as u64) as usize
        } else {
            0
        };
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            if bi < skip_batches {
                continue;
            }
            let step0 = state.step as usize; // completed steps before this one
            let w_eff = effective_weights(step0, total_steps, &weights, cfg.adaptive_ramp);
            let backend_ref: Option<&dyn FeatureBackend<f32>> =
                if use_backend { Some(&backend) } else { None };

            let mut grad_sum = state.params.zeros_like();
            let mut reports = Vec::with_capacity(batch.len());
            for &si in batch {
                let seg = &segments[si];
                let mask = hybrid_mask(seg, epoch, &mask_cfg, &mut rng);
                let t = rng.gen_range(1..=cfg.t_d);
                let (z, eps) = forward_noise(&seg.frames, &mask, t, &sched, &mut rng)?;
                let (eps_hat, cache) =
                    state
                        .params
                        .forward_with_cache(&z, &seg.frames, &mask, t, &sched)?;
                let x_hat = reconstruct_x0(&z, &eps_hat, t, &mask, &sched);
                let sel_hat = select_masked_frames(&x_hat, &mask);
                let sel_tgt = select_masked_frames(&seg.frames, &mask);

                let diff = diffusion_loss(&eps, &eps_hat, &mask);
                let pix = pixel_loss(&sel_hat, &sel_tgt, &w_eff);
                let perc = perceptual_loss(&sel_hat, &sel_tgt, backend_ref, &w_eff)?;
                let lpips = lpips_loss(&sel_hat, &sel_tgt, backend_ref, &w_eff)?;
                let report = total_loss(diff, pix, perc, lpips).map_err(|e| {
                    abort_with_last_good(e, &last_good)
                })?;
                reports.push(report);

                // d total / d eps_hat: direct diffusion term plus the pixel
                // and feature terms chained through the clean-frame estimate.
                let mut d_eps = diffusion_loss_backward(&eps, &eps_hat, &mask);
                let mut d_sel = pixel_loss_backward(&sel_hat, &sel_tgt, &w_eff);
                if use_backend {
                    let dp = perceptual_loss_backward(&sel_hat, &sel_tgt, backend_ref, &w_eff)?;
                    let dl = lpips_loss_backward(&sel_hat, &sel_tgt, backend_ref, &w_eff)?;
                    d_sel.zip_mut_with(&dp, |a, b| *a += *b);
                    d_sel.zip_mut_with(&dl, |a, b| *a += *b);
                }
                let d_xhat = scatter_masked_frames(&d_sel, &mask, x_hat.dim());
                let abar = sched.alpha_bar(t);
                let factor = -((1.0 - abar).sqrt() / abar.sqrt()) as f32;
                for (i, mut frame) in d_eps.outer_iter_mut().enumerate() {
                    if mask.is_masked(i) {
                        let dx = d_xhat.index_axis(ndarray::Axis(0), i);
                        for (dv, xv) in frame.iter_mut().zip(dx.iter()) {
                            *dv += factor * *xv;
                        }
                    }
                }

                let grads = state.params.backward(&cache, &d_eps);
                grad_sum.add_scaled(&grads, 1.0);
            }

            grad_sum.scale(1.0 / batch.len() as f32);
            if cfg.grad_clip > 0.0 {
                let norm = grad_sum.l2_norm();
                if norm > cfg.grad_clip {
                    grad_sum.scale((cfg.grad_clip / norm) as f32);
                }
            }

            let report = LossReport::mean(&reports);
            if !report.total.is_finite() {
                return Err(abort_with_last_good(
                    Error::Numeric(format!("loss became {}", report.total)),
                    &last_good,
                ));
            }

            let lr_t = lr_at(step0, total_steps, cfg.lr_schedule, cfg.lr);
            let adam_step_index = step0 + 1;
            adam_step(
                &mut state.params,
                &grad_sum,
                &mut state.adam_m,
                &mut state.adam_v,
                lr_t,
                (cfg.beta1, cfg.beta2),
                ADAM_EPS,
                adam_step_index,
            )
            .map_err(|e| abort_with_last_good(e, &last_good))?;

            state.step += 1;
            state.epoch = epoch as u64;
            state.rng_word_pos = rng.get_word_pos();
            state.loss_history.push([
                report.total as f32,
                report.diff as f32,
                report.pix as f32,
                report.perc as f32,
                report.lpips as f32,
            ]);
            log_file.record(state.step, epoch, lr_t, &report)?;

            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
                let path = cfg.out_dir.join(format!("checkpoint_{:06}.mivd", state.step));
                save_checkpoint(&state, &path)?;
                last_good = Some(path);
            }
            if cfg.max_steps > 0 && state.step >= cfg.max_steps as u64 {
                stop = true;
                continue 'epochs;
            }
        }
    }

    let final_path = cfg.out_dir.join("checkpoint_final.mivd");
    save_checkpoint(&state, &final_path)?;
    log::info!(
        "finished at step {} ({} new steps); checkpoint {}",
        state.step,
        state.step - start_step,
        final_path.display()
    );
    Ok(TrainOutcome {
        checkpoint: state,
        checkpoint_path: final_path,
        log_path: log_file.path,
    })
}

fn abort_with_last_good(e: Error, last_good: &Option<PathBuf>) -> Error {
    let suffix = match last_good {
        Some(p) => format!("; last good checkpoint: {}", p.display()),
        None => "; no checkpoint written yet".to_string(),
    };
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg}{suffix}")),
        other => other,
    }
}

/// Result of an interpolation run.
pub struct InterpolationOutcome {
    /// All frames written to the output directory, in temporal order.
    pub frames: Vec<PathBuf>,
    /// Indices of the synthesized (previously masked) frames.
    pub synthesized: Vec<usize>,
    pub manifest_path: PathBuf,
}

fn list_input_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(p.extension().and_then(|e| e.to_str()), Some("png") | Some("PNG"))
        })
        .collect();
    frames.sort();
    Ok(frames)
}

fn decode_input_frame(
    path: &Path,
    channels: usize,
    target: (usize, usize),
) -> Result<(ndarray::Array3<f32>, bool)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode {}: {e}", path.display())))?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    let resized = h != target.0 || w != target.1;
    if resized {
        log::warn!(
            "{}: {h}x{w} does not match the trained resolution {}x{}, resizing",
            path.display(),
            target.0,
            target.1
        );
    }
    let img = if resized {
        image::imageops::resize(
            &img,
            target.1 as u32,
            target.0 as u32,
            image::imageops::FilterType::Triangle,
        )
        .into()
    } else {
        img
    };
    let mut out = ndarray::Array3::<f32>::zeros((channels, target.0, target.1));
    match channels {
        1 => {
            let g = img.to_luma8();
            for y in 0..target.0 {
                for x in 0..target.1 {
                    out[[0, y, x]] = g.get_pixel(x as u32, y as u32)[0] as f32 / 255.0;
                }
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for c in 0..3 {
                for y in 0..target.0 {
                    for x in 0..target.1 {
                        out[[c, y, x]] = rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
                    }
                }
            }
        }
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    }
    Ok((out, resized))
}

/// Synthesize the masked frames of a segment built from the PNG files in
/// `input_dir` and write the full segment (plus a manifest) to `out_dir`.
///
/// With exactly two input frames, a full training-length segment is built
/// with the inputs as endpoints and every intermediate frame masked. With
/// three or more, the inputs are the segment and `mask_indices` (default:
/// the center frame) selects what to synthesize. Context frames whose
/// resolution already matches are copied into `out_dir` byte-for-byte.
pub fn interpolate(
    checkpoint_path: &Path,
    input_dir: &Path,
    out_dir: &Path,
    sigma_mode: Option<SigmaMode>,
    seed: u64,
    mask_indices: Option<&[usize]>,
) -> Result<InterpolationOutcome> {
    let ck = load_checkpoint(checkpoint_path)?;
    let cfg = &ck.config;
    let sched = build_schedule(cfg.schedule_kind, cfg.t_d, cfg.beta_start, cfg.beta_end)?;
    let sigma = sigma_mode.unwrap_or(cfg.sigma_mode);

    let inputs = list_input_frames(input_dir)?;
    if inputs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least two input frames, found {} in {}",
            inputs.len(),
            input_dir.display()
        )));
    }

    let mut decoded = Vec::with_capacity(inputs.len());
    for p in &inputs {
        decoded.push((p.clone(), decode_input_frame(p, cfg.channels, cfg.resize)?));
    }

    // Build the segment and mask. source[i] tracks which input file (if any)
    // backs frame i, for byte-exact copying.
    let (t, mask, source): (usize, MaskVector, Vec<Option<usize>>) = if decoded.len() == 2 {
        let t = cfg.segment_length.max(3);
        let mask = MaskVector::from_masked_indices(t, &(1..t - 1).collect::<Vec<_>>())?;
        let mut source = vec![None; t];
        source[0] = Some(0);
        source[t - 1] = Some(1);
        (t, mask, source)
    } else {
        let t = decoded.len();
        let mask = match mask_indices {
            Some(idx) => MaskVector::from_masked_indices(t, idx)?,
            None => MaskVector::from_masked_indices(t, &[t / 2])?,
        };
        (t, mask, (0..t).map(Some).collect())
    };

    let (h, w) = cfg.resize;
    let mut frames = Array4::<f32>::zeros((t, cfg.channels, h, w));
    for (i, src) in source.iter().enumerate() {
        if let Some(k) = src {
            frames
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&decoded[*k].1 .0);
        }
    }
    let context = VideoSegment::new(frames, "interpolate".into(), (0..t).collect())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = sample(&context, &mask, &ck.params, &sched, &mut rng, sigma)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(t);
    let mut synthesized = Vec::new();
    for i in 0..t {
        let dst = out_dir.join(format!("frame_{i:02}.png"));
        match source[i] {
            Some(k) if !mask.is_masked(i) && !decoded[k].1 .1 => {
                // Unmasked, unresized context: copy the original bytes.
                std::fs::copy(&decoded[k].0, &dst).map_err(|e| Error::io(&dst, e))?;
            }
            _ => {
                save_frame_png(result.frames.index_axis(ndarray::Axis(0), i), &dst)?;
                if mask.is_masked(i) {
                    synthesized.push(i);
                }
            }
        }
        written.push(dst);
    }

    let manifest_path = out_dir.join("manifest.txt");
    let mut manifest = String::new();
    manifest.push_str(&format!("checkpoint = {}\n", checkpoint_path.display()));
    manifest.push_str(&format!("seed = {seed}\n"));
    manifest.push_str(&format!("sigma_mode = {sigma}\n"));
    for p in &inputs {
        manifest.push_str(&format!("input = {}\n", p.display()));
    }
    for (i, p) in written.iter().enumerate() {
        let role = if mask.is_masked(i) { "synthesized" } else { "context" };
        manifest.push_str(&format!("output = {} ({role})\n", p.display()));
    }
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

    Ok(InterpolationOutcome {
        frames: written,
        synthesized,
        manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_endpoints() {
        assert_eq!(lr_at(0, 100, LrSchedule::CosineAnneal, 0.1), 0.1);
        assert!((lr_at(100, 100, LrSchedule::CosineAnneal, 0.1)).abs() < 1e-17);
        assert!((lr_at(50, 100, LrSchedule::CosineAnneal, 0.1) - 0.05).abs() < 1e-12);
        assert_eq!(lr_at(7, 100, LrSchedule::Constant, 0.1), 0.1);
    }

    #[test]
    fn adaptive_ramp_behaviour() {
        let base = LossWeights::default();
        let w0 = effective_weights(0, 100, &base, true);
        assert_eq!(w0.lambda_perc, 0.0);
        assert_eq!(w0.lambda_lpips, 0.0);
        assert_eq!(w0.lambda_mse, base.lambda_mse);
        let w25 = effective_weights(25, 100, &base, true);
        assert!((w25.lambda_perc - base.lambda_perc * 0.5).abs() < 1e-12);
        let w50 = effective_weights(50, 100, &base, true);
        assert_eq!(w50.lambda_perc, base.lambda_perc);
        let w99 = effective_weights(99, 100, &base, true);
        assert_eq!(w99.lambda_perc, base.lambda_perc);
        let off = effective_weights(0, 100, &base, false);
        assert_eq!(off.lambda_perc, base.lambda_perc);
    }

    #[test]
    fn epoch_order_is_deterministic_and_permutes() {
        let a = epoch_order(10, 42, 3);
        let b = epoch_order(10, 42, 3);
        assert_eq!(a, b);
        let c = epoch_order(10, 42, 4);
        assert_ne!(a, c, "different epochs should shuffle differently");
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }
}
