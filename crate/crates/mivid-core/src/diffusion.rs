//! Noise schedule, mask-aware forward noising, the training target, and the
//! reverse (sampling) process with known-frame re-injection.
//!
//! All timesteps are 1-based: `t` runs over `1..=T_d`, and the cumulative
//! retention product uses the empty-product convention `alpha_bar(0) = 1`.
//! Noise enters masked frames only; unmasked frames pass through every
//! operation bit-identically, which is what lets the reverse process re-inject
//! the known frames by simply carrying them along.

use ndarray::Array4;
use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::MaskVector;
use crate::tensor::{sample_standard_normal, Scalar};
use crate::videodata::VideoSegment;

/// Shape of the beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleKind::Linear => write!(f, "linear"),
            ScheduleKind::Cosine => write!(f, "cosine"),
        }
    }
}

/// Whether the reverse step adds posterior noise or is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    Posterior,
    /// `sigma_t = 0`; the update equals the epsilon-form mean exactly.
    Zero,
}

impl std::fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SigmaMode::Posterior => write!(f, "posterior"),
            SigmaMode::Zero => write!(f, "zero"),
        }
    }
}

/// Per-step noise levels for `T_d` diffusion steps, stored in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Offset of the squared-cosine retention curve.
const COSINE_S: f64 = 0.008;
/// Derived cosine betas are clipped into this range to keep every step valid.
const BETA_CLIP: (f64, f64) = (1e-12, 0.999);

/// Build a noise schedule.
///
/// Linear: betas evenly spaced over `[beta_start, beta_end]`. Cosine: the
/// squared-cosine retention curve, with betas derived from consecutive curve
/// ratios and clipped to `(0, 0.999]`; `alpha_bar` is then recomputed as the
/// running product of the clipped alphas so the stored arrays stay mutually
/// consistent. The endpoint arguments are validated for both kinds but only
/// the linear kind uses them.
pub fn build_schedule(
    kind: ScheduleKind,
    t_d: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_d < 1 {
        return Err(Error::Config("diffusion.T_d must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_d)
            .map(|i| {
                if t_d == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_d - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let f = |u: f64| {
                let x = (u / t_d as f64 + COSINE_S) / (1.0 + COSINE_S)
                    * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=t_d)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(BETA_CLIP.0, BETA_CLIP.1))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_d);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        kind,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::Step(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    /// `beta_t` (1-based).
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// `alpha_t = 1 - beta_t` (1-based).
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative retention product at step `t` (1-based); `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Forward-noise masked frames with caller-supplied noise:
/// `z_t = (1-M) (.) x0 + M (.) (sqrt(abar_t) x0 + sqrt(1-abar_t) eps)`.
///
/// Unmasked frames are copied bit-identically.
pub fn forward_noise_with<T: Scalar>(
    x0: &Array4<T>,
    mask: &MaskVector,
    t: usize,
    sched: &NoiseSchedule,
    eps: &Array4<T>,
) -> Result<Array4<T>> {
    sched.check_step(t)?;
    assert_eq!(x0.dim(), eps.dim(), "noise shape must match input");
    assert_eq!(mask.len(), x0.dim().0, "mask length must equal T");
    let abar = sched.alpha_bar(t);
    let signal = T::from_f64(abar.sqrt());
    let noise = T::from_f64((1.0 - abar).sqrt());
    let mut z = x0.clone();
    for (i, mut frame) in z.outer_iter_mut().enumerate() {
        if !mask.is_masked(i) {
            continue;
        }
        let e = eps.index_axis(ndarray::Axis(0), i);
        for (v, ev) in frame.iter_mut().zip(e.iter()) {
            *v = signal * *v + noise * *ev;
        }
    }
    Ok(z)
}

/// Forward-noise masked frames with fresh standard-normal noise.
///
/// Returns `(z_t, eps)`; `eps` is zero outside masked frames and is the
/// training target for the noise-prediction loss.
pub fn forward_noise<T: Scalar, R: Rng>(
    x0: &Array4<T>,
    mask: &MaskVector,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Array4<T>, Array4<T>)> {
    sched.check_step(t)?;
    let mut eps = Array4::<T>::zeros(x0.dim());
    for (i, mut frame) in eps.outer_iter_mut().enumerate() {
        if mask.is_masked(i) {
            for v in frame.iter_mut() {
                *v = sample_standard_normal(rng);
            }
        }
    }
    let z = forward_noise_with(x0, mask, t, sched, &eps)?;
    Ok((z, eps))
}

/// Invert the forward step on masked frames:
/// `x0_hat = (z_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)`, composited with
/// the known frames carried inside `z_t` at unmasked positions.
pub fn reconstruct_x0<T: Scalar>(
    z_t: &Array4<T>,
    eps_hat: &Array4<T>,
    t: usize,
    mask: &MaskVector,
    sched: &NoiseSchedule,
) -> Array4<T> {
    assert_eq!(z_t.dim(), eps_hat.dim(), "shape mismatch");
    let abar = sched.alpha_bar(t);
    let inv_signal = T::from_f64(1.0 / abar.sqrt());
    let noise = T::from_f64((1.0 - abar).sqrt());
    let mut out = z_t.clone();
    for (i, mut frame) in out.outer_iter_mut().enumerate() {
        if !mask.is_masked(i) {
            continue;
        }
        let e = eps_hat.index_axis(ndarray::Axis(0), i);
        for (v, ev) in frame.iter_mut().zip(e.iter()) {
            *v = (*v - noise * *ev) * inv_signal;
        }
    }
    out
}

/// One reverse-sampling step `z_t -> z_{t-1}` on masked frames.
///
/// Computes the clean estimate, the posterior mean, adds `sigma_t zeta`
/// (posterior mode only), and re-injects the known frames by carrying the
/// unmasked positions of `z_t` through unchanged.
pub fn reverse_step<T: Scalar, R: Rng>(
    z_t: &Array4<T>,
    eps_hat: &Array4<T>,
    t: usize,
    mask: &MaskVector,
    sched: &NoiseSchedule,
    rng: &mut R,
    sigma_mode: SigmaMode,
) -> Result<Array4<T>> {
    reverse_step_clipped(z_t, eps_hat, t, mask, sched, rng, sigma_mode, None)
}

/// [`reverse_step`] with an optional clamp on the intermediate clean-frame
/// estimate. At small `alpha_bar` the estimate divides by `sqrt(alpha_bar)`,
/// so an imperfect noise prediction is amplified enormously; clamping the
/// estimate into the known data range keeps multi-step trajectories bounded.
/// `None` reproduces the pure algebra.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_clipped<T: Scalar, R: Rng>(
    z_t: &Array4<T>,
    eps_hat: &Array4<T>,
    t: usize,
    mask: &MaskVector,
    sched: &NoiseSchedule,
    rng: &mut R,
    sigma_mode: SigmaMode,
    x0_clip: Option<(f64, f64)>,
) -> Result<Array4<T>> {
    sched.check_step(t)?;
    let abar = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);

    // Eq. coefficients of the posterior mean over (x0_hat, z_t).
    let coef_x0 = T::from_f64(abar_prev.sqrt() * beta / (1.0 - abar));
    let coef_z = T::from_f64(alpha.sqrt() * (1.0 - abar_prev) / (1.0 - abar));
    let inv_signal = T::from_f64(1.0 / abar.sqrt());
    let noise_scale = T::from_f64((1.0 - abar).sqrt());
    let sigma = match sigma_mode {
        SigmaMode::Posterior => ((1.0 - abar_prev) / (1.0 - abar) * beta).sqrt(),
        SigmaMode::Zero => 0.0,
    };
    let sigma_t = T::from_f64(sigma);
    let clip = x0_clip.map(|(lo, hi)| (T::from_f64(lo), T::from_f64(hi)));

    let mut out = z_t.clone();
    for (i, mut frame) in out.outer_iter_mut().enumerate() {
        if !mask.is_masked(i) {
            continue;
        }
        let e = eps_hat.index_axis(ndarray::Axis(0), i);
        for (v, ev) in frame.iter_mut().zip(e.iter()) {
            let mut x0_hat = (*v - noise_scale * *ev) * inv_signal;
            if let Some((lo, hi)) = clip {
                x0_hat = x0_hat.max(lo).min(hi);
            }
            let mut next = coef_x0 * x0_hat + coef_z * *v;
            if sigma > 0.0 {
                let zeta: T = sample_standard_normal(rng);
                next = next + sigma_t * zeta;
            }
            *v = next;
        }
    }
    Ok(out)
}

/// Anything that can predict the noise content of a latent at step `t`.
///
/// Implemented by the model; kept as a trait so sampling can be exercised
/// with lightweight stand-ins.
pub trait NoisePredictor<T: Scalar> {
    /// Predict `eps_hat` for latent `z_t` conditioned on the visible frames
    /// of `context` (masked positions are ignored / zero-filled internally).
    fn predict_noise(
        &self,
        z_t: &Array4<T>,
        context: &Array4<T>,
        mask: &MaskVector,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Array4<T>>;
}

/// Data range of normalized frames, used to stabilize sampling trajectories.
pub const FRAME_RANGE: (f64, f64) = (0.0, 1.0);

/// Full reverse process on raw frames: initialize masked frames from
/// `N(0, I)` and iterate [`reverse_step_clipped`] from `T_d` down to 1 with
/// the clean-frame estimate clamped to [`FRAME_RANGE`].
///
/// Unmasked frames of the result are bit-identical to `context`.
pub fn sample_frames<T: Scalar, R: Rng, P: NoisePredictor<T>>(
    context: &Array4<T>,
    mask: &MaskVector,
    predictor: &P,
    sched: &NoiseSchedule,
    rng: &mut R,
    sigma_mode: SigmaMode,
) -> Result<Array4<T>> {
    if mask.masked_count() == 0 {
        return Ok(context.clone());
    }
    let mut z = context.clone();
    for (i, mut frame) in z.outer_iter_mut().enumerate() {
        if mask.is_masked(i) {
            for v in frame.iter_mut() {
                *v = sample_standard_normal(rng);
            }
        }
    }
    for t in (1..=sched.len()).rev() {
        let eps_hat = predictor.predict_noise(&z, context, mask, t, sched)?;
        z = reverse_step_clipped(
            &z,
            &eps_hat,
            t,
            mask,
            sched,
            rng,
            sigma_mode,
            Some(FRAME_RANGE),
        )?;
    }
    Ok(z)
}

/// Reverse process over a [`VideoSegment`]: synthesizes the masked frames and
/// returns a composited segment. Masked frames are clamped into `[0,1]`;
/// unmasked frames are bit-identical to the input context.
pub fn sample<R: Rng, P: NoisePredictor<f32>>(
    context: &VideoSegment,
    mask: &MaskVector,
    predictor: &P,
    sched: &NoiseSchedule,
    rng: &mut R,
    sigma_mode: SigmaMode,
) -> Result<VideoSegment> {
    let mut frames = sample_frames(&context.frames, mask, predictor, sched, rng, sigma_mode)?;
    for (i, mut frame) in frames.outer_iter_mut().enumerate() {
        if mask.is_masked(i) {
            for v in frame.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }
    VideoSegment::new(frames, context.source_id.clone(), context.frame_indices.clone())
}
