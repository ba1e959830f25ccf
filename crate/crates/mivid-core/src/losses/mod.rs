//! The composite training objective: diffusion (noise-prediction MSE), pixel
//! reconstruction (MSE + L1), and two feature-space terms driven by a
//! pluggable [`FeatureBackend`]. All reconstruction terms operate on the
//! masked frames only; callers pass tensors already restricted to them (see
//! [`select_masked_frames`]).
//!
//! Every loss returns its value in `f64` and has a `_backward` companion
//! yielding the gradient with respect to the prediction tensor.

pub mod backend;

pub use backend::{ConvPyramidBackend, FeatureBackend, DEFAULT_BACKEND_SEED};

use ndarray::{Array1, Array4};

use crate::error::{Error, Result};
use crate::masking::MaskVector;
use crate::tensor::Scalar;

/// Weights of the objective's components. `lambda_diff` is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_l1: f64,
    pub lambda_perc: f64,
    pub lambda_lpips: f64,
    pub lambda_diff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 1.0,
            lambda_l1: 1.0,
            lambda_perc: 0.1,
            lambda_lpips: 0.1,
            lambda_diff: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mse", self.lambda_mse),
            ("lambda_l1", self.lambda_l1),
            ("lambda_perc", self.lambda_perc),
            ("lambda_lpips", self.lambda_lpips),
            ("lambda_diff", self.lambda_diff),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-batch mean loss components; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub diff: f64,
    pub pix: f64,
    pub perc: f64,
    pub lpips: f64,
}

impl LossReport {
    pub fn zero() -> Self {
        Self {
            total: 0.0,
            diff: 0.0,
            pix: 0.0,
            perc: 0.0,
            lpips: 0.0,
        }
    }

    /// Mean of several reports (batch averaging).
    pub fn mean(reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mut acc = LossReport::zero();
        for r in reports {
            acc.total += r.total;
            acc.diff += r.diff;
            acc.pix += r.pix;
            acc.perc += r.perc;
            acc.lpips += r.lpips;
        }
        LossReport {
            total: acc.total / n,
            diff: acc.diff / n,
            pix: acc.pix / n,
            perc: acc.perc / n,
            lpips: acc.lpips / n,
        }
    }
}

/// Count of loss-bearing elements: all positions in masked frames.
fn masked_element_count<T: Scalar>(x: &Array4<T>, mask: &MaskVector) -> usize {
    let per_frame = x.len() / x.dim().0;
    mask.masked_count() * per_frame
}

/// Mean squared error between true and predicted noise over masked-frame
/// positions only (unmasked frames carry no diffusion target).
pub fn diffusion_loss<T: Scalar>(eps: &Array4<T>, eps_hat: &Array4<T>, mask: &MaskVector) -> f64 {
    assert_eq!(eps.dim(), eps_hat.dim(), "shape mismatch");
    let n = masked_element_count(eps, mask);
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for (i, (a, b)) in eps.outer_iter().zip(eps_hat.outer_iter()).enumerate() {
        if !mask.is_masked(i) {
            continue;
        }
        for (x, y) in a.iter().zip(b.iter()) {
            let d = x.as_f64() - y.as_f64();
            acc += d * d;
        }
    }
    acc / n as f64
}

/// Gradient of [`diffusion_loss`] with respect to `eps_hat`.
pub fn diffusion_loss_backward<T: Scalar>(
    eps: &Array4<T>,
    eps_hat: &Array4<T>,
    mask: &MaskVector,
) -> Array4<T> {
    let n = masked_element_count(eps, mask);
    let mut d = Array4::<T>::zeros(eps_hat.raw_dim());
    if n == 0 {
        return d;
    }
    let scale = T::from_f64(2.0 / n as f64);
    for (i, mut frame) in d.outer_iter_mut().enumerate() {
        if !mask.is_masked(i) {
            continue;
        }
        let e = eps.index_axis(ndarray::Axis(0), i);
        let eh = eps_hat.index_axis(ndarray::Axis(0), i);
        for ((dv, x), y) in frame.iter_mut().zip(e.iter()).zip(eh.iter()) {
            *dv = scale * (*y - *x);
        }
    }
    d
}

/// `lambda_mse * mean((x_hat - x)^2) + lambda_l1 * mean(|x_hat - x|)` over the
/// given (already masked-frame-restricted) tensors.
pub fn pixel_loss<T: Scalar>(x_hat: &Array4<T>, x_target: &Array4<T>, w: &LossWeights) -> f64 {
    assert_eq!(x_hat.dim(), x_target.dim(), "shape mismatch");
    let n = x_hat.len().max(1) as f64;
    let mut mse = 0.0f64;
    let mut l1 = 0.0f64;
    for (a, b) in x_hat.iter().zip(x_target.iter()) {
        let d = a.as_f64() - b.as_f64();
        mse += d * d;
        l1 += d.abs();
    }
    w.lambda_mse * mse / n + w.lambda_l1 * l1 / n
}

/// Gradient of [`pixel_loss`] with respect to `x_hat`.
pub fn pixel_loss_backward<T: Scalar>(
    x_hat: &Array4<T>,
    x_target: &Array4<T>,
    w: &LossWeights,
) -> Array4<T> {
    let n = x_hat.len().max(1) as f64;
    let mut d = Array4::<T>::zeros(x_hat.raw_dim());
    for ((dv, a), b) in d.iter_mut().zip(x_hat.iter()).zip(x_target.iter()) {
        let diff = a.as_f64() - b.as_f64();
        *dv = T::from_f64((w.lambda_mse * 2.0 * diff + w.lambda_l1 * diff.signum()) / n);
    }
    d
}

/// `lambda_perc * mean_l mean(|phi_l(x_hat) - phi_l(x)|)`: mean absolute
/// feature difference per layer, averaged over layers.
pub fn perceptual_loss<T: Scalar>(
    x_hat: &Array4<T>,
    x_target: &Array4<T>,
    backend: Option<&dyn FeatureBackend<T>>,
    w: &LossWeights,
) -> Result<f64> {
    if w.lambda_perc == 0.0 {
        return Ok(0.0);
    }
    let backend = backend
        .ok_or_else(|| Error::Config("perceptual loss requested without a feature backend".into()))?;
    let fa = backend.forward(x_hat);
    let fb = backend.forward(x_target);
    let mut acc = 0.0f64;
    for (a, b) in fa.iter().zip(fb.iter()) {
        let n = a.len() as f64;
        let sum: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .sum();
        acc += sum / n;
    }
    Ok(w.lambda_perc * acc / fa.len() as f64)
}

/// Gradient of [`perceptual_loss`] with respect to `x_hat`.
pub fn perceptual_loss_backward<T: Scalar>(
    x_hat: &Array4<T>,
    x_target: &Array4<T>,
    backend: Option<&dyn FeatureBackend<T>>,
    w: &LossWeights,
) -> Result<Array4<T>> {
    if w.lambda_perc == 0.0 {
        return Ok(Array4::zeros(x_hat.raw_dim()));
    }
    let backend = backend
        .ok_or_else(|| Error::Config("perceptual loss requested without a feature backend".into()))?;
    let fa = backend.forward(x_hat);
    let fb = backend.forward(x_target);
    let layers = fa.len() as f64;
    let d_layers: Vec<Array4<T>> = fa
        .iter()
        .zip(fb.iter())
        .map(|(a, b)| {
            let n = a.len() as f64;
            let mut d = Array4::<T>::zeros(a.raw_dim());
            for ((dv, x), y) in d.iter_mut().zip(a.iter()).zip(b.iter()) {
                let diff = x.as_f64() - y.as_f64();
                *dv = T::from_f64(w.lambda_perc * diff.signum() / (n * layers));
            }
            d
        })
        .collect();
    Ok(backend.backward(x_hat, &d_layers))
}

/// Guard inside the channel-normalization square root.
const NORM_EPS: f64 = 1e-10;

fn normalize_channelwise<T: Scalar>(act: &Array4<T>) -> Array4<T> {
    let (k, c, h, w) = act.dim();
    let mut out = act.clone();
    for ki in 0..k {
        for y in 0..h {
            for x in 0..w {
                let mut ss = NORM_EPS;
                for ci in 0..c {
                    let v = act[[ki, ci, y, x]].as_f64();
                    ss += v * v;
                }
                let r = T::from_f64(1.0 / ss.sqrt());
                for ci in 0..c {
                    out[[ki, ci, y, x]] = act[[ki, ci, y, x]] * r;
                }
            }
        }
    }
    out
}

/// Unweighted perceptual patch distance: for each layer, unit-normalize the
/// activations channel-wise, take the squared weighted channel distance, and
/// average it over spatial positions; sum over layers, average over frames.
pub fn lpips_distance<T: Scalar>(
    x_hat: &Array4<T>,
    x_target: &Array4<T>,
    backend: &dyn FeatureBackend<T>,
) -> f64 {
    assert_eq!(x_hat.dim(), x_target.dim(), "shape mismatch");
    let frames = x_hat.dim().0 as f64;
    let fa = backend.forward(x_hat);
    let fb = backend.forward(x_target);
    let mut total = 0.0f64;
    for (l, (a, b)) in fa.iter().zip(fb.iter()).enumerate() {
        let wl = backend.layer_weights(l);
        let na = normalize_channelwise(a);
        let nb = normalize_channelwise(b);
        let (k, c, h, w) = na.dim();
        let mut layer_acc = 0.0f64;
        for ki in 0..k {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        let d = wl[ci].as_f64()
                            * (na[[ki, ci, y, x]].as_f64() - nb[[ki, ci, y, x]].as_f64());
                        layer_acc += d * d;
                    }
                }
            }
        }
        total += layer_acc / (h * w) as f64;
    }
    total / frames
}

/// `lambda_lpips * lpips_distance`.
pub fn lpips_loss<T: Scalar>(
    x_hat: &Array4<T>,
    x_target: &Array4<T>,
    backend: Option<&dyn FeatureBackend<T>>,
    w: &LossWeights,
) -> Result<f64> {
    if w.lambda_lpips == 0.0 {
        return Ok(0.0);
    }
    let backend = backend
        .ok_or_else(|| Error::Config("lpips loss requested without a feature backend".into()))?;
    Ok(w.lambda_lpips * lpips_distance(x_hat, x_target, backend))
}

/// Gradient of [`lpips_loss`] with respect to `x_hat`.
pub fn lpips_loss_backward<T: Scalar>(
    x_hat: &Array4<T>,
    x_target: &Array4<T>,
    backend: Option<&dyn FeatureBackend<T>>,
    w: &LossWeights,
) -> Result<Array4<T>> {
    if w.lambda_lpips == 0.0 {
        return Ok(Array4::zeros(x_hat.raw_dim()));
    }
    let backend = backend
        .ok_or_else(|| Error::Config("lpips loss requested without a feature backend".into()))?;
    let frames = x_hat.dim().0 as f64;
    let fa = backend.forward(x_hat);
    let fb = backend.forward(x_target);
    let mut d_layers = Vec::with_capacity(fa.len());
    for (l, (a, b)) in fa.iter().zip(fb.iter()).enumerate() {
        let wl = backend.layer_weights(l);
        let na = normalize_channelwise(a);
        let nb = normalize_channelwise(b);
        let (k, c, h, w_sp) = na.dim();
        let spatial = (h * w_sp) as f64;
        let mut d_raw = Array4::<T>::zeros(a.raw_dim());
        for ki in 0..k {
            for y in 0..h {
                for x in 0..w_sp {
                    // d loss / d normalized activation.
                    let mut d_norm = vec![0.0f64; c];
                    for ci in 0..c {
                        let wv = wl[ci].as_f64();
                        let diff = na[[ki, ci, y, x]].as_f64() - nb[[ki, ci, y, x]].as_f64();
                        d_norm[ci] =
                            w.lambda_lpips * 2.0 * wv * wv * diff / (spatial * frames);
                    }
                    // Through y_hat = y / r with r = sqrt(sum y^2 + eps):
                    // dy = (d_norm - y_hat * <d_norm, y_hat>) / r.
                    let mut ss = NORM_EPS;
                    for ci in 0..c {
                        let v = a[[ki, ci, y, x]].as_f64();
                        ss += v * v;
                    }
                    let r = ss.sqrt();
                    let mut dot = 0.0f64;
                    for ci in 0..c {
                        dot += d_norm[ci] * na[[ki, ci, y, x]].as_f64();
                    }
                    for ci in 0..c {
                        let dv = (d_norm[ci] - na[[ki, ci, y, x]].as_f64() * dot) / r;
                        d_raw[[ki, ci, y, x]] = T::from_f64(dv);
                    }
                }
            }
        }
        d_layers.push(d_raw);
    }
    Ok(backend.backward(x_hat, &d_layers))
}

/// Sum the four (already weighted) components into a [`LossReport`].
///
/// A non-finite component is a [`Error::Numeric`] naming the offender.
pub fn total_loss(diff: f64, pix: f64, perc: f64, lpips: f64) -> Result<LossReport> {
    for (name, v) in [("diff", diff), ("pix", pix), ("perc", perc), ("lpips", lpips)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss component {name} is {v}")));
        }
    }
    Ok(LossReport {
        total: diff + pix + perc + lpips,
        diff,
        pix,
        perc,
        lpips,
    })
}

/// Stack the masked frames of `x` into a `[K, C, H, W]` tensor
/// (K = masked count, original frame order preserved).
pub fn select_masked_frames<T: Scalar>(x: &Array4<T>, mask: &MaskVector) -> Array4<T> {
    let (_, c, h, w) = x.dim();
    let idx = mask.masked_indices();
    let mut out = Array4::<T>::zeros((idx.len(), c, h, w));
    for (k, &i) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), k)
            .assign(&x.index_axis(ndarray::Axis(0), i));
    }
    out
}

/// Scatter a `[K, C, H, W]` masked-frame gradient back to full `[T, C, H, W]`
/// shape (zeros at unmasked frames).
pub fn scatter_masked_frames<T: Scalar>(
    d_sel: &Array4<T>,
    mask: &MaskVector,
    full_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let mut out = Array4::<T>::zeros(full_dim);
    for (k, &i) in mask.masked_indices().iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&d_sel.index_axis(ndarray::Axis(0), k));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Array4::zeros(dim);
        for v in a.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        a
    }

    #[test]
    fn diffusion_loss_basics() {
        let mask = MaskVector::from_masked_indices(3, &[1]).unwrap();
        let eps = rand4((3, 1, 4, 4), 1);
        assert_eq!(diffusion_loss(&eps, &eps, &mask), 0.0);
        // eps = 0, eps_hat = c on masked frames -> c^2.
        let zero = Array4::<f64>::zeros((3, 1, 4, 4));
        let c = Array4::<f64>::from_elem((3, 1, 4, 4), 0.7);
        assert!((diffusion_loss(&zero, &c, &mask) - 0.49).abs() < 1e-12);
    }

    #[test]
    fn diffusion_loss_matches_bruteforce() {
        let mask = MaskVector::from_masked_indices(5, &[1, 3]).unwrap();
        let eps = rand4((5, 2, 3, 3), 2);
        let eps_hat = rand4((5, 2, 3, 3), 3);
        let got = diffusion_loss(&eps, &eps_hat, &mask);
        // Independent elementwise recomputation.
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in [1usize, 3] {
            for c in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        let d = eps[[i, c, y, x]] - eps_hat[[i, c, y, x]];
                        acc += d * d;
                        n += 1;
                    }
                }
            }
        }
        assert!((got - acc / n as f64).abs() <= 1e-12);
    }

    #[test]
    fn diffusion_backward_matches_fd() {
        let mask = MaskVector::from_masked_indices(3, &[1]).unwrap();
        let eps = rand4((3, 1, 3, 3), 4);
        let mut eps_hat = rand4((3, 1, 3, 3), 5);
        let d = diffusion_loss_backward(&eps, &eps_hat, &mask);
        let h = 1e-6;
        for idx in [[1usize, 0, 0, 0], [1, 0, 2, 2], [0, 0, 1, 1]] {
            let orig = eps_hat[idx];
            eps_hat[idx] = orig + h;
            let lp = diffusion_loss(&eps, &eps_hat, &mask);
            eps_hat[idx] = orig - h;
            let lm = diffusion_loss(&eps, &eps_hat, &mask);
            eps_hat[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - d[idx]).abs() < 1e-8, "fd {fd} vs {}", d[idx]);
        }
    }

    #[test]
    fn pixel_loss_closed_forms() {
        let w = LossWeights {
            lambda_mse: 1.0,
            lambda_l1: 1.0,
            ..Default::default()
        };
        let a = Array4::<f64>::from_elem((1, 1, 4, 4), 0.5);
        let b = Array4::<f64>::zeros((1, 1, 4, 4));
        assert!((pixel_loss(&a, &b, &w) - 0.75).abs() < 1e-12);
        assert_eq!(pixel_loss(&a, &a, &w), 0.0);
        // lambda_mse = 0 -> pure L1, equals brute-force mean absolute deviation.
        let w1 = LossWeights {
            lambda_mse: 0.0,
            lambda_l1: 1.0,
            ..Default::default()
        };
        let x = rand4((2, 1, 3, 3), 6);
        let y = rand4((2, 1, 3, 3), 7);
        let want: f64 =
            x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        assert!((pixel_loss(&x, &y, &w1) - want).abs() < 1e-12);
    }

    #[test]
    fn pixel_l1_scaling_is_linear() {
        let x = rand4((2, 1, 3, 3), 8);
        let y = rand4((2, 1, 3, 3), 9);
        let base = LossWeights {
            lambda_mse: 0.0,
            lambda_l1: 1.0,
            ..Default::default()
        };
        let double = LossWeights {
            lambda_l1: 2.0,
            ..base
        };
        assert!((pixel_loss(&x, &y, &double) - 2.0 * pixel_loss(&x, &y, &base)).abs() < 1e-12);
    }

    #[test]
    fn perceptual_loss_identity_and_gating() {
        let backend = ConvPyramidBackend::<f64>::new(1, 2);
        let x = rand4((2, 1, 8, 8), 10);
        let w = LossWeights::default();
        let v = perceptual_loss(&x, &x, Some(&backend), &w).unwrap();
        assert_eq!(v, 0.0);
        let y = rand4((2, 1, 8, 8), 11);
        let w0 = LossWeights {
            lambda_perc: 0.0,
            ..Default::default()
        };
        assert_eq!(perceptual_loss(&x, &y, None, &w0).unwrap(), 0.0);
        // Missing backend with a nonzero weight is a config error.
        assert!(matches!(
            perceptual_loss(&x, &y, None, &w),
            Err(Error::Config(_))
        ));
        // Deterministic across calls.
        let a = perceptual_loss(&x, &y, Some(&backend), &w).unwrap();
        let b = perceptual_loss(&x, &y, Some(&backend), &w).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn lpips_identity_zero_weights_and_oracle() {
        let mut backend = ConvPyramidBackend::<f64>::new(1, 3);
        let x = rand4((2, 1, 8, 8), 12);
        let y = rand4((2, 1, 8, 8), 13);
        assert_eq!(lpips_distance(&x, &x, &backend), 0.0);

        // Independent straightforward recomputation of the patch distance.
        let got = lpips_distance(&x, &y, &backend);
        let fa = backend.forward(&x);
        let fb = backend.forward(&y);
        let mut want = 0.0f64;
        for (l, (a, b)) in fa.iter().zip(fb.iter()).enumerate() {
            let wl = backend.layer_weights(l);
            let (k, c, h, w_sp) = a.dim();
            let mut layer = 0.0;
            for ki in 0..k {
                for yy in 0..h {
                    for xx in 0..w_sp {
                        let norm = |t: &Array4<f64>| -> Vec<f64> {
                            let mut ss = 1e-10;
                            for ci in 0..c {
                                ss += t[[ki, ci, yy, xx]] * t[[ki, ci, yy, xx]];
                            }
                            let r = ss.sqrt();
                            (0..c).map(|ci| t[[ki, ci, yy, xx]] / r).collect()
                        };
                        let na = norm(a);
                        let nb = norm(b);
                        for ci in 0..c {
                            let d = wl[ci] * (na[ci] - nb[ci]);
                            layer += d * d;
                        }
                    }
                }
            }
            want += layer / (h * w_sp) as f64;
        }
        want /= 2.0; // frame average
        assert!((got - want).abs() <= 1e-10, "got {got} want {want}");

        // All-zero layer weights collapse the distance to zero.
        backend.set_layer_weights(vec![
            Array1::zeros(8),
            Array1::zeros(16),
            Array1::zeros(32),
        ]);
        assert_eq!(lpips_distance(&x, &y, &backend), 0.0);
    }

    #[test]
    fn lpips_backward_matches_fd() {
        let backend = ConvPyramidBackend::<f64>::new(1, 4);
        let mut x = rand4((1, 1, 8, 8), 14);
        let y = rand4((1, 1, 8, 8), 15);
        let w = LossWeights {
            lambda_lpips: 0.5,
            ..Default::default()
        };
        let d = lpips_loss_backward(&x, &y, Some(&backend), &w).unwrap();
        let h = 1e-6;
        for idx in [[0usize, 0, 1, 1], [0, 0, 5, 2], [0, 0, 7, 7]] {
            let orig = x[idx];
            x[idx] = orig + h;
            let lp = lpips_loss(&x, &y, Some(&backend), &w).unwrap();
            x[idx] = orig - h;
            let lm = lpips_loss(&x, &y, Some(&backend), &w).unwrap();
            x[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - d[idx]).abs() < 1e-7, "fd {fd} vs {}", d[idx]);
        }
    }

    #[test]
    fn total_loss_additivity_and_nan_detection() {
        let r = total_loss(0.1, 0.2, 0.3, 0.4).unwrap();
        assert!((r.total - 1.0).abs() < 1e-15);
        let r = total_loss(0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(r.total, 0.0);
        // Disabled perceptual terms: total = diff + pix.
        let r = total_loss(0.5, 0.25, 0.0, 0.0).unwrap();
        assert!((r.total - (r.diff + r.pix)).abs() < 1e-15);
        match total_loss(0.1, f64::NAN, 0.0, 0.0) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("pix"), "message: {msg}"),
            other => panic!("expected NumericError, got {other:?}"),
        }
    }

    #[test]
    fn select_scatter_roundtrip() {
        let x = rand4((5, 2, 3, 3), 16);
        let mask = MaskVector::from_masked_indices(5, &[1, 3]).unwrap();
        let sel = select_masked_frames(&x, &mask);
        assert_eq!(sel.dim(), (2, 2, 3, 3));
        assert_eq!(sel.index_axis(ndarray::Axis(0), 0), x.index_axis(ndarray::Axis(0), 1));
        let back = scatter_masked_frames(&sel, &mask, x.dim());
        for i in 0..5 {
            if mask.is_masked(i) {
                assert_eq!(
                    back.index_axis(ndarray::Axis(0), i),
                    x.index_axis(ndarray::Axis(0), i)
                );
            } else {
                assert!(back.index_axis(ndarray::Axis(0), i).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn nonnegative_on_random_inputs() {
        let backend = ConvPyramidBackend::<f64>::new(1, 5);
        let w = LossWeights::default();
        for seed in 0..10u64 {
            let x = rand4((2, 1, 8, 8), 100 + seed);
            let y = rand4((2, 1, 8, 8), 200 + seed);
            assert!(pixel_loss(&x, &y, &w) >= 0.0);
            assert!(perceptual_loss(&x, &y, Some(&backend), &w).unwrap() >= 0.0);
            assert!(lpips_loss(&x, &y, Some(&backend), &w).unwrap() >= 0.0);
        }
    }
}
