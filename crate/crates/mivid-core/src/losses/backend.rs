//! Perceptual feature backends.
//!
//! The default backend is a small fixed conv pyramid with deterministically
//! seeded, untrained weights: a perceptual *proxy*, not comparable to
//! published feature-distance numbers. Anything implementing
//! [`FeatureBackend`] can stand in for it, including adapters around
//! externally trained feature extractors.

use ndarray::{Array1, Array4, Array5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::ops::{conv3d_backward, conv3d_forward, gelu_backward, gelu_forward, ConvSpec};
use crate::tensor::{sample_uniform, Scalar};

/// Multi-scale feature extractor with an input-gradient path, so perceptual
/// losses stay differentiable with respect to the predicted frames.
///
/// `forward` consumes a frame batch `[K, C, H, W]` and yields one activation
/// tensor per layer; `backward` is the vector-Jacobian product mapping
/// per-layer activation gradients back to an input gradient.
pub trait FeatureBackend<T: Scalar> {
    /// Identity string recorded in reports (name, seed, layer count).
    fn id(&self) -> String;
    fn num_layers(&self) -> usize;
    fn forward(&self, x: &Array4<T>) -> Vec<Array4<T>>;
    fn backward(&self, x: &Array4<T>, d_layers: &[Array4<T>]) -> Array4<T>;
    /// Per-channel weights `w_l` used by the perceptual patch distance.
    fn layer_weights(&self, layer: usize) -> Array1<T>;
}

/// Seed of the default backend instance.
pub const DEFAULT_BACKEND_SEED: u64 = 0x6d69_7669;

/// Channel widths of the pyramid levels.
const PYRAMID_CHANNELS: [usize; 3] = [8, 16, 32];

/// Fixed, seeded, untrained conv pyramid: three per-frame 3x3 convolutions
/// with GELU, the deeper two at stride 2.
pub struct ConvPyramidBackend<T: Scalar> {
    seed: u64,
    in_channels: usize,
    convs: Vec<(Array5<T>, Array1<T>, ConvSpec)>,
    weights: Vec<Array1<T>>,
}

impl<T: Scalar> ConvPyramidBackend<T> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut weights = Vec::new();
        let mut c_in = in_channels;
        for (l, &c_out) in PYRAMID_CHANNELS.iter().enumerate() {
            let spec = ConvSpec::frame3(if l == 0 { 1 } else { 2 });
            let fan_in = c_in * spec.kernel.0 * spec.kernel.1 * spec.kernel.2;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut w = Array5::<T>::zeros((c_out, c_in, spec.kernel.0, spec.kernel.1, spec.kernel.2));
            for v in w.iter_mut() {
                *v = sample_uniform(&mut rng, -bound, bound);
            }
            convs.push((w, Array1::<T>::zeros(c_out), spec));
            weights.push(Array1::<T>::ones(c_out));
            c_in = c_out;
        }
        Self {
            seed,
            in_channels,
            convs,
            weights,
        }
    }

    /// Default instance for a given frame channel count.
    pub fn with_default_seed(in_channels: usize) -> Self {
        Self::new(in_channels, DEFAULT_BACKEND_SEED)
    }

    /// Replace the per-layer channel weights (testing / calibration hook).
    pub fn set_layer_weights(&mut self, weights: Vec<Array1<T>>) {
        assert_eq!(weights.len(), self.convs.len());
        self.weights = weights;
    }

    fn forward_cached(
        &self,
        x: &Array4<T>,
    ) -> (Vec<Array4<T>>, Vec<(crate::model::ops::ConvCache<T>, Array4<T>)>) {
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for (w, b, spec) in &self.convs {
            let (pre, cache) = conv3d_forward(&cur, w, b, *spec);
            let act = gelu_forward(&pre);
            caches.push((cache, pre));
            cur = act.clone();
            acts.push(act);
        }
        (acts, caches)
    }
}

impl<T: Scalar> FeatureBackend<T> for ConvPyramidBackend<T> {
    fn id(&self) -> String {
        format!(
            "conv_pyramid_v1(seed={:#x},c_in={},layers={})",
            self.seed,
            self.in_channels,
            self.convs.len()
        )
    }

    fn num_layers(&self) -> usize {
        self.convs.len()
    }

    fn forward(&self, x: &Array4<T>) -> Vec<Array4<T>> {
        self.forward_cached(x).0
    }

    fn backward(&self, x: &Array4<T>, d_layers: &[Array4<T>]) -> Array4<T> {
        assert_eq!(d_layers.len(), self.convs.len());
        let (_, caches) = self.forward_cached(x);
        let mut carried: Option<Array4<T>> = None;
        for l in (0..self.convs.len()).rev() {
            let mut d_act = d_layers[l].clone();
            if let Some(c) = carried {
                d_act.zip_mut_with(&c, |a, b| *a = *a + *b);
            }
            let (cache, pre) = &caches[l];
            let d_pre = gelu_backward(pre, &d_act);
            let (d_in, _, _) = conv3d_backward(cache, &self.convs[l].0, &d_pre);
            carried = Some(d_in);
        }
        carried.expect("at least one layer")
    }

    fn layer_weights(&self, layer: usize) -> Array1<T> {
        self.weights[layer].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn deterministic_construction() {
        let a = ConvPyramidBackend::<f32>::new(1, 7);
        let b = ConvPyramidBackend::<f32>::new(1, 7);
        assert_eq!(a.id(), b.id());
        for ((wa, _, _), (wb, _, _)) in a.convs.iter().zip(b.convs.iter()) {
            assert_eq!(wa, wb);
        }
    }

    #[test]
    fn forward_shapes_shrink_spatially() {
        let backend = ConvPyramidBackend::<f32>::new(3, 1);
        let x = Array4::<f32>::zeros((2, 3, 16, 16));
        let acts = backend.forward(&x);
        assert_eq!(acts.len(), 3);
        assert_eq!(acts[0].dim(), (2, 8, 16, 16));
        assert_eq!(acts[1].dim(), (2, 16, 8, 8));
        assert_eq!(acts[2].dim(), (2, 32, 4, 4));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let backend = ConvPyramidBackend::<f64>::new(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = Array4::<f64>::zeros((1, 1, 8, 8));
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        // Probe objective: sum of act * probe over all layers.
        let probes: Vec<Array4<f64>> = backend
            .forward(&x)
            .iter()
            .map(|a| {
                let mut p = Array4::zeros(a.raw_dim());
                for v in p.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                p
            })
            .collect();
        let loss = |x: &Array4<f64>| -> f64 {
            backend
                .forward(x)
                .iter()
                .zip(&probes)
                .map(|(a, p)| a.iter().zip(p.iter()).map(|(u, v)| u * v).sum::<f64>())
                .sum()
        };
        let d_in = backend.backward(&x, &probes);
        let eps = 1e-6;
        for idx in [[0usize, 0, 0, 0], [0, 0, 3, 5], [0, 0, 7, 7]] {
            let orig = x[idx];
            x[idx] = orig + eps;
            let lp = loss(&x);
            x[idx] = orig - eps;
            let lm = loss(&x);
            x[idx] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - d_in[idx]).abs() < 1e-6, "fd {fd} vs {}", d_in[idx]);
        }
    }
}
