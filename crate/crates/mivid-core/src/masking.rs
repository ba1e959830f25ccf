//! Frame-masking strategies: random, motion-guided, curriculum, and their
//! hybrid OR-combination, plus mask application.
//!
//! Masks are per-frame binary vectors. The first and last frame of a segment
//! are never masked — they are the conditioning context the model denoises
//! against. `hybrid_mask` draws the three strategies in a fixed order
//! (random, motion, curriculum) from a single generator, so a test can replay
//! them individually from a cloned generator and verify the OR.

use ndarray::Array4;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{sample_standard_normal, Scalar};
use crate::videodata::VideoSegment;

/// Which strategies set a given mask bit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StrategyTags {
    pub random: bool,
    pub motion: bool,
    pub curriculum: bool,
}

impl StrategyTags {
    pub fn any(&self) -> bool {
        self.random || self.motion || self.curriculum
    }

    fn or(self, other: Self) -> Self {
        Self {
            random: self.random || other.random,
            motion: self.motion || other.motion,
            curriculum: self.curriculum || other.curriculum,
        }
    }
}

/// Per-frame binary mask over a segment (true = masked) with provenance of
/// which strategy set each bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    bits: Vec<bool>,
    tags: Vec<StrategyTags>,
}

impl MaskVector {
    /// All-unmasked vector of length `t`.
    pub fn empty(t: usize) -> Self {
        Self {
            bits: vec![false; t],
            tags: vec![StrategyTags::default(); t],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn tags(&self) -> &[StrategyTags] {
        &self.tags
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.bits[index]
    }

    /// Number of masked frames.
    pub fn masked_count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Indices of masked frames, ascending.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    /// True when no intermediate frame is masked.
    pub fn no_intermediate_masked(&self) -> bool {
        self.masked_count() == 0
    }

    /// Bitwise OR, merging strategy tags.
    pub fn or(&self, other: &MaskVector) -> MaskVector {
        assert_eq!(self.len(), other.len(), "mask length mismatch");
        MaskVector {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
            tags: self
                .tags
                .iter()
                .zip(&other.tags)
                .map(|(a, b)| a.or(*b))
                .collect(),
        }
    }

    /// Construct from explicit intermediate indices (endpoints rejected).
    pub fn from_masked_indices(t: usize, indices: &[usize]) -> Result<Self> {
        let mut mask = Self::empty(t);
        for &i in indices {
            if i == 0 || i + 1 >= t {
                return Err(Error::Config(format!(
                    "cannot mask endpoint frame {i} of a {t}-frame segment"
                )));
            }
            if i >= t {
                return Err(Error::Config(format!("mask index {i} out of range for T={t}")));
            }
            mask.bits[i] = true;
        }
        Ok(mask)
    }

    fn set(&mut self, index: usize, tag: StrategyTags) {
        self.bits[index] = true;
        self.tags[index] = self.tags[index].or(tag);
    }
}

/// Curriculum ramp shape for the masking rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ramp {
    Linear,
    Cosine,
}

/// What masked frames are replaced with by [`apply_mask`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    GaussianNoise,
    Constant,
}

/// Parameters of the masking strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    /// Independent per-frame probability of the random strategy.
    pub p_r: f64,
    /// Scale of the motion-proportional probabilities (expected motion-masked
    /// frame count when no clamping occurs).
    pub p_m: f64,
    /// Curriculum rate at epoch 0.
    pub p_min: f64,
    /// Curriculum rate at epoch `e_max`.
    pub p_max: f64,
    /// Final epoch of the curriculum ramp.
    pub e_max: usize,
    pub ramp: Ramp,
    pub fill: Fill,
    pub constant_value: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            p_r: 0.1,
            p_m: 1.0,
            p_min: 0.1,
            p_max: 0.5,
            e_max: 100,
            ramp: Ramp::Cosine,
            fill: Fill::GaussianNoise,
            constant_value: 0.5,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_r) {
            return Err(Error::Config(format!("mask.p_r must be in [0,1], got {}", self.p_r)));
        }
        if self.p_m < 0.0 || !self.p_m.is_finite() {
            return Err(Error::Config(format!("mask.p_m must be >= 0, got {}", self.p_m)));
        }
        if !(0.0 <= self.p_min && self.p_min <= self.p_max && self.p_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= p_min <= p_max <= 1, got p_min={} p_max={}",
                self.p_min, self.p_max
            )));
        }
        if self.e_max < 1 {
            return Err(Error::Config("mask.e_max must be >= 1".into()));
        }
        if !self.constant_value.is_finite() {
            return Err(Error::Config("mask.constant_value must be finite".into()));
        }
        Ok(())
    }
}

/// Bounded re-sampling attempts before `hybrid_mask` force-masks the center.
const HYBRID_MAX_RETRIES: usize = 8;

fn bernoulli_draw<R: Rng>(rng: &mut R, p: f64) -> bool {
    // One u64 draw per decision regardless of p, so strategy replay stays aligned.
    rng.gen::<f64>() < p
}

/// Mask each intermediate frame independently with probability `p_r`.
/// Endpoints are never masked.
pub fn random_mask<R: Rng>(t: usize, p_r: f64, rng: &mut R) -> MaskVector {
    let mut mask = MaskVector::empty(t);
    let tag = StrategyTags { random: true, ..Default::default() };
    for i in 1..t.saturating_sub(1) {
        if bernoulli_draw(rng, p_r) {
            mask.set(i, tag);
        }
    }
    mask
}

/// L2 motion intensity between consecutive frames: `delta[k]` is the distance
/// between frame `k+1` and frame `k`, for `k = 0..T-1`.
pub fn motion_deltas(segment: &VideoSegment) -> Vec<f64> {
    let t = segment.len();
    let mut deltas = Vec::with_capacity(t - 1);
    for k in 1..t {
        let a = segment.frames.index_axis(ndarray::Axis(0), k);
        let b = segment.frames.index_axis(ndarray::Axis(0), k - 1);
        let ss: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| {
                let d = (*x - *y) as f64;
                d * d
            })
            .sum();
        deltas.push(ss.sqrt());
    }
    deltas
}

/// Mask intermediate frames proportionally to the motion they carry:
/// frame `i` is masked with probability `clamp(p_m * delta_i / sum(delta), 0, 1)`.
///
/// A static segment (all deltas zero) falls back to the uniform probability
/// `p_m / (T-2)` so the expected masked count keeps its scale.
pub fn motion_mask<R: Rng>(segment: &VideoSegment, p_m: f64, rng: &mut R) -> MaskVector {
    let t = segment.len();
    let deltas = motion_deltas(segment);
    let total: f64 = deltas.iter().sum();
    let mut mask = MaskVector::empty(t);
    let tag = StrategyTags { motion: true, ..Default::default() };
    let fallback = (p_m / (t as f64 - 2.0)).clamp(0.0, 1.0);
    for i in 1..t - 1 {
        let p = if total > 0.0 {
            // deltas[i-1] is the change from frame i-1 to frame i.
            (p_m * deltas[i - 1] / total).clamp(0.0, 1.0)
        } else {
            fallback
        };
        if bernoulli_draw(rng, p) {
            mask.set(i, tag);
        }
    }
    mask
}

/// Overall masking rate at epoch `e`, ramped from `p_min` to `p_max`.
///
/// `e > e_max` is clamped with a warning.
pub fn curriculum_rate(e: usize, cfg: &MaskConfig) -> f64 {
    let e = if e > cfg.e_max {
        log::warn!("curriculum epoch {e} > e_max {}, clamping", cfg.e_max);
        cfg.e_max
    } else {
        e
    };
    let frac = e as f64 / cfg.e_max as f64;
    match cfg.ramp {
        Ramp::Linear => cfg.p_min + (cfg.p_max - cfg.p_min) * frac,
        Ramp::Cosine => {
            cfg.p_min + (cfg.p_max - cfg.p_min) * (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0
        }
    }
}

/// Mask intermediate frames Bernoulli(`curriculum_rate(e)`).
pub fn curriculum_mask<R: Rng>(t: usize, e: usize, cfg: &MaskConfig, rng: &mut R) -> MaskVector {
    let p = curriculum_rate(e, cfg);
    let mut mask = MaskVector::empty(t);
    let tag = StrategyTags { curriculum: true, ..Default::default() };
    for i in 1..t - 1 {
        if bernoulli_draw(rng, p) {
            mask.set(i, tag);
        }
    }
    mask
}

/// OR-combination of the random, motion, and curriculum masks.
///
/// If the combined mask has no intermediate bit set, it is re-sampled a
/// bounded number of times; after that the center frame is force-masked so a
/// training step always has something to reconstruct (the forced bit carries
/// no strategy tag).
pub fn hybrid_mask<R: Rng>(
    segment: &VideoSegment,
    e: usize,
    cfg: &MaskConfig,
    rng: &mut R,
) -> MaskVector {
    let t = segment.len();
    for _ in 0..=HYBRID_MAX_RETRIES {
        let m = random_mask(t, cfg.p_r, rng)
            .or(&motion_mask(segment, cfg.p_m, rng))
            .or(&curriculum_mask(t, e, cfg, rng));
        if !m.no_intermediate_masked() {
            return m;
        }
    }
    let mut m = MaskVector::empty(t);
    m.bits[t / 2] = true;
    m
}

/// Result of replacing masked frames of a segment.
#[derive(Debug, Clone)]
pub struct MaskedSegment<T: Scalar> {
    /// Frames with masked positions replaced by noise or a constant.
    pub masked: Array4<T>,
    /// The original frames (reconstruction target at masked positions).
    pub target: Array4<T>,
    pub mask: MaskVector,
}

/// Replace masked frames with the configured fill; unmasked frames are
/// copied bit-identically. The target tensor is the original frames.
pub fn apply_mask<T: Scalar, R: Rng>(
    segment: &VideoSegment,
    mask: &MaskVector,
    cfg: &MaskConfig,
    rng: &mut R,
) -> MaskedSegment<T> {
    assert_eq!(mask.len(), segment.len(), "mask length must equal T");
    let target = segment.frames.mapv(|v| T::from_f64(v as f64));
    let mut masked = target.clone();
    for (i, mut frame) in masked.outer_iter_mut().enumerate() {
        if !mask.is_masked(i) {
            continue;
        }
        match cfg.fill {
            Fill::GaussianNoise => {
                for v in frame.iter_mut() {
                    *v = sample_standard_normal(rng);
                }
            }
            Fill::Constant => {
                let c = T::from_f64(cfg.constant_value);
                frame.fill(c);
            }
        }
    }
    MaskedSegment {
        masked,
        target,
        mask: mask.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_segment(t: usize, value: f32) -> VideoSegment {
        let frames = Array4::from_elem((t, 1, 8, 8), value);
        VideoSegment::new(frames, "static".into(), (0..t).collect()).unwrap()
    }

    fn moving_segment(t: usize) -> VideoSegment {
        let mut frames = Array4::zeros((t, 1, 8, 8));
        for k in 0..t {
            frames[[k, 0, 2, (k + 1) % 8]] = 1.0;
        }
        VideoSegment::new(frames, "moving".into(), (0..t).collect()).unwrap()
    }

    #[test]
    fn random_mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m0 = random_mask(7, 0.0, &mut rng);
        assert_eq!(m0.masked_count(), 0);
        let m1 = random_mask(7, 1.0, &mut rng);
        assert_eq!(m1.masked_indices(), vec![1, 2, 3, 4, 5]);
        assert!(!m1.is_masked(0) && !m1.is_masked(6));
    }

    #[test]
    fn random_mask_binomial_statistics() {
        // Oracle: masked count ~ Binomial(5, 0.5); the mean over N draws must
        // land within 3 sigma of 2.5.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000usize;
        let total: usize = (0..n).map(|_| random_mask(7, 0.5, &mut rng).masked_count()).sum();
        let mean = total as f64 / n as f64;
        let sigma = (5.0f64 * 0.25).sqrt() / (n as f64).sqrt();
        assert!(
            (mean - 2.5).abs() <= 3.0 * sigma,
            "mean {mean} outside 2.5 +/- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn motion_mask_static_fallback_fires() {
        // Static segment: sum of deltas is zero, so the uniform fallback
        // p_m/(T-2) applies. With p_m = T-2 that probability is 1.
        let seg = const_segment(7, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = motion_mask(&seg, 5.0, &mut rng);
        assert_eq!(m.masked_indices(), vec![1, 2, 3, 4, 5]);
        // Statistical check at p_m=1 -> p=0.2 per frame.
        let n = 10_000usize;
        let total: usize = (0..n).map(|_| motion_mask(&seg, 1.0, &mut rng).masked_count()).sum();
        let mean = total as f64 / n as f64;
        let p = 1.0f64 / 5.0;
        let sigma = (5.0 * p * (1.0 - p)).sqrt() / (n as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn motion_mask_concentrated_motion() {
        // All motion sits between frames 2 and 3; only frame 3 can be masked.
        let mut frames = Array4::zeros((7, 1, 8, 8));
        for k in 3..7 {
            frames[[k, 0, 4, 4]] = 1.0;
        }
        let seg = VideoSegment::new(frames, "jump".into(), (0..7).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let m = motion_mask(&seg, 1.0, &mut rng);
            for i in m.masked_indices() {
                assert_eq!(i, 3, "only the moving frame may be masked");
            }
        }
    }

    #[test]
    fn motion_mask_zero_scale() {
        let seg = moving_segment(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(motion_mask(&seg, 0.0, &mut rng).masked_count(), 0);
        }
    }

    #[test]
    fn curriculum_rate_endpoints_and_midpoint() {
        let mut cfg = MaskConfig {
            p_min: 0.1,
            p_max: 0.5,
            e_max: 100,
            ramp: Ramp::Linear,
            ..Default::default()
        };
        assert_eq!(curriculum_rate(0, &cfg), 0.1);
        assert_eq!(curriculum_rate(100, &cfg), 0.5);
        assert!((curriculum_rate(50, &cfg) - 0.3).abs() < 1e-15);
        cfg.ramp = Ramp::Cosine;
        assert_eq!(curriculum_rate(0, &cfg), 0.1);
        assert!((curriculum_rate(100, &cfg) - 0.5).abs() < 1e-15);
        // cosine midpoint: p_min + (p_max-p_min)/2
        assert!((curriculum_rate(50, &cfg) - 0.3).abs() < 1e-12);
        // beyond e_max clamps
        assert!((curriculum_rate(250, &cfg) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn curriculum_statistics() {
        let cfg = MaskConfig {
            p_min: 0.2,
            p_max: 0.8,
            e_max: 10,
            ramp: Ramp::Linear,
            ..Default::default()
        };
        let p = curriculum_rate(5, &cfg); // 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000usize;
        let total: usize =
            (0..n).map(|_| curriculum_mask(7, 5, &cfg, &mut rng).masked_count()).sum();
        let mean = total as f64 / n as f64;
        let expect = 5.0 * p;
        let sigma = (5.0f64 * p * (1.0 - p)).sqrt() / (n as f64).sqrt();
        assert!((mean - expect).abs() <= 3.0 * sigma, "mean {mean} vs {expect}");
    }

    #[test]
    fn hybrid_is_or_of_components() {
        let seg = moving_segment(7);
        let cfg = MaskConfig::default();
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut replay = rng.clone();
            let hybrid = hybrid_mask(&seg, 3, &cfg, &mut rng);
            // Replay the strategies in the documented order from the clone.
            let mut expected = MaskVector::empty(7);
            for _ in 0..=HYBRID_MAX_RETRIES {
                expected = random_mask(7, cfg.p_r, &mut replay)
                    .or(&motion_mask(&seg, cfg.p_m, &mut replay))
                    .or(&curriculum_mask(7, 3, &cfg, &mut replay));
                if !expected.no_intermediate_masked() {
                    break;
                }
            }
            assert_eq!(hybrid, expected, "seed {seed}");
        }
    }

    #[test]
    fn hybrid_forces_center_when_all_zero() {
        let seg = const_segment(7, 0.5);
        let cfg = MaskConfig {
            p_r: 0.0,
            p_m: 0.0,
            p_min: 0.0,
            p_max: 0.0,
            e_max: 1,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = hybrid_mask(&seg, 0, &cfg, &mut rng);
        assert_eq!(m.masked_indices(), vec![3]);
        assert!(!m.tags()[3].any(), "forced bit carries no strategy tag");
    }

    #[test]
    fn hybrid_or_domination() {
        let seg = moving_segment(7);
        let cfg = MaskConfig {
            p_r: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = hybrid_mask(&seg, 0, &cfg, &mut rng);
        assert_eq!(m.masked_indices(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn apply_mask_identity_when_empty() {
        let seg = moving_segment(5);
        let cfg = MaskConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out: MaskedSegment<f32> = apply_mask(&seg, &MaskVector::empty(5), &cfg, &mut rng);
        assert_eq!(out.masked, seg.frames);
        assert_eq!(out.target, seg.frames);
    }

    #[test]
    fn apply_mask_constant_fill() {
        let seg = moving_segment(5);
        let cfg = MaskConfig {
            fill: Fill::Constant,
            constant_value: 0.5,
            ..Default::default()
        };
        let mask = MaskVector::from_masked_indices(5, &[2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out: MaskedSegment<f32> = apply_mask(&seg, &mask, &cfg, &mut rng);
        assert!(out
            .masked
            .index_axis(ndarray::Axis(0), 2)
            .iter()
            .all(|&v| v == 0.5));
        for i in [0usize, 1, 3, 4] {
            assert_eq!(
                out.masked.index_axis(ndarray::Axis(0), i),
                seg.frames.index_axis(ndarray::Axis(0), i)
            );
        }
    }

    #[test]
    fn apply_mask_gaussian_moments() {
        // Oracle: sample mean within 3/sqrt(N) of 0, sample variance within
        // 3*sqrt(2/N) of 1.
        let frames = Array4::from_elem((3, 1, 100, 100), 0.25f32);
        let seg = VideoSegment::new(frames, "big".into(), vec![0, 1, 2]).unwrap();
        let cfg = MaskConfig::default();
        let mask = MaskVector::from_masked_indices(3, &[1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out: MaskedSegment<f64> = apply_mask(&seg, &mask, &cfg, &mut rng);
        let vals: Vec<f64> = out.masked.index_axis(ndarray::Axis(0), 1).iter().copied().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 3.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() <= 3.0 * (2.0 / n).sqrt(), "var {var}");
    }

    proptest! {
        #[test]
        fn endpoints_never_masked(seed in 0u64..500, t in 3usize..10, e in 0usize..20) {
            let seg = moving_segment(t);
            let cfg = MaskConfig { e_max: 20, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = hybrid_mask(&seg, e, &cfg, &mut rng);
            prop_assert!(!m.is_masked(0));
            prop_assert!(!m.is_masked(t - 1));
            prop_assert!(!m.no_intermediate_masked());
        }

        #[test]
        fn curriculum_monotone_nondecreasing(
            p_min in 0.0f64..0.5,
            span in 0.0f64..0.5,
            e_max in 1usize..50,
        ) {
            for ramp in [Ramp::Linear, Ramp::Cosine] {
                let cfg = MaskConfig {
                    p_min,
                    p_max: p_min + span,
                    e_max,
                    ramp,
                    ..Default::default()
                };
                let mut prev = -1.0f64;
                for e in 0..=e_max {
                    let r = curriculum_rate(e, &cfg);
                    prop_assert!(r >= prev - 1e-15, "rate decreased at e={e}");
                    prev = r;
                }
            }
        }

        #[test]
        fn apply_mask_preserves_unmasked(seed in 0u64..100) {
            let seg = moving_segment(6);
            let cfg = MaskConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = hybrid_mask(&seg, 1, &cfg, &mut rng);
            let out: MaskedSegment<f32> = apply_mask(&seg, &mask, &cfg, &mut rng);
            for i in 0..6 {
                if !mask.is_masked(i) {
                    prop_assert_eq!(
                        out.masked.index_axis(ndarray::Axis(0), i),
                        seg.frames.index_axis(ndarray::Axis(0), i)
                    );
                }
            }
        }
    }
}
