//! The noise-prediction network: a 3D convolutional encoder, a temporal
//! attention bottleneck, a skip-connected decoder, and timestep conditioning.
//!
//! The latent and the visible-context frames are concatenated channel-wise at
//! the input (masked context positions zero-filled). Downsampling is spatial
//! only, so the temporal length survives to the attention block and the
//! output. The output head is zero-initialized: an untrained model predicts
//! zero noise.
//!
//! Reverse-mode differentiation is hand-written: `forward_with_cache`
//! records what each layer needs and `backward` replays the chain, returning
//! a gradient container with the same named-tensor structure as the
//! parameters themselves.

pub mod ops;

use ndarray::{Array1, Array2, Array4, Array5, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::masking::MaskVector;
use crate::tensor::{sample_uniform, Scalar};
use ops::{
    attention_backward, attention_forward, concat_channels, conv3d_backward, conv3d_forward,
    gelu_backward, gelu_forward, gelu_grad_scalar, gelu_scalar, linear_forward, split_channels,
    upsample2x_backward, upsample2x_forward, AttnCache, ConvCache, ConvSpec,
};

/// Architecture hyperparameters. Activation is GELU throughout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Frame channels C (1 or 3).
    pub channels: usize,
    /// Channels at the first encoder level; doubled per level.
    pub base_channels: usize,
    /// Encoder/decoder depth; `levels - 1` spatial downsamplings.
    pub levels: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            base_channels: 16,
            levels: 3,
            heads: 4,
            time_embed_dim: 64,
        }
    }
}

impl ModelConfig {
    /// Channel width at encoder level `i`.
    pub fn channels_at(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Channel width at the attention bottleneck.
    pub fn bottleneck_channels(&self) -> usize {
        self.channels_at(self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "model channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.base_channels == 0 || self.levels == 0 {
            return Err(Error::Config("base_channels and levels must be >= 1".into()));
        }
        if self.heads == 0 || self.bottleneck_channels() % self.heads != 0 {
            return Err(Error::Config(format!(
                "bottleneck channels {} not divisible by heads {}",
                self.bottleneck_channels(),
                self.heads
            )));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams<T: Scalar> {
    pub weight: Array5<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LinearParams<T: Scalar> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LevelParams<T: Scalar> {
    pub conv_a: ConvParams<T>,
    pub conv_b: ConvParams<T>,
}

/// Encoder output: bottleneck features plus the per-level skip tensors
/// consumed by the decoder. This is the conditioning the reverse process
/// sees at every step.
#[derive(Debug, Clone)]
pub struct ConditioningFeatures<T: Scalar> {
    pub bottleneck: Array4<T>,
    pub skips: Vec<Array4<T>>,
}

/// Named tensor collection for the whole network.
///
/// Doubles as the gradient / optimizer-moment container: [`zeros_like`]
/// produces a same-shaped structure and the `named_views` accessors give a
/// stable name -> tensor ordering shared by checkpoints and the optimizer.
///
/// [`zeros_like`]: ModelParams::zeros_like
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    config: ModelConfig,
    pub conv_in: ConvParams<T>,
    pub time_mlp1: LinearParams<T>,
    pub time_mlp2: LinearParams<T>,
    pub time_proj: LinearParams<T>,
    pub enc: Vec<LevelParams<T>>,
    pub down: Vec<ConvParams<T>>,
    pub attn_q: LinearParams<T>,
    pub attn_k: LinearParams<T>,
    pub attn_v: LinearParams<T>,
    pub attn_o: LinearParams<T>,
    pub dec_up: Vec<ConvParams<T>>,
    pub dec: Vec<LevelParams<T>>,
    pub head: ConvParams<T>,
}

fn init_conv<T: Scalar>(
    rng: &mut ChaCha8Rng,
    c_out: usize,
    c_in: usize,
    kernel: (usize, usize, usize),
    zero: bool,
) -> ConvParams<T> {
    let mut weight = Array5::<T>::zeros((c_out, c_in, kernel.0, kernel.1, kernel.2));
    if !zero {
        let bound = 1.0 / ((c_in * kernel.0 * kernel.1 * kernel.2) as f64).sqrt();
        for v in weight.iter_mut() {
            *v = sample_uniform(rng, -bound, bound);
        }
    }
    ConvParams {
        weight,
        bias: Array1::zeros(c_out),
    }
}

fn init_linear<T: Scalar>(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize) -> LinearParams<T> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let mut weight = Array2::<T>::zeros((d_out, d_in));
    for v in weight.iter_mut() {
        *v = sample_uniform(rng, -bound, bound);
    }
    LinearParams {
        weight,
        bias: Array1::zeros(d_out),
    }
}

/// Initialize parameters deterministically under `seed`: fan-in-scaled
/// uniform conv and projection weights, zero biases, zero output head.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = cfg.levels;
    let k3 = (3, 3, 3);

    let conv_in = init_conv(&mut rng, cfg.channels_at(0), 2 * cfg.channels, k3, false);
    let de = cfg.time_embed_dim;
    let time_mlp1 = init_linear(&mut rng, de, de);
    let time_mlp2 = init_linear(&mut rng, de, de);
    let time_proj = init_linear(&mut rng, cfg.channels_at(0), de);

    let mut enc = Vec::with_capacity(l);
    let mut down = Vec::with_capacity(l.saturating_sub(1));
    for i in 0..l {
        let c = cfg.channels_at(i);
        enc.push(LevelParams {
            conv_a: init_conv(&mut rng, c, c, k3, false),
            conv_b: init_conv(&mut rng, c, c, k3, false),
        });
        if i + 1 < l {
            down.push(init_conv(&mut rng, cfg.channels_at(i + 1), c, k3, false));
        }
    }

    let d = cfg.bottleneck_channels();
    let attn_q = init_linear(&mut rng, d, d);
    let attn_k = init_linear(&mut rng, d, d);
    let attn_v = init_linear(&mut rng, d, d);
    let attn_o = init_linear(&mut rng, d, d);

    let mut dec_up = Vec::with_capacity(l.saturating_sub(1));
    let mut dec = Vec::with_capacity(l.saturating_sub(1));
    for i in 0..l.saturating_sub(1) {
        let c = cfg.channels_at(i);
        dec_up.push(init_conv(&mut rng, c, cfg.channels_at(i + 1), k3, false));
        dec.push(LevelParams {
            conv_a: init_conv(&mut rng, c, 2 * c, k3, false),
            conv_b: init_conv(&mut rng, c, c, k3, false),
        });
    }

    let head = init_conv(&mut rng, cfg.channels, cfg.channels_at(0), k3, true);

    Ok(ModelParams {
        config: cfg.clone(),
        conv_in,
        time_mlp1,
        time_mlp2,
        time_proj,
        enc,
        down,
        attn_q,
        attn_k,
        attn_v,
        attn_o,
        dec_up,
        dec,
        head,
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Immutable views of every tensor with its stable name, in the fixed
    /// traversal order shared with [`named_views_mut`](Self::named_views_mut).
    pub fn named_views(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewD<'_, T>)> = Vec::new();
        out.push(("conv_in.weight".into(), self.conv_in.weight.view().into_dyn()));
        out.push(("conv_in.bias".into(), self.conv_in.bias.view().into_dyn()));
        out.push(("time_mlp1.weight".into(), self.time_mlp1.weight.view().into_dyn()));
        out.push(("time_mlp1.bias".into(), self.time_mlp1.bias.view().into_dyn()));
        out.push(("time_mlp2.weight".into(), self.time_mlp2.weight.view().into_dyn()));
        out.push(("time_mlp2.bias".into(), self.time_mlp2.bias.view().into_dyn()));
        out.push(("time_proj.weight".into(), self.time_proj.weight.view().into_dyn()));
        out.push(("time_proj.bias".into(), self.time_proj.bias.view().into_dyn()));
        for (i, lv) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.conv_a.weight"), lv.conv_a.weight.view().into_dyn()));
            out.push((format!("enc{i}.conv_a.bias"), lv.conv_a.bias.view().into_dyn()));
            out.push((format!("enc{i}.conv_b.weight"), lv.conv_b.weight.view().into_dyn()));
            out.push((format!("enc{i}.conv_b.bias"), lv.conv_b.bias.view().into_dyn()));
        }
        for (i, dv) in self.down.iter().enumerate() {
            out.push((format!("down{i}.weight"), dv.weight.view().into_dyn()));
            out.push((format!("down{i}.bias"), dv.bias.view().into_dyn()));
        }
        for (name, lp) in [
            ("attn.q", &self.attn_q),
            ("attn.k", &self.attn_k),
            ("attn.v", &self.attn_v),
            ("attn.o", &self.attn_o),
        ] {
            out.push((format!("{name}.weight"), lp.weight.view().into_dyn()));
            out.push((format!("{name}.bias"), lp.bias.view().into_dyn()));
        }
        for (i, (up, lv)) in self.dec_up.iter().zip(self.dec.iter()).enumerate() {
            out.push((format!("dec{i}.up.weight"), up.weight.view().into_dyn()));
            out.push((format!("dec{i}.up.bias"), up.bias.view().into_dyn()));
            out.push((format!("dec{i}.conv_a.weight"), lv.conv_a.weight.view().into_dyn()));
            out.push((format!("dec{i}.conv_a.bias"), lv.conv_a.bias.view().into_dyn()));
            out.push((format!("dec{i}.conv_b.weight"), lv.conv_b.weight.view().into_dyn()));
            out.push((format!("dec{i}.conv_b.bias"), lv.conv_b.bias.view().into_dyn()));
        }
        out.push(("head.weight".into(), self.head.weight.view().into_dyn()));
        out.push(("head.bias".into(), self.head.bias.view().into_dyn()));
        out
    }

    /// Mutable counterpart of [`named_views`](Self::named_views); identical order.
    pub fn named_views_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, T>)> = Vec::new();
        out.push(("conv_in.weight".into(), self.conv_in.weight.view_mut().into_dyn()));
        out.push(("conv_in.bias".into(), self.conv_in.bias.view_mut().into_dyn()));
        out.push(("time_mlp1.weight".into(), self.time_mlp1.weight.view_mut().into_dyn()));
        out.push(("time_mlp1.bias".into(), self.time_mlp1.bias.view_mut().into_dyn()));
        out.push(("time_mlp2.weight".into(), self.time_mlp2.weight.view_mut().into_dyn()));
        out.push(("time_mlp2.bias".into(), self.time_mlp2.bias.view_mut().into_dyn()));
        out.push(("time_proj.weight".into(), self.time_proj.weight.view_mut().into_dyn()));
        out.push(("time_proj.bias".into(), self.time_proj.bias.view_mut().into_dyn()));
        for (i, lv) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc{i}.conv_a.weight"), lv.conv_a.weight.view_mut().into_dyn()));
            out.push((format!("enc{i}.conv_a.bias"), lv.conv_a.bias.view_mut().into_dyn()));
            out.push((format!("enc{i}.conv_b.weight"), lv.conv_b.weight.view_mut().into_dyn()));
            out.push((format!("enc{i}.conv_b.bias"), lv.conv_b.bias.view_mut().into_dyn()));
        }
        for (i, dv) in self.down.iter_mut().enumerate() {
            out.push((format!("down{i}.weight"), dv.weight.view_mut().into_dyn()));
            out.push((format!("down{i}.bias"), dv.bias.view_mut().into_dyn()));
        }
        for (name, lp) in [
            ("attn.q", &mut self.attn_q),
            ("attn.k", &mut self.attn_k),
            ("attn.v", &mut self.attn_v),
            ("attn.o", &mut self.attn_o),
        ] {
            out.push((format!("{name}.weight"), lp.weight.view_mut().into_dyn()));
            out.push((format!("{name}.bias"), lp.bias.view_mut().into_dyn()));
        }
        for (i, (up, lv)) in self.dec_up.iter_mut().zip(self.dec.iter_mut()).enumerate() {
            out.push((format!("dec{i}.up.weight"), up.weight.view_mut().into_dyn()));
            out.push((format!("dec{i}.up.bias"), up.bias.view_mut().into_dyn()));
            out.push((format!("dec{i}.conv_a.weight"), lv.conv_a.weight.view_mut().into_dyn()));
            out.push((format!("dec{i}.conv_a.bias"), lv.conv_a.bias.view_mut().into_dyn()));
            out.push((format!("dec{i}.conv_b.weight"), lv.conv_b.weight.view_mut().into_dyn()));
            out.push((format!("dec{i}.conv_b.bias"), lv.conv_b.bias.view_mut().into_dyn()));
        }
        out.push(("head.weight".into(), self.head.weight.view_mut().into_dyn()));
        out.push(("head.bias".into(), self.head.bias.view_mut().into_dyn()));
        out
    }

    /// Same structure with every tensor zeroed (gradient/moment container).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut v) in z.named_views_mut() {
            v.fill(T::zero());
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.named_views().iter().map(|(_, v)| v.len()).sum()
    }

    /// `self += other * factor`, tensor-wise.
    pub fn add_scaled(&mut self, other: &Self, factor: T) {
        let ov = other.named_views();
        for ((_, mut a), (_, b)) in self.named_views_mut().into_iter().zip(ov) {
            a.zip_mut_with(&b, |x, y| *x = *x + *y * factor);
        }
    }

    /// Multiply every tensor by `factor`.
    pub fn scale(&mut self, factor: T) {
        for (_, mut v) in self.named_views_mut() {
            v.mapv_inplace(|x| x * factor);
        }
    }

    /// Global L2 norm over all tensors.
    pub fn l2_norm(&self) -> f64 {
        self.named_views()
            .iter()
            .map(|(_, v)| v.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// True when every tensor element is finite.
    pub fn all_finite(&self) -> bool {
        self.named_views().iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Sinusoidal embedding of timestep `t` at geometric frequencies, passed
    /// through the learned two-layer GELU projection.
    pub fn time_embed(&self, t: usize, sched: &NoiseSchedule) -> Result<Array1<T>> {
        Ok(self.time_embed_cached(t, sched)?.emb)
    }

    fn time_embed_cached(&self, t: usize, sched: &NoiseSchedule) -> Result<TimeCache<T>> {
        if t < 1 || t > sched.len() {
            return Err(Error::Step(format!(
                "timestep {t} outside 1..={} for time embedding",
                sched.len()
            )));
        }
        let dim = self.config.time_embed_dim;
        let half = dim / 2;
        let mut sin = Array1::<T>::zeros(dim);
        for i in 0..half {
            let freq = (-(i as f64) * (10_000f64).ln() / half as f64).exp();
            let ang = t as f64 * freq;
            sin[i] = T::from_f64(ang.sin());
            sin[half + i] = T::from_f64(ang.cos());
        }
        let h1 = vec_linear(&self.time_mlp1, &sin);
        let a1 = h1.mapv(gelu_scalar);
        let emb = vec_linear(&self.time_mlp2, &a1);
        Ok(TimeCache { sin, h1, a1, emb })
    }

    /// Extract conditioning features from the latent and the visible frames.
    ///
    /// `z_t` and `context` are concatenated channel-wise; the time embedding
    /// is projected to the first level's channels and broadcast-added after
    /// the first convolution. Skips are captured before each downsampling.
    pub fn encode(
        &self,
        z_t: &Array4<T>,
        context: &Array4<T>,
        t_embed: &Array1<T>,
    ) -> Result<ConditioningFeatures<T>> {
        let (features, _) = self.encode_cached(z_t, context, t_embed)?;
        Ok(features)
    }

    fn check_input(&self, z_t: &Array4<T>, context: &Array4<T>) -> Result<()> {
        if z_t.dim() != context.dim() {
            return Err(Error::Shape(format!(
                "latent {:?} vs context {:?}",
                z_t.dim(),
                context.dim()
            )));
        }
        let (_t, c, h, w) = z_t.dim();
        if c != self.config.channels {
            return Err(Error::Shape(format!(
                "input channels {c} != configured {}",
                self.config.channels
            )));
        }
        let div = 1usize << (self.config.levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} not divisible by 2^(levels-1) = {div}"
            )));
        }
        Ok(())
    }

    fn encode_cached(
        &self,
        z_t: &Array4<T>,
        context: &Array4<T>,
        t_embed: &Array1<T>,
    ) -> Result<(ConditioningFeatures<T>, EncCache<T>)> {
        self.check_input(z_t, context)?;
        if t_embed.len() != self.config.time_embed_dim {
            return Err(Error::Shape(format!(
                "time embedding length {} != {}",
                t_embed.len(),
                self.config.time_embed_dim
            )));
        }
        let l = self.config.levels;
        let x = concat_channels(z_t, context);
        let (mut y, cc_in) = conv3d_forward(&x, &self.conv_in.weight, &self.conv_in.bias, ConvSpec::same3());
        // Timestep conditioning: per-channel bias from the projected embedding.
        let inj = vec_linear(&self.time_proj, t_embed);
        for (c, mut plane) in y.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let b = inj[c];
            plane.mapv_inplace(|v| v + b);
        }

        let mut levels = Vec::with_capacity(l);
        let mut skips = Vec::with_capacity(l - 1);
        let mut cur = y;
        for i in 0..l {
            let lv = &self.enc[i];
            let (pre_a, ca) = conv3d_forward(&cur, &lv.conv_a.weight, &lv.conv_a.bias, ConvSpec::same3());
            let aa = gelu_forward(&pre_a);
            let (pre_b, cb) = conv3d_forward(&aa, &lv.conv_b.weight, &lv.conv_b.bias, ConvSpec::same3());
            let bb = gelu_forward(&pre_b);
            let down = if i + 1 < l {
                skips.push(bb.clone());
                let dv = &self.down[i];
                let (pre_d, cd) = conv3d_forward(&bb, &dv.weight, &dv.bias, ConvSpec::down3());
                let dd = gelu_forward(&pre_d);
                cur = dd;
                Some((cd, pre_d))
            } else {
                cur = bb;
                None
            };
            levels.push(EncLevelCache {
                conv_a: ca,
                pre_a,
                conv_b: cb,
                pre_b,
                down,
            });
        }
        Ok((
            ConditioningFeatures {
                bottleneck: cur,
                skips,
            },
            EncCache {
                conv_in: cc_in,
                inj_emb: t_embed.clone(),
                levels,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over the temporal tokens at
    /// each spatial location, with residual connection. Output shape equals
    /// input shape.
    pub fn temporal_attention(&self, h: &Array4<T>) -> Result<Array4<T>> {
        Ok(self.temporal_attention_cached(h)?.0)
    }

    fn temporal_attention_cached(&self, h: &Array4<T>) -> Result<(Array4<T>, AttnCache<T>)> {
        let d = h.dim().1;
        if d % self.config.heads != 0 {
            return Err(Error::Config(format!(
                "attention dim {d} not divisible by {} heads",
                self.config.heads
            )));
        }
        Ok(attention_forward(
            h,
            &self.attn_q.weight,
            &self.attn_q.bias,
            &self.attn_k.weight,
            &self.attn_k.bias,
            &self.attn_v.weight,
            &self.attn_v.bias,
            &self.attn_o.weight,
            &self.attn_o.bias,
            self.config.heads,
        ))
    }

    /// Softmax attention rows for inspection: `[S, heads, T, T]`.
    pub fn attention_probs(&self, h: &Array4<T>) -> Result<Array4<T>> {
        Ok(self.temporal_attention_cached(h)?.1.probs)
    }

    /// Upsample level by level (nearest-neighbor then convolution),
    /// concatenating the matching skip at each level; the final head emits
    /// the noise estimate.
    pub fn decode(&self, attended: &ConditioningFeatures<T>) -> Result<Array4<T>> {
        Ok(self.decode_cached(attended)?.0)
    }

    fn decode_cached(
        &self,
        attended: &ConditioningFeatures<T>,
    ) -> Result<(Array4<T>, DecCache<T>)> {
        let l = self.config.levels;
        if attended.skips.len() != l - 1 {
            return Err(Error::Shape(format!(
                "expected {} skip tensors, got {}",
                l - 1,
                attended.skips.len()
            )));
        }
        let mut g = attended.bottleneck.clone();
        let mut levels = Vec::with_capacity(l - 1);
        for i in (0..l - 1).rev() {
            let up = upsample2x_forward(&g);
            let uv = &self.dec_up[i];
            let (pre_u, cu) = conv3d_forward(&up, &uv.weight, &uv.bias, ConvSpec::same3());
            let au = gelu_forward(&pre_u);
            let skip = &attended.skips[i];
            if skip.dim() != au.dim() {
                return Err(Error::Shape(format!(
                    "skip {i} has shape {:?}, decoder expects {:?}",
                    skip.dim(),
                    au.dim()
                )));
            }
            let cat = concat_channels(&au, skip);
            let lv = &self.dec[i];
            let (pre_a, ca) = conv3d_forward(&cat, &lv.conv_a.weight, &lv.conv_a.bias, ConvSpec::same3());
            let da = gelu_forward(&pre_a);
            let (pre_b, cb) = conv3d_forward(&da, &lv.conv_b.weight, &lv.conv_b.bias, ConvSpec::same3());
            let db = gelu_forward(&pre_b);
            levels.push(DecLevelCache {
                level: i,
                conv_up: cu,
                pre_u,
                conv_a: ca,
                pre_a,
                conv_b: cb,
                pre_b,
            });
            g = db;
        }
        let (eps, ch) = conv3d_forward(&g, &self.head.weight, &self.head.bias, ConvSpec::same3());
        Ok((eps, DecCache { levels, head: ch }))
    }

    /// Predict the noise content of `z_t`: zero-fill the masked context
    /// frames, embed `t`, then encode -> temporal attention -> decode.
    pub fn predict_noise(
        &self,
        z_t: &Array4<T>,
        context: &Array4<T>,
        mask: &MaskVector,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Array4<T>> {
        let ctx = zero_masked_frames(context, mask);
        let t_emb = self.time_embed(t, sched)?;
        let feats = self.encode(z_t, &ctx, &t_emb)?;
        let attended = ConditioningFeatures {
            bottleneck: self.temporal_attention(&feats.bottleneck)?,
            skips: feats.skips,
        };
        self.decode(&attended)
    }

    /// Forward pass that records everything [`backward`](Self::backward) needs.
    pub fn forward_with_cache(
        &self,
        z_t: &Array4<T>,
        context: &Array4<T>,
        mask: &MaskVector,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<(Array4<T>, ModelCache<T>)> {
        let ctx = zero_masked_frames(context, mask);
        let time = self.time_embed_cached(t, sched)?;
        let (feats, enc_cache) = self.encode_cached(z_t, &ctx, &time.emb)?;
        let (attended, attn_cache) = self.temporal_attention_cached(&feats.bottleneck)?;
        let features = ConditioningFeatures {
            bottleneck: attended,
            skips: feats.skips,
        };
        let (eps_hat, dec_cache) = self.decode_cached(&features)?;
        Ok((
            eps_hat,
            ModelCache {
                time,
                enc: enc_cache,
                attn: attn_cache,
                dec: dec_cache,
            },
        ))
    }

    /// Reverse-mode gradients of every parameter given `d_eps_hat`, the
    /// gradient of the loss with respect to the network output.
    pub fn backward(&self, cache: &ModelCache<T>, d_eps_hat: &Array4<T>) -> ModelParams<T> {
        let mut g = self.zeros_like();
        let l = self.config.levels;

        // Head.
        let (mut d_g, d_hw, d_hb) = conv3d_backward(&cache.dec.head, &self.head.weight, d_eps_hat);
        g.head.weight += &d_hw;
        g.head.bias += &d_hb;

        // Decoder levels, unwinding in reverse execution order.
        let mut d_skips: Vec<Option<Array4<T>>> = vec![None; l.saturating_sub(1)];
        for cache_lv in cache.dec.levels.iter().rev() {
            let i = cache_lv.level;
            let lv = &self.dec[i];
            let d_db = gelu_backward(&cache_lv.pre_b, &d_g);
            let (d_da, d_w, d_b) = conv3d_backward(&cache_lv.conv_b, &lv.conv_b.weight, &d_db);
            g.dec[i].conv_b.weight += &d_w;
            g.dec[i].conv_b.bias += &d_b;
            let d_pa = gelu_backward(&cache_lv.pre_a, &d_da);
            let (d_cat, d_w, d_b) = conv3d_backward(&cache_lv.conv_a, &lv.conv_a.weight, &d_pa);
            g.dec[i].conv_a.weight += &d_w;
            g.dec[i].conv_a.bias += &d_b;
            let c_first = self.config.channels_at(i);
            let (d_au, d_skip) = split_channels(&d_cat, c_first);
            d_skips[i] = Some(d_skip);
            let d_pu = gelu_backward(&cache_lv.pre_u, &d_au);
            let (d_up, d_w, d_b) = conv3d_backward(&cache_lv.conv_up, &self.dec_up[i].weight, &d_pu);
            g.dec_up[i].weight += &d_w;
            g.dec_up[i].bias += &d_b;
            d_g = upsample2x_backward(&d_up);
        }

        // Attention block.
        let agrads = attention_backward(
            &cache.attn,
            &self.attn_q.weight,
            &self.attn_k.weight,
            &self.attn_v.weight,
            &self.attn_o.weight,
            &d_g,
        );
        g.attn_q.weight += &agrads.d_wq;
        g.attn_q.bias += &agrads.d_bq;
        g.attn_k.weight += &agrads.d_wk;
        g.attn_k.bias += &agrads.d_bk;
        g.attn_v.weight += &agrads.d_wv;
        g.attn_v.bias += &agrads.d_bv;
        g.attn_o.weight += &agrads.d_wo;
        g.attn_o.bias += &agrads.d_bo;
        let mut d_bb = agrads.d_input;

        // Encoder levels, from the bottleneck back to the input.
        for i in (0..l).rev() {
            let lv = &self.enc[i];
            let cache_lv = &cache.enc.levels[i];
            if let Some((cd, pre_d)) = &cache_lv.down {
                // d_bb currently holds the gradient flowing into the *next*
                // level's input, i.e. through this level's downsampler.
                let d_pd = gelu_backward(pre_d, &d_bb);
                let (mut d_from_down, d_w, d_b) = conv3d_backward(cd, &self.down[i].weight, &d_pd);
                g.down[i].weight += &d_w;
                g.down[i].bias += &d_b;
                if let Some(d_skip) = &d_skips[i] {
                    d_from_down.zip_mut_with(d_skip, |a, b| *a = *a + *b);
                }
                d_bb = d_from_down;
            }
            let d_pb = gelu_backward(&cache_lv.pre_b, &d_bb);
            let (d_aa, d_w, d_b) = conv3d_backward(&cache_lv.conv_b, &lv.conv_b.weight, &d_pb);
            g.enc[i].conv_b.weight += &d_w;
            g.enc[i].conv_b.bias += &d_b;
            let d_pa = gelu_backward(&cache_lv.pre_a, &d_aa);
            let (d_in, d_w, d_b) = conv3d_backward(&cache_lv.conv_a, &lv.conv_a.weight, &d_pa);
            g.enc[i].conv_a.weight += &d_w;
            g.enc[i].conv_a.bias += &d_b;
            d_bb = d_in;
        }

        // Timestep injection: d_inj[c] sums over all positions of channel c.
        let c0 = self.config.channels_at(0);
        let mut d_inj = Array1::<T>::zeros(c0);
        for (c, plane) in d_bb.axis_iter(ndarray::Axis(1)).enumerate() {
            d_inj[c] = plane.sum();
        }
        // time_proj: inj = Wp emb + bp
        let d_emb = self.time_proj.weight.t().dot(&d_inj);
        g.time_proj.weight += &outer(&d_inj, &cache.time.emb);
        g.time_proj.bias += &d_inj;
        // time_mlp2: emb = W2 a1 + b2
        let d_a1 = self.time_mlp2.weight.t().dot(&d_emb);
        g.time_mlp2.weight += &outer(&d_emb, &cache.time.a1);
        g.time_mlp2.bias += &d_emb;
        // GELU between the MLP layers.
        let mut d_h1 = d_a1;
        for (dv, hv) in d_h1.iter_mut().zip(cache.time.h1.iter()) {
            *dv = *dv * gelu_grad_scalar(*hv);
        }
        g.time_mlp1.weight += &outer(&d_h1, &cache.time.sin);
        g.time_mlp1.bias += &d_h1;

        // First convolution; its input gradient is not needed.
        let (_, d_w, d_b) = conv3d_backward(&cache.enc.conv_in, &self.conv_in.weight, &d_bb);
        g.conv_in.weight += &d_w;
        g.conv_in.bias += &d_b;

        g
    }
}

impl<T: Scalar> NoisePredictor<T> for ModelParams<T> {
    fn predict_noise(
        &self,
        z_t: &Array4<T>,
        context: &Array4<T>,
        mask: &MaskVector,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Array4<T>> {
        ModelParams::predict_noise(self, z_t, context, mask, t, sched)
    }
}

/// Copy of `context` with masked frames zeroed (the `(1-M)` gate on the
/// conditioning input).
pub fn zero_masked_frames<T: Scalar>(context: &Array4<T>, mask: &MaskVector) -> Array4<T> {
    let mut ctx = context.clone();
    for (i, mut frame) in ctx.outer_iter_mut().enumerate() {
        if mask.is_masked(i) {
            frame.fill(T::zero());
        }
    }
    ctx
}

fn vec_linear<T: Scalar>(p: &LinearParams<T>, x: &Array1<T>) -> Array1<T> {
    p.weight.dot(x) + &p.bias
}

fn outer<T: Scalar>(a: &Array1<T>, b: &Array1<T>) -> Array2<T> {
    let mut out = Array2::<T>::zeros((a.len(), b.len()));
    for (i, av) in a.iter().enumerate() {
        for (j, bv) in b.iter().enumerate() {
            out[[i, j]] = *av * *bv;
        }
    }
    out
}

struct TimeCache<T: Scalar> {
    sin: Array1<T>,
    h1: Array1<T>,
    a1: Array1<T>,
    emb: Array1<T>,
}

struct EncLevelCache<T: Scalar> {
    conv_a: ConvCache<T>,
    pre_a: Array4<T>,
    conv_b: ConvCache<T>,
    pre_b: Array4<T>,
    down: Option<(ConvCache<T>, Array4<T>)>,
}

struct EncCache<T: Scalar> {
    conv_in: ConvCache<T>,
    #[allow(dead_code)]
    inj_emb: Array1<T>,
    levels: Vec<EncLevelCache<T>>,
}

struct DecLevelCache<T: Scalar> {
    level: usize,
    conv_up: ConvCache<T>,
    pre_u: Array4<T>,
    conv_a: ConvCache<T>,
    pre_a: Array4<T>,
    conv_b: ConvCache<T>,
    pre_b: Array4<T>,
}

struct DecCache<T: Scalar> {
    levels: Vec<DecLevelCache<T>>,
    head: ConvCache<T>,
}

/// Opaque forward-pass record consumed by [`ModelParams::backward`].
pub struct ModelCache<T: Scalar> {
    time: TimeCache<T>,
    enc: EncCache<T>,
    attn: AttnCache<T>,
    dec: DecCache<T>,
}
