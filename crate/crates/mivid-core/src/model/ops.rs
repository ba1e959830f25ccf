//! Differentiable layer primitives: 3D convolution (im2col + matmul), exact
//! GELU, token-matrix linear maps, nearest-neighbor upsampling, and
//! multi-head temporal attention. Each primitive has a forward that returns
//! the cache its backward needs; backwards return input gradients plus
//! parameter gradients where applicable.
//!
//! Tensors are `[T, C, H, W]` throughout. Convolutions never stride the
//! temporal axis.

use ndarray::{Array1, Array2, Array4, Array5};

use crate::tensor::Scalar;

/// Kernel/stride/padding of a convolution, `(t, h, w)` each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl ConvSpec {
    /// 3x3x3, stride 1, same padding.
    pub fn same3() -> Self {
        Self {
            kernel: (3, 3, 3),
            stride: (1, 1, 1),
            padding: (1, 1, 1),
        }
    }

    /// 3x3x3, spatial stride 2 (temporal stride stays 1), same padding.
    pub fn down3() -> Self {
        Self {
            kernel: (3, 3, 3),
            stride: (1, 2, 2),
            padding: (1, 1, 1),
        }
    }

    /// 1x3x3 per-frame convolution, stride `(1, s, s)`, spatial same padding.
    pub fn frame3(s: usize) -> Self {
        Self {
            kernel: (1, 3, 3),
            stride: (1, s, s),
            padding: (0, 1, 1),
        }
    }

    pub fn out_dims(&self, t: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let o = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
        (
            o(t, self.kernel.0, self.stride.0, self.padding.0),
            o(h, self.kernel.1, self.stride.1, self.padding.1),
            o(w, self.kernel.2, self.stride.2, self.padding.2),
        )
    }
}

/// What `conv3d_backward` needs from the forward pass.
pub struct ConvCache<T: Scalar> {
    col: Array2<T>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize, usize),
    spec: ConvSpec,
}

fn im2col<T: Scalar>(input: &Array4<T>, spec: ConvSpec) -> (Array2<T>, (usize, usize, usize)) {
    debug_assert!(input.is_standard_layout(), "im2col expects standard layout");
    let (tt, c, h, w) = input.dim();
    let (ot, oh, ow) = spec.out_dims(tt, h, w);
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let rows = c * kt * kh * kw;
    let cols = ot * oh * ow;
    let mut out = Array2::<T>::zeros((rows, cols));
    let src = input.as_slice().expect("standard layout");
    {
        let dst = out.as_slice_mut().expect("standard layout");
        let mut r = 0usize;
        for ci in 0..c {
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let row_base = r * cols;
                        for t_o in 0..ot {
                            let ti = (t_o * st + dt) as isize - pt as isize;
                            if ti < 0 || ti >= tt as isize {
                                continue;
                            }
                            let t_base = (ti as usize * c + ci) * h;
                            for y_o in 0..oh {
                                let yi = (y_o * sh + dy) as isize - ph as isize;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let in_row = (t_base + yi as usize) * w;
                                let out_row = row_base + (t_o * oh + y_o) * ow;
                                for x_o in 0..ow {
                                    let xi = (x_o * sw + dx) as isize - pw as isize;
                                    if xi < 0 || xi >= w as isize {
                                        continue;
                                    }
                                    dst[out_row + x_o] = src[in_row + xi as usize];
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
    (out, (ot, oh, ow))
}

fn col2im<T: Scalar>(
    dcol: &Array2<T>,
    in_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize, usize),
    spec: ConvSpec,
) -> Array4<T> {
    let (tt, c, h, w) = in_dim;
    let (ot, oh, ow) = out_hw;
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let cols = ot * oh * ow;
    let mut dinput = Array4::<T>::zeros(in_dim);
    let dst = dinput.as_slice_mut().expect("standard layout");
    let src = dcol.as_slice().expect("standard layout");
    let mut r = 0usize;
    for ci in 0..c {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let row_base = r * cols;
                    for t_o in 0..ot {
                        let ti = (t_o * st + dt) as isize - pt as isize;
                        if ti < 0 || ti >= tt as isize {
                            continue;
                        }
                        let t_base = (ti as usize * c + ci) * h;
                        for y_o in 0..oh {
                            let yi = (y_o * sh + dy) as isize - ph as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let in_row = (t_base + yi as usize) * w;
                            let out_row = row_base + (t_o * oh + y_o) * ow;
                            for x_o in 0..ow {
                                let xi = (x_o * sw + dx) as isize - pw as isize;
                                if xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                let di = in_row + xi as usize;
                                dst[di] = dst[di] + src[out_row + x_o];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    dinput
}

/// `[T,Cin,H,W] -> [T',Cout,H',W']` convolution. Weight is
/// `[Cout, Cin, kt, kh, kw]`.
pub fn conv3d_forward<T: Scalar>(
    input: &Array4<T>,
    weight: &Array5<T>,
    bias: &Array1<T>,
    spec: ConvSpec,
) -> (Array4<T>, ConvCache<T>) {
    let (tt, _c, h, w) = input.dim();
    let cout = weight.dim().0;
    let rows = weight.len() / cout;
    let (col, (ot, oh, ow)) = im2col(input, spec);
    let w_mat = weight
        .view()
        .into_shape_with_order((cout, rows))
        .expect("weight layout");
    let out_mat = w_mat.dot(&col); // [Cout, N]
    let mut out = Array4::<T>::zeros((ot, cout, oh, ow));
    {
        let dst = out.as_slice_mut().expect("standard layout");
        let src = out_mat.as_slice().expect("standard layout");
        let n = ot * oh * ow;
        let hw = oh * ow;
        for co in 0..cout {
            let b = bias[co];
            let src_base = co * n;
            for t_o in 0..ot {
                let dst_base = (t_o * cout + co) * hw;
                let src_row = src_base + t_o * hw;
                for i in 0..hw {
                    dst[dst_base + i] = src[src_row + i] + b;
                }
            }
        }
    }
    (
        out,
        ConvCache {
            col,
            in_dim: (tt, input.dim().1, h, w),
            out_hw: (ot, oh, ow),
            spec,
        },
    )
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv3d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    weight: &Array5<T>,
    d_out: &Array4<T>,
) -> (Array4<T>, Array5<T>, Array1<T>) {
    let (ot, cout, oh, ow) = d_out.dim();
    let n = ot * oh * ow;
    let hw = oh * ow;
    // Repack [T',Cout,H',W'] into the [Cout, N] matmul layout.
    let mut dout_mat = Array2::<T>::zeros((cout, n));
    {
        let dst = dout_mat.as_slice_mut().expect("standard layout");
        let src = d_out.as_slice().expect("standard layout");
        for co in 0..cout {
            let dst_base = co * n;
            for t_o in 0..ot {
                let src_base = (t_o * cout + co) * hw;
                let dst_row = dst_base + t_o * hw;
                dst[dst_row..dst_row + hw].copy_from_slice(&src[src_base..src_base + hw]);
            }
        }
    }
    let rows = weight.len() / cout;
    let w_mat = weight
        .view()
        .into_shape_with_order((cout, rows))
        .expect("weight layout");
    let dw_mat = dout_mat.dot(&cache.col.t());
    let d_weight = dw_mat
        .into_shape_with_order(weight.raw_dim())
        .expect("weight layout");
    let d_bias = dout_mat.sum_axis(ndarray::Axis(1));
    let dcol = w_mat.t().dot(&dout_mat);
    let d_input = col2im(&dcol, cache.in_dim, cache.out_hw, cache.spec);
    (d_input, d_weight, d_bias)
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    half * (T::one() + (x * inv_sqrt2).erf()) + x * inv_sqrt_2pi * (-half * x * x).exp()
}

pub fn gelu_forward<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(gelu_scalar)
}

/// `d_input` of GELU given its pre-activation input.
pub fn gelu_backward<T: Scalar>(x: &Array4<T>, d_out: &Array4<T>) -> Array4<T> {
    let mut d = d_out.clone();
    for (dv, xv) in d.iter_mut().zip(x.iter()) {
        *dv = *dv * gelu_grad_scalar(*xv);
    }
    d
}

/// Token linear map `y = x W^T + b`; `x` is `[N, Din]`, `W` is `[Dout, Din]`.
pub fn linear_forward<T: Scalar>(x: &Array2<T>, weight: &Array2<T>, bias: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(&weight.t());
    for mut row in y.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias.iter()) {
            *v = *v + *b;
        }
    }
    y
}

/// Gradients of the token linear map: `(d_x, d_weight, d_bias)`.
pub fn linear_backward<T: Scalar>(
    x: &Array2<T>,
    weight: &Array2<T>,
    d_y: &Array2<T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let d_x = d_y.dot(weight);
    let d_w = d_y.t().dot(x);
    let d_b = d_y.sum_axis(ndarray::Axis(0));
    (d_x, d_w, d_b)
}

/// Nearest-neighbor 2x spatial upsampling.
pub fn upsample2x_forward<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (t, c, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((t, c, 2 * h, 2 * w));
    for ((ti, ci, y, xx), v) in x.indexed_iter() {
        let v = *v;
        out[[ti, ci, 2 * y, 2 * xx]] = v;
        out[[ti, ci, 2 * y + 1, 2 * xx]] = v;
        out[[ti, ci, 2 * y, 2 * xx + 1]] = v;
        out[[ti, ci, 2 * y + 1, 2 * xx + 1]] = v;
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(d_out: &Array4<T>) -> Array4<T> {
    let (t, c, h2, w2) = d_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut d = Array4::<T>::zeros((t, c, h, w));
    for ((ti, ci, y, xx), v) in d_out.indexed_iter() {
        d[[ti, ci, y / 2, xx / 2]] = d[[ti, ci, y / 2, xx / 2]] + *v;
    }
    d
}

/// Channel-axis concatenation of two `[T,·,H,W]` tensors (standard layout).
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let cat =
        ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).expect("compatible shapes");
    if cat.is_standard_layout() {
        cat
    } else {
        cat.as_standard_layout().to_owned()
    }
}

/// Split a channel-gradient back into the two concatenated parts.
pub fn split_channels<T: Scalar>(d: &Array4<T>, c_first: usize) -> (Array4<T>, Array4<T>) {
    let a = d.slice(ndarray::s![.., ..c_first, .., ..]).to_owned();
    let b = d.slice(ndarray::s![.., c_first.., .., ..]).to_owned();
    (a, b)
}

/// Cache of a multi-head temporal-attention forward pass.
pub struct AttnCache<T: Scalar> {
    x_all: Array2<T>,
    q_all: Array2<T>,
    k_all: Array2<T>,
    v_all: Array2<T>,
    o_all: Array2<T>,
    /// Softmax rows per (spatial location, head): `[S, heads, T, T]`.
    pub probs: Array4<T>,
    dim: (usize, usize, usize, usize),
    heads: usize,
}

fn flatten_tokens<T: Scalar>(h: &Array4<T>) -> Array2<T> {
    let (t, d, hh, ww) = h.dim();
    let s = hh * ww;
    let mut x = Array2::<T>::zeros((s * t, d));
    for ((ti, di, y, xx), v) in h.indexed_iter() {
        x[[(y * ww + xx) * t + ti, di]] = *v;
    }
    x
}

fn unflatten_tokens<T: Scalar>(x: &Array2<T>, dim: (usize, usize, usize, usize)) -> Array4<T> {
    let (t, d, hh, ww) = dim;
    let mut out = Array4::<T>::zeros(dim);
    for ((ti, di, y, xx), v) in out.indexed_iter_mut() {
        *v = x[[(y * ww + xx) * t + ti, di]];
    }
    out
}

/// Scaled dot-product attention over the T temporal tokens at each spatial
/// location independently, with `heads` heads and a residual connection.
///
/// Projections are `[D, D]` weight matrices applied to tokens; output shape
/// equals input shape.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<T: Scalar>(
    h: &Array4<T>,
    wq: &Array2<T>,
    bq: &Array1<T>,
    wk: &Array2<T>,
    bk: &Array1<T>,
    wv: &Array2<T>,
    bv: &Array1<T>,
    wo: &Array2<T>,
    bo: &Array1<T>,
    heads: usize,
) -> (Array4<T>, AttnCache<T>) {
    let (t, d, hh, ww) = h.dim();
    assert!(d % heads == 0, "feature dim not divisible by heads");
    let dk = d / heads;
    let s = hh * ww;
    let inv_sqrt_dk = T::from_f64(1.0 / (dk as f64).sqrt());

    let x_all = flatten_tokens(h);
    let q_all = linear_forward(&x_all, wq, bq);
    let k_all = linear_forward(&x_all, wk, bk);
    let v_all = linear_forward(&x_all, wv, bv);
    let mut o_all = Array2::<T>::zeros((s * t, d));
    let mut probs = Array4::<T>::zeros((s, heads, t, t));

    for si in 0..s {
        let rows = si * t..(si + 1) * t;
        for m in 0..heads {
            let cols = m * dk..(m + 1) * dk;
            let q = q_all.slice(ndarray::s![rows.clone(), cols.clone()]);
            let k = k_all.slice(ndarray::s![rows.clone(), cols.clone()]);
            let v = v_all.slice(ndarray::s![rows.clone(), cols.clone()]);
            let mut scores = q.dot(&k.t());
            scores.mapv_inplace(|x| x * inv_sqrt_dk);
            // Row-wise softmax, max-shifted.
            for mut row in scores.rows_mut() {
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
            let o = scores.dot(&v);
            o_all
                .slice_mut(ndarray::s![rows.clone(), cols.clone()])
                .assign(&o);
            probs
                .slice_mut(ndarray::s![si, m, .., ..])
                .assign(&scores);
        }
    }

    let y_all = linear_forward(&o_all, wo, bo);
    let mut out = unflatten_tokens(&y_all, (t, d, hh, ww));
    out.zip_mut_with(h, |o, hv| *o = *o + *hv); // residual
    (
        out,
        AttnCache {
            x_all,
            q_all,
            k_all,
            v_all,
            o_all,
            probs,
            dim: (t, d, hh, ww),
            heads,
        },
    )
}

/// Parameter and input gradients of [`attention_forward`].
pub struct AttnGrads<T: Scalar> {
    pub d_input: Array4<T>,
    pub d_wq: Array2<T>,
    pub d_bq: Array1<T>,
    pub d_wk: Array2<T>,
    pub d_bk: Array1<T>,
    pub d_wv: Array2<T>,
    pub d_bv: Array1<T>,
    pub d_wo: Array2<T>,
    pub d_bo: Array1<T>,
}

pub fn attention_backward<T: Scalar>(
    cache: &AttnCache<T>,
    wq: &Array2<T>,
    wk: &Array2<T>,
    wv: &Array2<T>,
    wo: &Array2<T>,
    d_out: &Array4<T>,
) -> AttnGrads<T> {
    let (t, d, _hh, _ww) = cache.dim;
    let heads = cache.heads;
    let dk = d / heads;
    let s = cache.probs.dim().0;
    let inv_sqrt_dk = T::from_f64(1.0 / (dk as f64).sqrt());

    let d_y_all = flatten_tokens(d_out);
    let (mut d_o_all, d_wo, d_bo) = linear_backward(&cache.o_all, wo, &d_y_all);

    let mut d_q_all = Array2::<T>::zeros(cache.q_all.raw_dim());
    let mut d_k_all = Array2::<T>::zeros(cache.k_all.raw_dim());
    let mut d_v_all = Array2::<T>::zeros(cache.v_all.raw_dim());

    for si in 0..s {
        let rows = si * t..(si + 1) * t;
        for m in 0..heads {
            let cols = m * dk..(m + 1) * dk;
            let q = cache.q_all.slice(ndarray::s![rows.clone(), cols.clone()]);
            let k = cache.k_all.slice(ndarray::s![rows.clone(), cols.clone()]);
            let v = cache.v_all.slice(ndarray::s![rows.clone(), cols.clone()]);
            let p = cache.probs.slice(ndarray::s![si, m, .., ..]);
            let d_o = d_o_all.slice(ndarray::s![rows.clone(), cols.clone()]);

            let d_p = d_o.dot(&v.t());
            let d_v = p.t().dot(&d_o);
            // Softmax Jacobian applied row-wise.
            let mut d_scores = Array2::<T>::zeros((t, t));
            for i in 0..t {
                let mut dot = T::zero();
                for j in 0..t {
                    dot = dot + d_p[[i, j]] * p[[i, j]];
                }
                for j in 0..t {
                    d_scores[[i, j]] = p[[i, j]] * (d_p[[i, j]] - dot);
                }
            }
            d_scores.mapv_inplace(|x| x * inv_sqrt_dk);
            let d_q = d_scores.dot(&k);
            let d_k = d_scores.t().dot(&q);
            d_q_all
                .slice_mut(ndarray::s![rows.clone(), cols.clone()])
                .assign(&d_q);
            d_k_all
                .slice_mut(ndarray::s![rows.clone(), cols.clone()])
                .assign(&d_k);
            d_v_all
                .slice_mut(ndarray::s![rows.clone(), cols.clone()])
                .assign(&d_v);
        }
    }
    // Drop the borrow of o_all before reusing d_o_all storage.
    d_o_all.fill(T::zero());

    let (d_x_q, d_wq, d_bq) = linear_backward(&cache.x_all, wq, &d_q_all);
    let (d_x_k, d_wk, d_bk) = linear_backward(&cache.x_all, wk, &d_k_all);
    let (d_x_v, d_wv, d_bv) = linear_backward(&cache.x_all, wv, &d_v_all);
    let mut d_x = d_x_q;
    d_x.zip_mut_with(&d_x_k, |a, b| *a = *a + *b);
    d_x.zip_mut_with(&d_x_v, |a, b| *a = *a + *b);

    let mut d_input = unflatten_tokens(&d_x, cache.dim);
    d_input.zip_mut_with(d_out, |a, b| *a = *a + *b); // residual path

    AttnGrads {
        d_input,
        d_wq,
        d_bq,
        d_wk,
        d_bk,
        d_wv,
        d_bv,
        d_wo,
        d_bo,
    }
}
