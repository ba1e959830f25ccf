//! Adam with bias correction, operating on the model's named-tensor
//! structure so the optimizer state checkpoints alongside the parameters.

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Scalar;

/// Numerical-stability offset in the denominator.
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update of a single tensor.
///
/// `step` is the 1-based update count. A non-finite gradient aborts with a
/// [`Error::Numeric`] naming the tensor before any state is touched.
pub fn adam_update_tensor<T: Scalar>(
    name: &str,
    param: &mut ArrayViewMutD<'_, T>,
    grad: &ArrayViewD<'_, T>,
    m: &mut ArrayViewMutD<'_, T>,
    v: &mut ArrayViewMutD<'_, T>,
    lr_t: f64,
    betas: (f64, f64),
    eps_stab: f64,
    step: usize,
) -> Result<()> {
    assert!(step >= 1, "Adam step counter is 1-based");
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient in tensor {name}")));
    }
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let b1t = T::from_f64(b1);
    let b2t = T::from_f64(b2);
    let ob1 = T::from_f64(1.0 - b1);
    let ob2 = T::from_f64(1.0 - b2);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let lr = T::from_f64(lr_t);
    let eps = T::from_f64(eps_stab);
    for ((p, g), (mm, vv)) in param
        .iter_mut()
        .zip(grad.iter())
        .zip(m.iter_mut().zip(v.iter_mut()))
    {
        *mm = b1t * *mm + ob1 * *g;
        *vv = b2t * *vv + ob2 * *g * *g;
        let m_hat = *mm * inv_bc1;
        let v_hat = *vv * inv_bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Apply one Adam step across all model tensors.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    m: &mut ModelParams<T>,
    v: &mut ModelParams<T>,
    lr_t: f64,
    betas: (f64, f64),
    eps_stab: f64,
    step: usize,
) -> Result<()> {
    let gv = grads.named_views();
    let mut pv = params.named_views_mut();
    let mut mv = m.named_views_mut();
    let mut vv = v.named_views_mut();
    for i in 0..pv.len() {
        let name = gv[i].0.clone();
        adam_update_tensor(
            &name,
            &mut pv[i].1,
            &gv[i].1,
            &mut mv[i].1,
            &mut vv[i].1,
            lr_t,
            betas,
            eps_stab,
            step,
        )?;
    }
    Ok(())
}
