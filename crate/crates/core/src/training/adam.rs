use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Adam moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|(r, c)| (Tensor::zeros(r, c), Tensor::zeros(r, c)))
            .unzip();
        AdamState {
            step: 0,
            beta1,
            beta2,
            eps,
            m,
            v,
        }
    }
}

/// One bias-corrected Adam update, applied in place.
///
/// Every gradient is checked before any parameter moves; a non-finite entry
/// aborts with the offending parameter's name.
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NanGradient {
                param: names.get(k).cloned().unwrap_or_else(|| format!("#{k}")),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - state.beta1), T::of(1.0 - state.beta2));
    let corr1 = T::of(1.0 - state.beta1.powi(t));
    let corr2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(state.eps));
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
