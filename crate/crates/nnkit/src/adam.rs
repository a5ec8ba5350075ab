use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Adam optimizer state with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }
}

/// One Adam update of every parameter. Fails without touching anything if
/// a gradient is non-finite or shapes disagree.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Vec<T>], state: &mut AdamState<T>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NnError::Config(format!(
            "adam: {} grads / {} moments for {} params",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, (g, p)) in grads.iter().zip(params.iter()).enumerate() {
        if g.len() != p.1.numel() || state.m[i].len() != g.len() {
            return Err(NnError::Shape {
                op: "adam_step",
                left: p.1.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
            return Err(NnError::Numerical(format!(
                "non-finite gradient {} at {}[{pos}] (step {})",
                g[pos],
                p.0,
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(state.beta1);
    let b2 = T::from_f64_lossy(state.beta2);
    let c1 = T::from_f64_lossy(1.0 - state.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - state.beta2.powi(t));
    let lr = T::from_f64_lossy(state.lr);
    let eps = T::from_f64_lossy(state.eps);
    let one = T::one();
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
