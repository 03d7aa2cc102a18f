use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn optimizer_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.tensors.len() != params.len() || state.m.len() != params.len() {
        return Err(invalid("gradient/state count does not match parameters"));
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = &grads.tensors[i];
        if g.shape() != p.shape() {
            return Err(invalid(format!("gradient {i} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j] * scale;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Mean gradient and mean loss over `n` samples split into fixed-size
/// chunks. `f(range)` returns the gradient and loss of the mean over its
/// range; chunks are combined in index order, so the result does not depend
/// on how many workers evaluated them.
pub fn chunked_gradients<F>(params: &ParamStore, n: usize, chunk: usize, f: F) -> Result<(Grads, f64)>
where
    F: Fn(std::ops::Range<usize>) -> Result<(Grads, f64)> + Sync + Send,
{
    if n == 0 || chunk == 0 {
        return Err(invalid("empty batch or zero chunk size"));
    }
    let chunks = n.div_ceil(chunk);
    let parts = crate::par::map_indexed(chunks, |c| f(c * chunk..((c + 1) * chunk).min(n)));
    let mut total = Grads::zeros(params);
    let mut loss = 0.0;
    for (c, part) in parts.into_iter().enumerate() {
        let (g, l) = part?;
        let w = (((c + 1) * chunk).min(n) - c * chunk) as f64 / n as f64;
        total.accumulate(&g, w);
        loss += w * l;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((total, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row_vector(vals)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(vec![1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = Grads::zeros(&p);
        optimizer_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = store(vec![1.0, -2.0, 0.5]);
        let g = Grads { tensors: vec![Tensor::row_vector(vec![0.3, -1e-3, 4.0])] };
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut st = AdamState::new(&p);
        optimizer_step(&mut p, &g, &mut st, &cfg).unwrap();
        // After bias correction m = g and v = g^2 on the first step.
        for (j, (w0, gj)) in [1.0, -2.0, 0.5].iter().zip([0.3, -1e-3, 4.0]).enumerate() {
            let expect = w0 - 0.01 * gj / (f64::abs(gj) + 1e-8);
            assert!((p.tensors()[0].data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_rescales() {
        let mut p = store(vec![0.0]);
        let g = Grads { tensors: vec![Tensor::row_vector(vec![10.0])] };
        let cfg = AdamConfig { clip_norm: Some(1.0), ..AdamConfig::default() };
        let mut st = AdamState::new(&p);
        optimizer_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert!((st.m[0].data()[0] - 0.1).abs() < 1e-12);
    }
}
