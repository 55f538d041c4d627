use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// Apply one Adam update to every parameter using its gradient slot.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    for name in params.names() {
        if params.grad(name).is_none() {
            return Err(Error::MissingGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (name, p, g) in params.pairs_mut() {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if m.len() != p.len() || v.len() != p.len() {
            return Err(Error::Shape(format!("optimizer state for `{name}` has the wrong size")));
        }
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            md[k] = b1 * md[k] + (1.0 - b1) * gv;
            vd[k] = b2 * vd[k] + (1.0 - b2) * gv * gv;
            let m_hat = md[k] / bc1;
            let v_hat = vd[k] / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new(0);
        s.insert("p", Tensor::row(vec![1.0, -2.0]));
        let before = s.clone();
        let mut st = AdamState::new(1e-3);
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get("p"), before.get("p"));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::new(0);
        s.insert("p", Tensor::scalar(0.0));
        s.grad_mut("p").unwrap().data_mut()[0] = 1.0;
        let mut st = AdamState::new(1e-3);
        adam_step(&mut s, &mut st).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((s.get("p").unwrap().item() - expect).abs() < 1e-18);
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut s = ParamStore::new(3);
            s.init_linear("l", 3, 3, 1.0);
            let mut st = AdamState::new(5e-4);
            for k in 0..5 {
                for (i, v) in s.grad_mut("l.w").unwrap().data_mut().iter_mut().enumerate() {
                    *v = ((i + k) as f64).sin();
                }
                adam_step(&mut s, &mut st).unwrap();
            }
            (s, st)
        };
        assert_eq!(run(), run());
    }
}
