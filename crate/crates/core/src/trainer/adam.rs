use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UstError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments of one parameter and its update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Per-parameter Adam moments, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub slots: BTreeMap<String, AdamSlot>,
}

impl AdamState {
    /// One bias-corrected Adam update of `name` with gradient `grad`.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut ParamStore, name: &str, grad: &Tensor) -> Result<()> {
        let p = params
            .get_mut(name)
            .ok_or_else(|| UstError::Contract(format!("optimizer got unknown parameter `{name}`")))?;
        if p.shape() != grad.shape() {
            return Err(UstError::shape("optimizer gradient", p.shape(), grad.shape()));
        }
        let n = p.numel();
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        slot.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(slot.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(slot.t as i32);
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(slot.m.iter_mut())
            .zip(slot.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_quadratic_matches_closed_form() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut params = ParamStore::default();
        params.insert("p", Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
        let mut st = AdamState::default();
        // f(p) = p^2, gradient 2p
        let (mut p, mut m, mut v) = (3.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = 2.0 * params.get("p").unwrap().data()[0];
            st.update(&cfg, &mut params, "p", &Tensor::new(&[1], vec![g]).unwrap()).unwrap();
            let g_ref = 2.0 * p;
            m = 0.5 * m + 0.5 * g_ref;
            v = 0.999 * v + 0.001 * g_ref * g_ref;
            let mhat = m / (1.0 - 0.5f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            p -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            assert!((params.get("p").unwrap().data()[0] - p).abs() <= 1e-12);
        }
    }
}
