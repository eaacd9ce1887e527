use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Decoupled-weight-decay Adam. Moments exist only for parameters that were
/// trainable when the optimizer was created.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(id, p)| {
                (
                    id,
                    (vec![0.0; p.tensor.numel()], vec![0.0; p.tensor.numel()]),
                )
            })
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Parameters with optimizer state.
    pub fn tracked(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.moments.keys().copied()
    }

    /// One update at learning rate `lr`. Tracked parameters without a
    /// gradient are treated as having a zero gradient. Any non-finite
    /// gradient aborts the step before a parameter is touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f64>)],
        lr: f64,
    ) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Contract(format!("learning rate {lr}")));
        }
        let mut by_id: BTreeMap<ParamId, &[f64]> = BTreeMap::new();
        for (id, g) in grads {
            if !self.moments.contains_key(id) {
                return Err(Error::Contract(format!(
                    "gradient for untracked parameter {}",
                    store.get(*id).name
                )));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                log::error!(
                    "non-finite gradient in {} at element {i}: {}",
                    store.get(*id).name,
                    g[i]
                );
                return Err(Error::NonFinite("gradient"));
            }
            by_id.insert(*id, g);
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (&id, (m, v)) in self.moments.iter_mut() {
            let p = store.get_mut(id);
            let wd = if p.decays() { self.weight_decay } else { 0.0 };
            let g = by_id.get(&id).copied();
            for (i, theta) in p.tensor.values_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                *theta -= lr * (mh / (vh.sqrt() + self.eps) + wd * *theta);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flat_map(|(_, g)| g.iter_mut())
            .for_each(|v| *v *= s);
    }
    norm
}
