use std::collections::HashMap;

use indexmap::IndexMap;

use super::{Mat, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptiveConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// First-moment decay; 0 disables momentum.
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, if any.
    pub clip_norm: Option<f64>,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Per-coordinate adaptive step sizes with decoupled weight decay.
///
/// With `beta1 = 0` this is bias-corrected RMSProp; with `beta1 > 0` it is
/// AdamW.
#[derive(Debug, Clone)]
pub struct Adaptive {
    config: AdaptiveConfig,
    step: u64,
    first: HashMap<String, Mat>,
    second: HashMap<String, Mat>,
}

impl Adaptive {
    pub fn new(config: AdaptiveConfig) -> Self {
        Self {
            config,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Mat>) {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let g = g.mapv(|x| x * scale);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Mat::zeros(g.raw_dim()));
            v.zip_mut_with(&g, |v, &gi| *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi);
            let direction = if c.beta1 > 0.0 {
                let m = self
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| Mat::zeros(g.raw_dim()));
                m.zip_mut_with(&g, |m, &gi| *m = c.beta1 * *m + (1.0 - c.beta1) * gi);
                m.mapv(|x| x / bc1)
            } else {
                g
            };
            if c.weight_decay > 0.0 {
                p.mapv_inplace(|x| x * (1.0 - c.lr * c.weight_decay));
            }
            ndarray::Zip::from(p)
                .and(&direction)
                .and(&*v)
                .for_each(|p, &d, &v| *p -= c.lr * d / ((v / bc2).sqrt() + c.eps));
        }
    }
}
