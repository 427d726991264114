//! Adam with optional global-norm gradient clipping.

use ndarray::ArrayD;

use super::layers::{Graph, Param};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: Some(1.0) }
    }
}

pub struct Adam {
    params: Vec<Param>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
    pub cfg: AdamConfig,
}

impl Adam {
    pub fn new(params: Vec<Param>, cfg: AdamConfig) -> Adam {
        let m = params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        let v = params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect();
        Adam { params, m, v, t: 0, cfg }
    }

    /// Applies one update from the gradients accumulated in `graph`.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, graph: &Graph) -> f64 {
        let mut grads: Vec<Option<ArrayD<f64>>> =
            self.params.iter().map(|p| graph.grad_of(p)).collect();
        let mut sq_norm = 0.0;
        for g in grads.iter().flatten() {
            sq_norm += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq_norm.sqrt();
        if let Some(clip) = self.cfg.grad_clip {
            if norm > clip {
                let scale = clip / norm;
                for g in grads.iter_mut().flatten() {
                    g.mapv_inplace(|x| x * scale);
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |mi, gi| *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * gi);
            v.zip_mut_with(&g, |vi, gi| {
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * gi * gi
            });
            let lr = self.cfg.lr;
            let eps = self.cfg.eps;
            self.params[i].update_inplace(|value| {
                ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
            });
        }
        norm
    }
}
