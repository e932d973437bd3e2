use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Rescale gradients so their global L2 norm does not exceed this.
    pub clip_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: None }
    }
}

/// Adam bound to one [`ParamStore`] layout.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    moments: Vec<Option<(Tensor, Tensor)>>,
    t: u32,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, moments: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> f32 {
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let norm_sq: f64 = ids
            .iter()
            .filter_map(|&id| grads.get(store, id))
            .flat_map(|g| g.data().iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        let norm = norm_sq.sqrt() as f32;
        let clip = match self.cfg.clip_norm {
            Some(max) if norm > max && norm > 0.0 => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in ids {
            let Some(g) = grads.get(store, id) else { continue };
            let idx = id.index();
            let (m, v) = self.moments[idx].get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let mut gv = gv * clip;
                if c.weight_decay > 0.0 {
                    gv += c.weight_decay * *pv;
                }
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        norm
    }
}
