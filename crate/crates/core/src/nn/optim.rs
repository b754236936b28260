use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// `base · (1 − iter/total)^power`.
pub fn poly_lr(base: f64, iter: usize, total: usize, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("total_iter must be positive".into()));
    }
    if iter > total {
        return Err(Error::Contract(format!(
            "iteration {iter} is past the schedule end {total}"
        )));
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(power))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_iter: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0001,
            power: 0.9,
            total_iter: 1,
        }
    }
}

/// SGD with momentum and L2 weight decay under a poly learning-rate
/// schedule.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    iter: usize,
    buffers: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if config.total_iter == 0 {
            return Err(Error::Config("total_iter must be positive".into()));
        }
        Ok(Sgd {
            config,
            iter: 0,
            buffers: Vec::new(),
        })
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn current_lr(&self) -> Result<f64> {
        let c = &self.config;
        poly_lr(c.base_lr, self.iter, c.total_iter, c.power)
    }

    /// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v` for every trainable tensor.
    /// Returns the learning rate that was applied.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<f64> {
        let lr = self.current_lr()?;
        let (lr_t, mu, wd) = (T::of(lr), T::of(self.config.momentum), T::of(self.config.weight_decay));
        if self.buffers.len() < store.len() {
            self.buffers.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable).collect();
        for id in ids {
            let name = store.name(id).to_string();
            let t = store.tensor_mut(id);
            let grad = t
                .grad()
                .ok_or_else(|| Error::Contract(format!("no gradient for trainable parameter '{name}'")))?
                .to_vec();
            let buf = self.buffers[id.0].get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((p, v), g) in t.data_mut().iter_mut().zip(buf.iter_mut()).zip(grad) {
                *v = mu * *v + (g + wd * *p);
                *p = *p - lr_t * *v;
            }
        }
        self.iter += 1;
        Ok(lr)
    }
}
