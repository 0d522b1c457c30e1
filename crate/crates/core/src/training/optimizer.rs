use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, ParamId, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmsGradConfig {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for AmsGradConfig {
    fn default() -> Self {
        AmsGradConfig {
            lr: 1e-4,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AmsGradConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.b1)
            && (0.0..1.0).contains(&self.b2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with a running elementwise maximum of the second moment, with bias
/// correction:
///
/// ```text
/// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
/// v_max = max(v_max, v)
/// theta -= lr * (m / (1 - b1^t)) / (sqrt(v_max / (1 - b2^t)) + eps)
/// ```
#[derive(Debug, Clone)]
pub struct AmsGrad<S> {
    pub config: AmsGradConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    v_max: Vec<Vec<S>>,
}

impl<S: Scalar> AmsGrad<S> {
    pub fn new(params: &ParamStore<S>, config: AmsGradConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![S::zero(); t.len()]).collect::<Vec<_>>();
        AmsGrad {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            v_max: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn v_max(&self, id: ParamId) -> &[S] {
        &self.v_max[id.index()]
    }

    /// Updates every parameter in `trainable` from its gradient slot using
    /// learning rate `lr`. A trainable parameter without a gradient is a
    /// contract violation.
    pub fn step(&mut self, params: &mut ParamStore<S>, trainable: &[ParamId], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters but the store holds {}",
                self.m.len(),
                params.len()
            )));
        }
        if let Some(&id) = trainable.iter().find(|&&id| params.get(id).grad().is_none()) {
            return Err(Error::contract(format!(
                "parameter {} has no gradient",
                params.name(id)
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (S::from_f64(c.b1), S::from_f64(c.b2));
        let (one_b1, one_b2) = (S::from_f64(1.0 - c.b1), S::from_f64(1.0 - c.b2));
        let corr1 = S::from_f64(1.0 - c.b1.powi(t));
        let corr2 = S::from_f64(1.0 - c.b2.powi(t));
        let (lr, eps) = (S::from_f64(lr), S::from_f64(c.eps));
        for &id in trainable {
            let k = id.index();
            let tensor = params.get_mut(id);
            let g = tensor.grad().expect("checked above").to_vec();
            let (m, v, vm) = (&mut self.m[k], &mut self.v[k], &mut self.v_max[k]);
            for (i, theta) in tensor.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                if v[i] > vm[i] {
                    vm[i] = v[i];
                }
                let m_hat = m[i] / corr1;
                let v_hat = vm[i] / corr2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moments as a checkpoint (`m/<name>`, `v/<name>`, `v_max/<name>`).
    pub fn to_checkpoint(&self, params: &ParamStore<S>) -> Checkpoint<S> {
        let mut tensors = Vec::new();
        for (kind, all) in [("m", &self.m), ("v", &self.v), ("v_max", &self.v_max)] {
            for (id, name, t) in params.iter() {
                let moment = Tensor::new(t.shape(), all[id.index()].clone()).expect("moment shaped like parameter");
                tensors.push((format!("{kind}/{name}"), moment));
            }
        }
        let mut metadata = BTreeMap::new();
        metadata.insert("optimizer.step".into(), self.step.to_string());
        metadata.insert("optimizer.lr".into(), format!("{:?}", self.config.lr));
        metadata.insert("optimizer.b1".into(), format!("{:?}", self.config.b1));
        metadata.insert("optimizer.b2".into(), format!("{:?}", self.config.b2));
        metadata.insert("optimizer.eps".into(), format!("{:?}", self.config.eps));
        Checkpoint { metadata, tensors }
    }

    pub fn from_checkpoint(params: &ParamStore<S>, ckpt: &Checkpoint<S>, config: AmsGradConfig) -> Result<Self> {
        let step = ckpt
            .metadata
            .get("optimizer.step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("optimizer state lacks a step count".into()))?;
        let mut opt = Self::new(params, config);
        opt.step = step;
        for (kind, store) in [("m", &mut opt.m), ("v", &mut opt.v), ("v_max", &mut opt.v_max)] {
            for (id, name, t) in params.iter() {
                let key = format!("{kind}/{name}");
                let saved = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
                if saved.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{key}: saved {:?} vs parameter {:?}",
                        saved.shape(),
                        t.shape()
                    )));
                }
                store[id.index()] = saved.data().to_vec();
            }
        }
        Ok(opt)
    }
}

/// Step schedule: the rate halves every `halve_every` epochs (epochs counted
/// from zero).
pub fn lr_schedule(lr0: f64, epoch: usize, halve_every: usize) -> f64 {
    if halve_every == 0 {
        return lr0;
    }
    lr0 * 0.5f64.powi((epoch / halve_every) as i32)
}

/// Rescales the gradients of `ids` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut ParamStore<S>, ids: &[ParamId], max_norm: f64) -> f64 {
    let norm = ids
        .iter()
        .filter_map(|&id| params.get(id).grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for &id in ids {
            let t = params.get_mut(id);
            if let Some(g) = t.grad() {
                let scaled: Vec<S> = g.iter().map(|&v| v * S::from_f64(f)).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }
    norm
}
