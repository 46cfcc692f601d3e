use crate::params::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies only to parameters
/// registered with `decay = true`; parameters without a gradient are left
/// alone for that step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        let c = self.config;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let decay = if store.decays(id) { lr * c.weight_decay } else { 0.0 };
            let p = store.get_mut(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                *pv -= decay * *pv;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// `min` at `total`.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, peak: f64, min: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `teacher <- (1 - lambda) * student + lambda * teacher` for every parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, lambda: f64) {
    assert!(teacher.same_layout(student), "teacher and student layouts differ");
    let ids: Vec<_> = teacher.ids().collect();
    for id in ids {
        let s = student.get(id).data();
        for (t, &sv) in teacher.get_mut(id).data_mut().iter_mut().zip(s) {
            *t = (1.0 - lambda) * sv + lambda * *t;
        }
    }
}
