use std::f64::consts::PI;

use super::graph::{Grads, NnError, ParamId, ParamStore};
use super::tensor::Tensor;

/// Cosine-annealed learning rate: `base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (PI * frac).cos())
}

/// AdamW with decoupled weight decay on a cosine schedule.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub step: usize,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, base_lr: f64, weight_decay: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            total_steps,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.total_steps, self.base_lr)
    }

    /// Updates the listed parameters in place; parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, params: &[ParamId]) {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for &pid in params {
            let Some(g) = grads.get(pid) else { continue };
            let decay = store.id_of(pid).ends_with(".w");
            let m = self.m[pid.0].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let v = self.v[pid.0].get_or_insert_with(|| Tensor::zeros(g.rows, g.cols));
            let p = store.get_mut(pid);
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m.data[k] / bc1;
                let vhat = v.data[k] / bc2;
                if decay {
                    p.data[k] -= lr * self.weight_decay * p.data[k];
                }
                p.data[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// `teacher ← τ·teacher + (1−τ)·student` for every listed parameter id.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, ids: &[ParamId], tau: f64) -> Result<(), NnError> {
    for &pid in ids {
        let id = student.id_of(pid);
        let tid = teacher.lookup(id).ok_or_else(|| NnError::UnknownParam(id.to_string()))?;
        let s = student.get(pid);
        let t = teacher.get_mut(tid);
        if t.shape() != s.shape() {
            return Err(NnError::ShapeMismatch {
                id: id.to_string(),
                got: s.shape(),
                expected: t.shape(),
            });
        }
        for (a, b) in t.data.iter_mut().zip(&s.data) {
            *a = tau * *a + (1.0 - tau) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 0.5e-4).abs() < 1e-15);
    }

    #[test]
    fn ema_cases() {
        let mut t = ParamStore::new();
        let mut s = ParamStore::new();
        t.add("p", Tensor::scalar(0.0));
        let pid = s.add("p", Tensor::scalar(1.0));
        ema_update(&mut t, &s, &[pid], 0.99).unwrap();
        assert!((t.get(ParamId(0)).item() - 0.01).abs() < 1e-15);
        // fixed point
        let mut t2 = s.clone();
        ema_update(&mut t2, &s, &[pid], 0.99).unwrap();
        assert_eq!(t2.get(pid).item(), 1.0);
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut t = ParamStore::new();
        let mut s = ParamStore::new();
        t.add("p", Tensor::scalar(-2.0));
        let pid = s.add("p", Tensor::scalar(1.0));
        let tau: f64 = 0.995;
        for k in 1..=200 {
            ema_update(&mut t, &s, &[pid], tau).unwrap();
            let err = (t.get(pid).item() - 1.0).abs();
            assert!((err - tau.powi(k) * 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_decreases_quadratic() {
        let mut store = ParamStore::new();
        let pid = store.add("x.w", Tensor::scalar(3.0));
        let mut opt = AdamW::new(&store, 0.05, 0.0, 100);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let mut grads = Grads::new(&store);
            let loss_val;
            {
                let mut g = Graph::new(&store);
                let x = g.param(pid);
                let sq = g.square(x);
                let loss = g.sum(sq);
                loss_val = g.value(loss).item();
                g.backward(loss, &mut grads).unwrap();
            }
            assert!(loss_val <= prev);
            prev = loss_val;
            opt.step(&mut store, &grads, &[pid]);
        }
        assert!(prev < 1.0);
    }
}
