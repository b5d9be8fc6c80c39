//! Adam and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn at(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine if total == 0 => base,
            Self::Cosine => {
                let t = step.min(total) as f64 / total as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates taken so far.
    pub t: u64,
    pub m: ParamStore<f32>,
    pub v: ParamStore<f32>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let bc2 = bc2 as f32;
        let eps = self.eps as f32;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (m, v) = (&self.m.get(name).unwrap(), &self.v.get(name).unwrap());
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                *pi -= step * mi / ((vi / bc2).sqrt() + eps);
            }
        }
    }

    pub fn store_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.tensors.extend_prefixed(&format!("{prefix}.m."), &self.m);
        ck.tensors.extend_prefixed(&format!("{prefix}.v."), &self.v);
    }

    /// Restore moments saved under `prefix`; `t` comes from the train state.
    pub fn load(ck: &Checkpoint, prefix: &str, params: &ParamStore<f32>, t: u64) -> Result<Self> {
        let mut adam = Self::new(params);
        adam.t = t;
        adam.m = ck.tensors.subset(&format!("{prefix}.m."));
        adam.v = ck.tensors.subset(&format!("{prefix}.v."));
        if !adam.m.same_layout(params) || !adam.v.same_layout(params) {
            return Err(Error::Checkpoint(format!("optimizer state `{prefix}` does not match the parameters")));
        }
        Ok(adam)
    }
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.at(1e-3, 0, 100), 1e-3);
        assert!((s.at(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(s.at(1e-3, 100, 100).abs() < 1e-18);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[2], vec![1.0f32, -1.0]));
        let mut g = ParamStore::new();
        g.insert("w", Tensor::from_vec(&[2], vec![0.5f32, -3.0]));
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &g, 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[1], vec![5.0f32]));
        let mut adam = Adam::new(&p);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().data()[0];
            let mut g = ParamStore::new();
            g.insert("w", Tensor::from_vec(&[1], vec![2.0 * (w - 2.0)]));
            adam.step(&mut p, &g, 0.05);
        }
        assert!((p.get("w").unwrap().data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn clipping() {
        let mut g = ParamStore::new();
        g.insert("a", Tensor::from_vec(&[2], vec![3.0f32, 4.0]));
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert_eq!(g.get("a").unwrap().data(), &[0.6, 0.8]);
    }
}
