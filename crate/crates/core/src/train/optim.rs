//! Adam with decoupled weight decay and the inverse-square-root schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{cast, Real, Tensor};

/// Linear warmup to `peak` over `warmup` steps, then `peak·√(warmup/t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseSqrt {
    pub peak: f64,
    pub warmup: u64,
}

impl InverseSqrt {
    /// Learning rate for 1-based step `t`.
    pub fn lr(&self, t: u64) -> f64 {
        let t = t.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.peak * (t / w).min((w / t).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moment estimates and per-parameter update counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Updates applied to each parameter.
    pub steps: Vec<u64>,
    /// Optimizer steps taken.
    pub t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
            t: 0,
        }
    }

    /// One update of every parameter that received a gradient. Each
    /// parameter is stepped at most once, with its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, g) in grads.params() {
            if g.has_nan() {
                return Err(Error::NaN(format!("gradient of {}", store.get(id).name)));
            }
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for (id, g) in grads.params() {
            let i = id.index();
            self.steps[i] += 1;
            assert!(
                self.steps[i] <= self.t,
                "parameter {} stepped twice in one iteration",
                store.get(id).name
            );
            let k = self.steps[i] as i32;
            let (c1, c2) = (1.0 - beta1.powi(k), 1.0 - beta2.powi(k));
            let p = store.value_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..p.len() {
                let gj = g.data()[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                m[j] = cast(mj);
                v[j] = cast(vj);
                let update = (mj / c1) / ((vj / c2).sqrt() + eps);
                let pj = p[j].as_f64();
                p[j] = cast(pj - lr * update - lr * weight_decay * pj);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale_all(cast(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, ParamRole};

    #[test]
    fn schedule_algebra() {
        let s = InverseSqrt {
            peak: 1e-3,
            warmup: 4000,
        };
        assert!((s.lr(4000) - 1e-3).abs() < 1e-15);
        assert!((s.lr(16000) - 5e-4).abs() < 1e-15);
        assert!((s.lr(2000) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_sign_of_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", ParamRole::Weight, Tensor::scalar(0.0));
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        let grads = {
            let mut g = Graph::with_params(&store);
            let x = g.param(id);
            let y = g.scale(x, 3.0);
            let s = g.sum(y);
            g.backward(s).unwrap()
        };
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert!((store.value(id).data()[0] + 0.1).abs() < 1e-8);
        assert_eq!(adam.steps[0], 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("enc1-attn/wq", ParamRole::Weight, Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = {
            let mut g = Graph::with_params(&store);
            let x = g.param(id);
            let z = g.scale(x, f64::NAN);
            let s = g.sum(z);
            g.backward(s).unwrap()
        };
        let err = adam.step(&mut store, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("enc1-attn/wq"), "{err}");
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add(
            "x",
            ParamRole::Weight,
            Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap(),
        );
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, &store);
        let sched = InverseSqrt {
            peak: 0.05,
            warmup: 50,
        };
        for t in 1..=2000 {
            let grads = {
                let mut g = Graph::with_params(&store);
                let x = g.param(id);
                let sq = g.matmul_nt(x, x).unwrap();
                let loss = g.sum(sq);
                g.backward(loss).unwrap()
            };
            adam.step(&mut store, &grads, sched.lr(t)).unwrap();
        }
        let norm: f64 = store
            .value(id)
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-3, "|x| = {norm}");
    }
}
