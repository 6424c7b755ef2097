//! Momentum-free adaptive optimizer and learning-rate schedule.

use crate::error::Result;
use crate::params::{ParamGrads, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Warmup followed by cosine decay to `min_ratio · base`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
    pub min_ratio: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.base * (self.min_ratio + (1.0 - self.min_ratio) * cos)
    }
}

/// RMSProp with bias-corrected second moments.
#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    pub decay: f64,
    pub eps: f64,
    second: Vec<Option<Vec<T>>>,
    steps: usize,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(n_params: usize) -> Self {
        RmsProp {
            decay: 0.99,
            eps: 1e-8,
            second: vec![None; n_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        self.steps += 1;
        let rho = T::c(self.decay);
        let correction = T::c(1.0 - self.decay.powi(self.steps.min(i32::MAX as usize) as i32));
        let (lr, eps) = (T::c(lr), T::c(self.eps));
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let s = self.second[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
            let p = store.get_mut(id).data_mut();
            for ((w, sv), &gv) in p.iter_mut().zip(s.iter_mut()).zip(g) {
                *sv = rho * *sv + (T::one() - rho) * gv * gv;
                *w = *w - lr * gv / ((*sv / correction).sqrt() + eps);
            }
        }
    }

    /// Second-moment buffers as named records, for checkpointing.
    pub fn state_records(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "optim.steps".to_string(),
            Tensor::scalar(T::c(self.steps as f64)),
        )];
        for (id, name, t) in store.iter() {
            if let Some(s) = &self.second[id.index()] {
                out.push((
                    format!("optim.sq.{name}"),
                    Tensor::new(t.shape().to_vec(), s.clone()).expect("state matches parameter"),
                ));
            }
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, records: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, t) in records {
            if name == "optim.steps" {
                self.steps = t.item().f64() as usize;
            } else if let Some(pname) = name.strip_prefix("optim.sq.") {
                if let Some(id) = store.id(pname) {
                    self.second[id.index()] = Some(t.data().to_vec());
                }
            }
        }
        Ok(())
    }
}
