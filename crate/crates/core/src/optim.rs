//! AdamW with bias correction and a cosine schedule that decays to a tenth
//! of the initial rate without warm-up.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub total_steps: u64,
    /// Global gradient-norm clip; off unless set.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl OptimConfig {
    pub fn new(lr: f64, total_steps: u64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.95, weight_decay: 0.1, eps: 1e-8, total_steps, clip_norm: None }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0
            && self.total_steps >= 1;
        if ok {
            Ok(())
        } else {
            Err(OptimError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer config {0}")]
    Config(String),
    #[error("step {t} is past the end of the schedule ({total} steps)")]
    PastSchedule { t: u64, total: u64 },
    #[error("non-finite gradient in {param} at step {step}")]
    NonFinite { step: u64, param: String },
    #[error("optimizer state does not match the parameters: {0}")]
    Shape(String),
}

pub fn lr_at(t: u64, cfg: &OptimConfig) -> Result<f64, OptimError> {
    if t > cfg.total_steps {
        return Err(OptimError::PastSchedule { t, total: cfg.total_steps });
    }
    let lr_f = 0.1 * cfg.lr;
    if t == 0 {
        return Ok(cfg.lr);
    }
    if t == cfg.total_steps {
        return Ok(lr_f);
    }
    let frac = t as f64 / cfg.total_steps as f64;
    Ok(lr_f + (cfg.lr - lr_f) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    /// One update. `decay[i]` selects which tensors receive weight decay;
    /// `names` only labels errors.
    pub fn step(
        &mut self,
        cfg: &OptimConfig,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        decay: &[bool],
        names: &[String],
        lr: f64,
    ) -> Result<(), OptimError> {
        let n = params.len();
        if grads.len() != n || decay.len() != n || self.m.len() != n || self.v.len() != n {
            return Err(OptimError::Shape(format!(
                "{n} params, {} grads, {} decay flags, {} moments",
                grads.len(),
                decay.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(OptimError::Shape(format!("tensor {i}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            if !g.all_finite() {
                return Err(OptimError::NonFinite {
                    step: self.t + 1,
                    param: names.get(i).cloned().unwrap_or_else(|| i.to_string()),
                });
            }
        }
        let clip = match cfg.clip_norm {
            Some(max) => {
                let norm = grads.iter().flat_map(|g| g.data()).map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (tb1, tb2, tclip) = (T::c(b1), T::c(b2), T::c(clip));
        let (one_b1, one_b2) = (T::c(1.0 - b1), T::c(1.0 - b2));
        let (tc1, tc2, teps, tlr) = (T::c(c1), T::c(c2), T::c(cfg.eps), T::c(lr));
        for i in 0..n {
            let wd = if decay[i] { T::c(lr * cfg.weight_decay) } else { T::zero() };
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = gj * tclip;
                *mj = tb1 * *mj + one_b1 * g;
                *vj = tb2 * *vj + one_b2 * g * g;
                let mhat = *mj / tc1;
                let vhat = *vj / tc2;
                let old = *pj;
                *pj = old - tlr * mhat / (vhat.sqrt() + teps) - wd * old;
            }
        }
        Ok(())
    }
}
