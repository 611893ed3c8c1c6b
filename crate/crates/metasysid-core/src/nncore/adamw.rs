//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::paramstore::ParamStore;
use super::real::Real;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot<R: Real> {
    name: String,
    dims: Vec<usize>,
    m: Vec<R>,
    v: Vec<R>,
}

/// Optimizer state: first/second moments per parameter plus the step count.
/// Moment slots are created lazily on the first step, in visitation order,
/// and verified by name on every later step.
#[derive(Debug, Clone)]
pub struct AdamW<R: Real> {
    pub cfg: AdamWConfig,
    step: u64,
    slots: Vec<Slot<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter the model's visitor yields.
    /// `lr_t` is the scheduled learning rate for this step; decay
    /// `theta <- theta - lr_t * (m_hat/(sqrt(v_hat)+eps) + wd * theta)`
    /// applies only to parameters flagged for decay.
    pub fn step<V>(&mut self, lr_t: f64, mut visit: V) -> Result<(), NnError>
    where
        V: FnMut(&mut dyn FnMut(&str, &mut Param<R>)),
    {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let beta1 = R::from_f64(self.cfg.beta1);
        let beta2 = R::from_f64(self.cfg.beta2);
        let one_m_beta1 = R::from_f64(1.0 - self.cfg.beta1);
        let one_m_beta2 = R::from_f64(1.0 - self.cfg.beta2);
        let inv_bc1 = R::from_f64(1.0 / bc1);
        let inv_bc2_sqrt = R::from_f64(1.0 / bc2.sqrt());
        let eps = R::from_f64(self.cfg.eps);
        let lr = R::from_f64(lr_t);
        let wd = R::from_f64(self.cfg.weight_decay);

        let first = self.slots.is_empty();
        let slots = &mut self.slots;
        let mut idx = 0usize;
        let mut err: Option<NnError> = None;
        visit(&mut |name, p| {
            if err.is_some() {
                return;
            }
            if first {
                slots.push(Slot {
                    name: name.to_string(),
                    dims: p.value.shape().to_vec(),
                    m: vec![R::ZERO; p.value.numel()],
                    v: vec![R::ZERO; p.value.numel()],
                });
            }
            let Some(slot) = slots.get_mut(idx) else {
                err = Some(NnError::InvalidArgument(format!(
                    "optimizer saw unexpected extra parameter '{name}'"
                )));
                return;
            };
            if slot.name != name || slot.m.len() != p.value.numel() {
                err = Some(NnError::InvalidArgument(format!(
                    "optimizer state mismatch at '{}' (expected '{name}')",
                    slot.name
                )));
                return;
            }
            let decay = if p.decay { wd } else { R::ZERO };
            let theta = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..theta.len() {
                let g = grad[i];
                slot.m[i] = beta1 * slot.m[i] + one_m_beta1 * g;
                slot.v[i] = beta2 * slot.v[i] + one_m_beta2 * g * g;
                let m_hat = slot.m[i] * inv_bc1;
                let v_hat_sqrt = (slot.v[i]).sqrt() * inv_bc2_sqrt;
                theta[i] = theta[i] - lr * (m_hat / (v_hat_sqrt + eps) + decay * theta[i]);
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(())
    }
}

impl AdamW<f32> {
    /// Moment arrays as two stores (for checkpointing), plus the step count.
    pub fn export_state(&self) -> Result<(u64, ParamStore, ParamStore), NnError> {
        let mut ms = ParamStore::new();
        let mut vs = ParamStore::new();
        for slot in &self.slots {
            ms.insert(&slot.name, &slot.dims, slot.m.clone())?;
            vs.insert(&slot.name, &slot.dims, slot.v.clone())?;
        }
        Ok((self.step, ms, vs))
    }

    /// Rebuilds optimizer state saved by [`Self::export_state`].
    pub fn import_state(
        cfg: AdamWConfig,
        step: u64,
        ms: &ParamStore,
        vs: &ParamStore,
    ) -> Result<Self, NnError> {
        if ms.len() != vs.len() {
            return Err(NnError::InvalidArgument(
                "moment stores have different entry counts".into(),
            ));
        }
        let mut slots = Vec::with_capacity(ms.len());
        for m_entry in ms.iter() {
            let v_entry = vs.get(&m_entry.name).ok_or_else(|| {
                NnError::InvalidArgument(format!("missing second moment for '{}'", m_entry.name))
            })?;
            if v_entry.dims != m_entry.dims {
                return Err(NnError::InvalidArgument(format!(
                    "moment shape mismatch for '{}'",
                    m_entry.name
                )));
            }
            slots.push(Slot {
                name: m_entry.name.clone(),
                dims: m_entry.dims.clone(),
                m: m_entry.data.clone(),
                v: v_entry.data.clone(),
            });
        }
        Ok(Self { cfg, step, slots })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::Tensor;

    fn scalar_param(v: f32, decay: bool) -> Param<f32> {
        Param::new(Tensor::from_vec(&[1], vec![v]), decay)
    }

    fn visit_one<'a>(
        p: &'a mut Param<f32>,
    ) -> impl FnMut(&mut dyn FnMut(&str, &mut Param<f32>)) + 'a {
        move |f| f("theta", p)
    }

    #[test]
    fn first_step_bias_correction() {
        // theta=1, g=1, lr=0.1, wd=0: m_hat = v_hat = 1, so theta' ~= 0.9.
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f32>::new(cfg);
        let mut p = scalar_param(1.0, true);
        p.grad.data_mut()[0] = 1.0;
        opt.step(0.1, visit_one(&mut p)).unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f32>::new(cfg);
        let mut p = scalar_param(1.25, true);
        for _ in 0..3 {
            opt.step(0.1, visit_one(&mut p)).unwrap();
        }
        assert_eq!(p.value.data()[0], 1.25);
    }

    #[test]
    fn pure_decay_branch() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f32>::new(cfg);
        let mut p = scalar_param(1.0, true);
        opt.step(0.1, visit_one(&mut p)).unwrap();
        assert!((p.value.data()[0] - 0.99).abs() < 1e-7);
    }

    #[test]
    fn no_decay_flag_respected() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::<f32>::new(cfg);
        let mut p = scalar_param(1.0, false);
        opt.step(0.1, visit_one(&mut p)).unwrap();
        assert_eq!(p.value.data()[0], 1.0);
    }

    #[test]
    fn state_round_trip() {
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::<f32>::new(cfg);
        let mut p = scalar_param(1.0, true);
        p.grad.data_mut()[0] = 0.5;
        opt.step(1e-4, visit_one(&mut p)).unwrap();
        let (step, ms, vs) = opt.export_state().unwrap();
        let opt2 = AdamW::<f32>::import_state(cfg, step, &ms, &vs).unwrap();
        assert_eq!(opt2.step_count(), 1);
        assert_eq!(opt2.slots[0].m, opt.slots[0].m);
        assert_eq!(opt2.slots[0].v, opt.slots[0].v);
    }

    #[test]
    fn renamed_parameter_rejected() {
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::<f32>::new(cfg);
        let mut p = scalar_param(1.0, true);
        opt.step(0.1, visit_one(&mut p)).unwrap();
        let res = opt.step(0.1, |f| f("other", &mut p));
        assert!(res.is_err());
    }
}
