use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::array::NdArray;
use super::params::{ParamGrads, ParamId, ParamStore};

/// Learning-rate schedule over a fixed number of steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `lr_min` at the final step.
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub lr: f64,
    pub lr_min: f64,
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_min: 1e-4,
            schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerSettings {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let progress = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
                self.lr_min + (self.lr - self.lr_min) * cos
            }
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub settings: OptimizerSettings,
    step: u64,
    m: Vec<Option<NdArray<f32>>>,
    v: Vec<Option<NdArray<f32>>>,
}

impl AdamW {
    pub fn new(settings: OptimizerSettings, store: &ParamStore<f32>) -> Self {
        Self {
            settings,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update at learning rate `lr`. A gradient for a frozen
    /// parameter is an error and leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &ParamGrads<f32>, lr: f64) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(id, _)| store.is_frozen(*id)) {
            return Err(Error::FrozenParameter(store.name(id).to_string()));
        }
        let s = self.settings;
        let clip = if s.clip_norm > 0.0 {
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient"));
            }
            if norm > s.clip_norm {
                s.clip_norm / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        let (b1, b2) = (s.beta1 as f32, s.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = s.eps as f32;
        let decay = (lr * s.weight_decay) as f32;
        let clip = clip as f32;
        for (id, g) in grads.iter() {
            let i = id.index();
            let shape = g.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| NdArray::zeros(shape.clone()));
            let v = self.v[i].get_or_insert_with(|| NdArray::zeros(shape));
            let p = store.get_mut(id)?;
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * clip;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let denom = (*vv * inv_bc2).sqrt() + eps;
                *pv -= decay * *pv + step_size * *mv / denom;
            }
        }
        Ok(())
    }

    /// Moment buffers by parameter id, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &NdArray<f32>, &NdArray<f32>)> {
        self.m
            .iter()
            .zip(&self.v)
            .enumerate()
            .filter_map(|(i, (m, v))| match (m, v) {
                (Some(m), Some(v)) => Some((ParamId::from_index(i), m, v)),
                _ => None,
            })
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, NdArray<f32>, NdArray<f32>)>) {
        self.step = step;
        for (id, m, v) in moments {
            self.m[id.index()] = Some(m);
            self.v[id.index()] = Some(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::params::Ctx;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = OptimizerSettings {
            lr: 1.2e-4,
            lr_min: 1.2e-5,
            ..Default::default()
        };
        assert!((s.lr_at(0, 100) - 1.2e-4).abs() < 1e-12);
        assert!((s.lr_at(99, 100) - 1.2e-5).abs() < 1e-12);
        assert!(s.lr_at(50, 100) < 1.2e-4 && s.lr_at(50, 100) > 1.2e-5);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let x = store.add("x", NdArray::new([3], vec![3.0, -2.0, 1.0]).unwrap()).unwrap();
        let settings = OptimizerSettings {
            lr: 0.1,
            schedule: LrSchedule::Constant,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(settings, &store);
        for _ in 0..300 {
            let mut ctx = Ctx::train(&store);
            let sq = ctx.tape.square(ctx.p(x));
            let l = ctx.tape.sum(sq);
            let g = ctx.param_grads(l).unwrap();
            opt.step(&mut store, &g, 0.1).unwrap();
        }
        assert!(store.get(x).data().iter().all(|v| v.abs() < 0.05), "{:?}", store.get(x));
    }

    #[test]
    fn frozen_gradient_rejected() {
        let mut store = ParamStore::<f32>::new();
        let x = store.add("x", NdArray::full([2], 1.0)).unwrap();
        let mut ctx = Ctx::train(&store);
        let l = ctx.tape.sum(ctx.p(x));
        let g = ctx.param_grads(l).unwrap();
        store.freeze_prefix("x");
        let mut opt = AdamW::new(OptimizerSettings::default(), &store);
        assert!(matches!(opt.step(&mut store, &g, 0.1), Err(Error::FrozenParameter(_))));
        assert_eq!(store.get(x).data(), &[1.0, 1.0]);
    }
}
