use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Probability that a training sample becomes a conditioning task.
pub const P_CONDITION: f64 = 0.3;
/// Within conditioning, probability of freezing only the full design.
pub const P_FREEZE_FIRST: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One slot, the full design, generated from text.
    T2i,
    /// Full design and all layers generated from text.
    T2l,
    /// Full design given; layers generated.
    I2l,
    /// Any other mix of given and generated slots.
    Partial,
}

/// Which image slots are generated and which are given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub task: Task,
    /// One flag per slot; slot 0 is the full design.
    pub frozen: Vec<bool>,
}

impl TaskPlan {
    pub fn t2i() -> Self {
        Self {
            task: Task::T2i,
            frozen: vec![false],
        }
    }

    /// Text to `n_layers` layers plus the full design; `n_layers = 0` is T2I.
    pub fn t2l(n_layers: usize) -> Self {
        if n_layers == 0 {
            return Self::t2i();
        }
        Self {
            task: Task::T2l,
            frozen: vec![false; n_layers + 1],
        }
    }

    pub fn i2l(n_layers: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::invalid("TaskPlan::i2l", "decomposition needs at least one layer"));
        }
        let mut frozen = vec![false; n_layers + 1];
        frozen[0] = true;
        Ok(Self {
            task: Task::I2l,
            frozen,
        })
    }

    /// Classify an arbitrary frozen mask.
    pub fn from_frozen(frozen: Vec<bool>) -> Result<Self> {
        if frozen.is_empty() {
            return Err(Error::invalid("TaskPlan", "no slots"));
        }
        if frozen.iter().all(|&f| f) {
            return Err(Error::invalid("TaskPlan", "every slot is frozen"));
        }
        let task = match (frozen.len(), frozen.iter().filter(|&&f| f).count(), frozen[0]) {
            (1, _, _) => Task::T2i,
            (_, 0, _) => Task::T2l,
            (_, 1, true) => Task::I2l,
            _ => Task::Partial,
        };
        Ok(Self { task, frozen })
    }

    pub fn slots(&self) -> usize {
        self.frozen.len()
    }

    pub fn n_layers(&self) -> usize {
        self.frozen.len() - 1
    }

    pub fn is_frozen(&self, slot: usize) -> bool {
        self.frozen[slot]
    }

    pub fn denoised(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.frozen.len()).filter(|&i| !self.frozen[i])
    }
}

/// Draw the training task for a design with `n_layers` layers.
///
/// With probability [`P_CONDITION`] some slots are given: either the full
/// design alone ([`P_FREEZE_FIRST`]) or a uniform random subset of the layers
/// whose size is uniform in `1..=max(1, n-1)`. Otherwise every slot is
/// generated.
pub fn choose_conditioning(n_layers: usize, rng: &mut Rng) -> TaskPlan {
    if n_layers == 0 || !rng.bernoulli(P_CONDITION) {
        return TaskPlan::t2l(n_layers);
    }
    let mut frozen = vec![false; n_layers + 1];
    if rng.bernoulli(P_FREEZE_FIRST) {
        frozen[0] = true;
    } else {
        let k = rng.range_inclusive(1, (n_layers - 1).max(1));
        for i in rng.subset(n_layers, k) {
            frozen[i + 1] = true;
        }
    }
    TaskPlan::from_frozen(frozen).expect("slot 0 or a layer stays generated")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors() {
        assert_eq!(TaskPlan::t2l(0), TaskPlan::t2i());
        assert_eq!(TaskPlan::t2l(2).frozen, vec![false; 3]);
        let p = TaskPlan::i2l(3).unwrap();
        assert_eq!(p.frozen, vec![true, false, false, false]);
        assert_eq!(p.denoised().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(TaskPlan::i2l(0).is_err());
        assert!(TaskPlan::from_frozen(vec![true, true]).is_err());
        assert_eq!(TaskPlan::from_frozen(vec![false, true, false]).unwrap().task, Task::Partial);
    }

    #[test]
    fn never_all_frozen_and_no_layers_means_t2i() {
        let mut rng = Rng::new(3);
        for i in 0..5000 {
            let n = i % 5;
            let p = choose_conditioning(n, &mut rng);
            assert_eq!(p.slots(), n + 1);
            assert!(p.denoised().count() >= 1);
            if n == 0 {
                assert_eq!(p, TaskPlan::t2i());
            }
        }
    }

    #[test]
    fn single_layer_conditioning_freezes_one_slot() {
        let mut rng = Rng::new(4);
        for _ in 0..2000 {
            let p = choose_conditioning(1, &mut rng);
            assert!(p.frozen.iter().filter(|&&f| f).count() <= 1);
        }
    }
}
