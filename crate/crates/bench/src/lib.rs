//! Fixtures shared by the benchmarks.

use layerdiff_core::bucket::SampleStack;
use layerdiff_core::numeric::{NdArray, Rng};
use layerdiff_core::rope::Role;

pub fn random_array(shape: &[usize], seed: u64) -> NdArray<f32> {
    let mut rng = Rng::new(seed);
    NdArray::from_fn(shape.to_vec(), |_| rng.normal() as f32)
}

/// `samples` stacks of `slots` latent grids, slot 0 frozen.
pub fn stacks(samples: usize, slots: usize, d: usize, h: usize, w: usize) -> Vec<SampleStack> {
    (0..samples)
        .map(|i| {
            let roles: Vec<Role> = (0..slots).map(|s| if s == 0 { Role::Frozen } else { Role::Denoise }).collect();
            let t = roles.iter().map(|r| if *r == Role::Frozen { 0.0 } else { 0.5 }).collect();
            SampleStack {
                latents: random_array(&[slots, d, h, w], i as u64),
                roles,
                t,
            }
        })
        .collect()
}
