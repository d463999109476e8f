use crate::bucket::{pack, unpack, PackedSequence, SampleStack};
use crate::error::{Error, Result};
use crate::numeric::{Ctx, NdArray, Rng};
use crate::prompt::TokenizedPrompt;
use crate::rope::Role;

use super::model::DitInput;
use super::task::TaskPlan;
use super::train::DitModel;

/// Default number of Euler steps.
pub const DEFAULT_SAMPLE_STEPS: usize = 50;

/// One design to generate.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub prompt: TokenizedPrompt,
    pub plan: TaskPlan,
    /// Latent grid size.
    pub h: usize,
    pub w: usize,
    /// Clean latents `[d, h, w]` for frozen slots; `None` elsewhere.
    pub given: Vec<Option<NdArray<f32>>>,
}

/// Integrate `dx/dt = -v` from `t = 1` to `t = 0` over `steps` uniform
/// Euler steps. Only denoisable tokens move; `velocity` returns one row of
/// `channels` values per denoisable token, in packed order.
pub fn euler(
    packed: &mut PackedSequence,
    steps: usize,
    mut velocity: impl FnMut(&PackedSequence) -> Result<Vec<f32>>,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::invalid("sample", "steps must be at least 1"));
    }
    let c = packed.channels;
    let moving: Vec<usize> = (0..packed.total_tokens())
        .filter(|&i| packed.roles[i] == Role::Denoise)
        .collect();
    if moving.is_empty() {
        return Err(Error::invalid("sample", "nothing to denoise"));
    }
    for k in 0..steps {
        let t = 1.0 - k as f64 / steps as f64;
        let next = 1.0 - (k + 1) as f64 / steps as f64;
        let dt = (t - next) as f32;
        for &i in &moving {
            packed.timesteps[i] = t as f32;
        }
        let v = velocity(packed)?;
        if v.len() != moving.len() * c {
            return Err(Error::shape("sample velocity", &[v.len()], &[moving.len() * c]));
        }
        for (row, &i) in moving.iter().enumerate() {
            let x = &mut packed.tokens[i * c..(i + 1) * c];
            for (xv, &vv) in x.iter_mut().zip(&v[row * c..(row + 1) * c]) {
                *xv -= dt * vv;
            }
        }
    }
    for &i in &moving {
        packed.timesteps[i] = 0.0;
    }
    Ok(())
}

/// Generate latents `[slots, d, h, w]` for each request. Frozen slots are
/// returned bit-identical to the given latents. Requests in one call must
/// share a slot count.
pub fn sample(model: &DitModel, requests: &[SampleRequest], steps: usize, seed: u64) -> Result<Vec<NdArray<f32>>> {
    let d = model.dit.config.latent_dim;
    let mut rng = Rng::new(seed);
    let mut stacks = Vec::with_capacity(requests.len());
    for r in requests {
        let slots = r.plan.slots();
        if r.given.len() != slots {
            return Err(Error::invalid("sample", format!("{} given entries for {slots} slots", r.given.len())));
        }
        let plane = d * r.h * r.w;
        let mut data = Vec::with_capacity(slots * plane);
        for (s, given) in r.given.iter().enumerate() {
            match (r.plan.is_frozen(s), given) {
                (true, Some(x)) => {
                    if x.shape() != [d, r.h, r.w] {
                        return Err(Error::shape("sample given latent", x.shape(), &[d, r.h, r.w]));
                    }
                    data.extend_from_slice(x.data());
                }
                (true, None) => {
                    return Err(Error::invalid("sample", format!("frozen slot {s} has no conditioning latent")));
                }
                (false, _) => data.extend((0..plane).map(|_| rng.normal() as f32)),
            }
        }
        stacks.push(SampleStack {
            latents: NdArray::new([slots, d, r.h, r.w], data)?,
            roles: r
                .plan
                .frozen
                .iter()
                .map(|&f| if f { Role::Frozen } else { Role::Denoise })
                .collect(),
            t: vec![0.0; slots],
        });
    }
    let mut packed = pack(&stacks)?;
    let prompts: Vec<TokenizedPrompt> = requests.iter().map(|r| r.prompt.clone()).collect();
    let rope = model.dit.config.rope;
    euler(&mut packed, steps, |p| {
        let input = DitInput::new(p.clone(), prompts.clone(), &rope)?;
        let mut ctx = Ctx::inference(&model.store);
        let (tape, params) = ctx.parts();
        let x = tape.constant(NdArray::new([p.total_tokens(), p.channels], p.tokens.clone())?);
        let v = model.dit.forward(tape, params, &input, x)?;
        let out = tape.value(v);
        if !out.all_finite() {
            return Err(Error::NonFinite("transformer sample"));
        }
        Ok(out.data().to_vec())
    })?;
    Ok(unpack(&packed)?.into_iter().map(|s| s.latents).collect())
}
