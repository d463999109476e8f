use crate::error::{Error, Result};
use crate::numeric::NdArray;
use crate::rope::{Position4D, Role};

/// One sample's latent slots `[L, C, H, W]` with per-slot role and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStack {
    pub latents: NdArray<f32>,
    pub roles: Vec<Role>,
    pub t: Vec<f32>,
}

impl SampleStack {
    /// Every slot denoisable at timestep 0.
    pub fn plain(latents: NdArray<f32>) -> Result<Self> {
        let l = *latents
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("SampleStack", "scalar latents"))?;
        Ok(Self {
            latents,
            roles: vec![Role::Denoise; l],
            t: vec![0.0; l],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleShape {
    pub slots: usize,
    pub h: usize,
    pub w: usize,
}

impl SampleShape {
    pub fn tokens(&self) -> usize {
        self.slots * self.h * self.w
    }
}

/// A batch flattened into one token stream without padding.
///
/// Tokens of sample `i` occupy `boundaries[i]..boundaries[i + 1]` (the last
/// sample runs to the end), slot-major then row-major within a slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub channels: usize,
    /// `[total_tokens * channels]`
    pub tokens: Vec<f32>,
    pub boundaries: Vec<usize>,
    pub positions: Vec<Position4D>,
    pub roles: Vec<Role>,
    pub timesteps: Vec<f32>,
    pub shapes: Vec<SampleShape>,
}

impl PackedSequence {
    pub fn total_tokens(&self) -> usize {
        self.roles.len()
    }

    pub fn num_samples(&self) -> usize {
        self.shapes.len()
    }

    pub fn sample_range(&self, i: usize) -> std::ops::Range<usize> {
        let end = self.boundaries.get(i + 1).copied().unwrap_or(self.total_tokens());
        self.boundaries[i]..end
    }

    /// Boundaries implied by the per-sample shapes.
    pub fn expected_boundaries(shapes: &[SampleShape]) -> Vec<usize> {
        let mut acc = 0;
        shapes
            .iter()
            .map(|s| {
                let b = acc;
                acc += s.tokens();
                b
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let corrupt = |msg: String| Err(Error::Data(format!("packed sequence: {msg}")));
        if self.shapes.is_empty() {
            return corrupt("no samples".into());
        }
        if self.boundaries.len() != self.shapes.len() {
            return corrupt(format!("{} boundaries for {} samples", self.boundaries.len(), self.shapes.len()));
        }
        if self.boundaries[0] != 0 || self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return corrupt(format!("boundaries {:?} are not strictly increasing from 0", self.boundaries));
        }
        if self.boundaries != Self::expected_boundaries(&self.shapes) {
            return corrupt("boundaries disagree with sample shapes".into());
        }
        let total: usize = self.shapes.iter().map(SampleShape::tokens).sum();
        if total != self.total_tokens()
            || self.positions.len() != total
            || self.timesteps.len() != total
            || self.tokens.len() != total * self.channels
        {
            return corrupt(format!("token tables disagree with total {total}"));
        }
        Ok(())
    }
}

pub fn pack(batch: &[SampleStack]) -> Result<PackedSequence> {
    let first = batch
        .first()
        .ok_or_else(|| Error::invalid("pack", "empty batch"))?;
    let lead = first.latents.shape();
    if lead.len() != 4 {
        return Err(Error::invalid("pack", format!("expected [L, C, H, W], got {lead:?}")));
    }
    let (slots, channels) = (lead[0], lead[1]);
    let total: usize = batch.iter().map(|s| s.latents.len() / channels.max(1)).sum();
    let mut out = PackedSequence {
        channels,
        tokens: Vec::with_capacity(total * channels),
        boundaries: Vec::with_capacity(batch.len()),
        positions: Vec::with_capacity(total),
        roles: Vec::with_capacity(total),
        timesteps: Vec::with_capacity(total),
        shapes: Vec::with_capacity(batch.len()),
    };
    for s in batch {
        let shape = s.latents.shape();
        if shape.len() != 4 || shape[0] != slots || shape[1] != channels {
            return Err(Error::shape("pack", lead, shape));
        }
        if s.roles.len() != slots || s.t.len() != slots {
            return Err(Error::invalid("pack", "roles and timesteps need one entry per slot"));
        }
        for (&role, &t) in s.roles.iter().zip(&s.t) {
            if role == Role::Prompt {
                return Err(Error::invalid("pack", "image slots cannot carry the prompt role"));
            }
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid("pack", format!("timestep {t} outside [0, 1]")));
            }
            if role == Role::Frozen && t != 0.0 {
                return Err(Error::invalid("pack", "frozen slots must have timestep 0"));
            }
        }
        let (h, w) = (shape[2], shape[3]);
        let plane = h * w;
        out.boundaries.push(out.roles.len());
        let data = s.latents.data();
        for slot in 0..slots {
            let base = slot * channels * plane;
            for p in 0..plane {
                out.tokens.extend((0..channels).map(|c| data[base + c * plane + p]));
                out.positions.push(Position4D {
                    h: (p / w) as u32,
                    w: (p % w) as u32,
                    f: slot as u32,
                    r: s.roles[slot].code(),
                });
                out.roles.push(s.roles[slot]);
                out.timesteps.push(s.t[slot]);
            }
        }
        out.shapes.push(SampleShape { slots, h, w });
    }
    Ok(out)
}

pub fn unpack(packed: &PackedSequence) -> Result<Vec<SampleStack>> {
    packed.validate()?;
    let c = packed.channels;
    let mut out = Vec::with_capacity(packed.num_samples());
    for (i, shape) in packed.shapes.iter().enumerate() {
        let range = packed.sample_range(i);
        let plane = shape.h * shape.w;
        let mut data = vec![0.0; shape.tokens() * c];
        for (k, tok) in packed.tokens[range.start * c..range.end * c].chunks_exact(c).enumerate() {
            let (slot, p) = (k / plane, k % plane);
            for (ch, &v) in tok.iter().enumerate() {
                data[slot * c * plane + ch * plane + p] = v;
            }
        }
        let slot_starts = (0..shape.slots).map(|s| range.start + s * plane);
        let roles = slot_starts.clone().map(|j| packed.roles[j]).collect();
        let t = slot_starts.map(|j| packed.timesteps[j]).collect();
        out.push(SampleStack {
            latents: NdArray::new([shape.slots, c, shape.h, shape.w], data)?,
            roles,
            t,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn stack(rng: &mut Rng, l: usize, c: usize, h: usize, w: usize) -> SampleStack {
        let latents = NdArray::from_fn([l, c, h, w], |_| rng.normal() as f32);
        let mut s = SampleStack::plain(latents).unwrap();
        s.roles[0] = Role::Frozen;
        for t in s.t.iter_mut().skip(1) {
            *t = rng.uniform() as f32;
        }
        s
    }

    #[test]
    fn boundary_formula_example() {
        let mut rng = Rng::new(1);
        let batch = vec![stack(&mut rng, 3, 2, 2, 2), stack(&mut rng, 3, 2, 1, 2)];
        let p = pack(&batch).unwrap();
        assert_eq!(p.boundaries, vec![0, 12]);
        assert_eq!(p.total_tokens(), 18);
        assert_eq!(unpack(&p).unwrap(), batch);
    }

    #[test]
    fn single_sample() {
        let mut rng = Rng::new(2);
        let p = pack(&[stack(&mut rng, 2, 3, 3, 4)]).unwrap();
        assert_eq!(p.boundaries, vec![0]);
        assert_eq!(p.total_tokens(), 24);
        assert_eq!(p.sample_range(0), 0..24);
    }

    #[test]
    fn rejects_bad_batches() {
        let mut rng = Rng::new(3);
        assert!(pack(&[]).is_err());
        let a = stack(&mut rng, 2, 3, 2, 2);
        assert!(pack(&[a.clone(), stack(&mut rng, 3, 3, 2, 2)]).is_err());
        assert!(pack(&[a.clone(), stack(&mut rng, 2, 4, 2, 2)]).is_err());
        let mut bad = a.clone();
        bad.t[0] = 0.5;
        assert!(pack(&[bad]).is_err());
    }

    #[test]
    fn corrupted_boundaries_rejected() {
        let mut rng = Rng::new(4);
        let p = pack(&[stack(&mut rng, 2, 2, 2, 2), stack(&mut rng, 2, 2, 3, 1)]).unwrap();
        let mut q = p.clone();
        q.boundaries = vec![0, 0];
        assert!(unpack(&q).is_err());
        let mut q = p.clone();
        q.boundaries = vec![0, 100];
        assert!(unpack(&q).is_err());
        let mut q = p;
        q.boundaries = vec![1, 8];
        assert!(unpack(&q).is_err());
    }

    #[test]
    fn positions_follow_slots_and_grid() {
        let mut rng = Rng::new(5);
        let p = pack(&[stack(&mut rng, 2, 1, 2, 3)]).unwrap();
        assert_eq!(p.positions[0], Position4D { h: 0, w: 0, f: 0, r: 2 });
        assert_eq!(p.positions[5], Position4D { h: 1, w: 2, f: 0, r: 2 });
        assert_eq!(p.positions[6], Position4D { h: 0, w: 0, f: 1, r: 1 });
    }
}
