use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bucket::PackedSequence;
use crate::error::{Error, Result};
use crate::nn::{Linear, WeightInit};
use crate::numeric::{Init, NdArray, ParamId, ParamStore, Real, Rng, Tape, Var};
use crate::prompt::{TextEmbedder, TokenizedPrompt};
use crate::rope::{Position4D, Role, RopeSplit};

/// Width of the sinusoidal timestep features.
pub const TIME_FEATURES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitConfig {
    pub depth: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_ratio: usize,
    pub rope: RopeSplit,
    /// Text embedding width, the input of the text adapter.
    pub text_dim: usize,
    /// Latent channels, the input of the image adapter.
    pub latent_dim: usize,
    pub vocab: usize,
    /// Largest number of image slots (full design plus layers).
    pub max_slots: usize,
}

impl DitConfig {
    /// Default small model for a latent width and vocabulary size.
    pub fn desk(latent_dim: usize, vocab: usize) -> Self {
        Self {
            depth: 4,
            heads: 4,
            hidden: 128,
            mlp_ratio: 4,
            rope: RopeSplit::desk(),
            text_dim: 64,
            latent_dim,
            vocab,
            max_slots: 9,
        }
    }

    /// The large configuration (56 blocks, 24 heads of 128). Recorded for
    /// reference only.
    pub fn full_scale(latent_dim: usize, vocab: usize) -> Self {
        Self {
            depth: 56,
            heads: 24,
            hidden: 3072,
            mlp_ratio: 4,
            rope: RopeSplit::full_scale(),
            text_dim: 4096,
            latent_dim,
            vocab,
            max_slots: 9,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("dit: {m}")));
        if self.depth == 0 || self.heads == 0 || self.hidden == 0 || self.mlp_ratio == 0 {
            return bad("depth, heads, hidden and mlp_ratio must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by {} heads", self.hidden, self.heads));
        }
        self.rope.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.rope.head_dim() != self.head_dim() {
            return bad(format!(
                "rope split {:?} sums to {}, head dim is {}",
                self.rope.dims,
                self.rope.head_dim(),
                self.head_dim()
            ));
        }
        if self.text_dim == 0 || self.latent_dim == 0 || self.vocab == 0 || self.max_slots == 0 {
            return bad("text_dim, latent_dim, vocab and max_slots must be positive".into());
        }
        Ok(())
    }

    /// Approximate parameter count, dominated by the blocks.
    pub fn parameter_estimate(&self) -> usize {
        let (h, m) = (self.hidden, self.mlp_ratio);
        let block = 10 * h * h + 2 * m * h * h;
        self.depth.saturating_mul(block) + self.vocab * self.text_dim + (self.text_dim + self.latent_dim + 2) * h
    }

    /// Numbers that cannot be read off parameter shapes, stored alongside
    /// the weights.
    pub fn meta(&self) -> Vec<f32> {
        let mut m = vec![self.heads as f32, self.mlp_ratio as f32, self.rope.base as f32];
        m.extend(self.rope.dims.iter().map(|&d| d as f32));
        m
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Layer handles of the diffusion transformer.
#[derive(Debug, Clone)]
pub struct Dit {
    pub config: DitConfig,
    text: TextEmbedder,
    text_in: Linear,
    image_in: Linear,
    slot_embed: ParamId,
    time1: Linear,
    time2: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    out: Linear,
}

/// Parameter name prefix of the transformer.
pub const DIT_PREFIX: &str = "dit.";

fn find_linear<T: Real>(store: &ParamStore<T>, name: &str) -> Result<Linear> {
    let missing = || Error::Data(format!("transformer parameter `{name}` missing"));
    let w = store.id(&format!("{name}.w")).ok_or_else(missing)?;
    let b = store.id(&format!("{name}.b")).ok_or_else(missing)?;
    let s = store.get(w).shape();
    if s.len() != 2 || store.get(b).shape() != [s[1]] {
        return Err(Error::Data(format!("transformer parameter `{name}` has shape {s:?}")));
    }
    Ok(Linear {
        w,
        b,
        fan_in: s[0],
        fan_out: s[1],
    })
}

impl Dit {
    pub fn new(config: DitConfig, store: &mut ParamStore<f32>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut init = Init { rng };
        let i = &mut init;
        let text = TextEmbedder::new(store, "dit.text", config.vocab, config.text_dim, i)?;
        let text_in = Linear::new(store, "dit.text_in", config.text_dim, h, i, WeightInit::FanIn(1.0))?;
        let image_in = Linear::new(store, "dit.image_in", config.latent_dim, h, i, WeightInit::FanIn(1.0))?;
        let slot_embed = store.add("dit.slot_embed", i.normal(&[config.max_slots, h], 0.5))?;
        let time1 = Linear::new(store, "dit.time1", TIME_FEATURES, h, i, WeightInit::FanIn(1.0))?;
        let time2 = Linear::new(store, "dit.time2", h, h, i, WeightInit::FanIn(1.0))?;
        let mut blocks = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            let n = |s: &str| format!("dit.block{b}.{s}");
            blocks.push(Block {
                modulation: Linear::new(store, &n("mod"), h, 6 * h, i, WeightInit::Zero)?,
                qkv: Linear::new(store, &n("qkv"), h, 3 * h, i, WeightInit::FanIn(1.0))?,
                proj: Linear::new(store, &n("proj"), h, h, i, WeightInit::FanIn(1.0))?,
                fc1: Linear::new(store, &n("fc1"), h, config.mlp_ratio * h, i, WeightInit::FanIn(1.0))?,
                fc2: Linear::new(store, &n("fc2"), config.mlp_ratio * h, h, i, WeightInit::FanIn(1.0))?,
            });
        }
        let final_mod = Linear::new(store, "dit.final_mod", h, 2 * h, i, WeightInit::Zero)?;
        let out = Linear::new(store, "dit.out", h, config.latent_dim, i, WeightInit::Zero)?;
        Ok(Self {
            config,
            text,
            text_in,
            image_in,
            slot_embed,
            time1,
            time2,
            blocks,
            final_mod,
            out,
        })
    }

    /// Rebuild from parameter shapes plus the [`DitConfig::meta`] numbers.
    pub fn from_store<T: Real>(store: &ParamStore<T>, meta: &[f32]) -> Result<Self> {
        if meta.len() != 7 {
            return Err(Error::Data(format!("transformer meta has {} entries, expected 7", meta.len())));
        }
        let table = store
            .id("dit.text.table")
            .ok_or_else(|| Error::Data("transformer parameter `dit.text.table` missing".into()))?;
        let slot_embed = store
            .id("dit.slot_embed")
            .ok_or_else(|| Error::Data("transformer parameter `dit.slot_embed` missing".into()))?;
        let text_in = find_linear(store, "dit.text_in")?;
        let image_in = find_linear(store, "dit.image_in")?;
        let mut blocks = Vec::new();
        while store.id(&format!("dit.block{}.qkv.w", blocks.len())).is_some() {
            let n = |s: &str| format!("dit.block{}.{s}", blocks.len());
            blocks.push(Block {
                modulation: find_linear(store, &n("mod"))?,
                qkv: find_linear(store, &n("qkv"))?,
                proj: find_linear(store, &n("proj"))?,
                fc1: find_linear(store, &n("fc1"))?,
                fc2: find_linear(store, &n("fc2"))?,
            });
        }
        let tshape = store.get(table).shape();
        let config = DitConfig {
            depth: blocks.len(),
            heads: meta[0] as usize,
            hidden: text_in.fan_out,
            mlp_ratio: meta[1] as usize,
            rope: RopeSplit {
                dims: [meta[3] as usize, meta[4] as usize, meta[5] as usize, meta[6] as usize],
                base: meta[2] as f64,
            },
            text_dim: tshape[1],
            latent_dim: image_in.fan_in,
            vocab: tshape[0],
            max_slots: store.get(slot_embed).shape()[0],
        };
        config.validate().map_err(|e| Error::Data(e.to_string()))?;
        Ok(Self {
            text: TextEmbedder {
                table,
                dim: config.text_dim,
            },
            text_in,
            image_in,
            slot_embed,
            time1: find_linear(store, "dit.time1")?,
            time2: find_linear(store, "dit.time2")?,
            blocks,
            final_mod: find_linear(store, "dit.final_mod")?,
            out: find_linear(store, "dit.out")?,
            config,
        })
    }

    /// Velocity prediction for every denoisable token of `input`, in packed
    /// order. `image_tokens` holds the packed latent values `[tokens, d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], input: &DitInput, image_tokens: Var) -> Result<Var> {
        let layout = &input.layout;
        let h = self.config.hidden;
        let expect = [input.packed.total_tokens(), self.config.latent_dim];
        if tape.shape(image_tokens) != expect {
            return Err(Error::shape("dit forward", tape.shape(image_tokens), &expect));
        }
        if layout.denoise_rows.is_empty() {
            return Err(Error::invalid("dit forward", "no denoisable tokens"));
        }
        if let Some(&s) = layout.slot_ids.iter().find(|&&s| s >= self.config.max_slots) {
            return Err(Error::invalid("dit forward", format!("slot {s} beyond max_slots {}", self.config.max_slots)));
        }
        if layout.text_ids.iter().any(|&id| id as usize >= self.config.vocab) {
            return Err(Error::UnknownToken { token: format!("<id beyond vocabulary of {}>", self.config.vocab) });
        }

        // token features in stream order
        let text = self.text.embed(tape, p[self.text.table.index()], &layout.text_ids)?;
        let text = self.text_in.apply(tape, p, text)?;
        let img = self.image_in.apply(tape, p, image_tokens)?;
        let slots = tape.gather_rows(p[self.slot_embed.index()], &layout.slot_ids)?;
        let img = tape.add(img, slots)?;
        let both = tape.concat(&[text, img], 0)?;
        let mut x = tape.gather_rows(both, &layout.order)?;

        // conditioning vector per distinct timestep
        let tf = tape.constant(timestep_features(&layout.times));
        let c = self.time1.apply(tape, p, tf)?;
        let c = tape.silu(c);
        let c = self.time2.apply(tape, p, c)?;
        let c = tape.silu(c);

        let cos = Arc::new(layout.cos.cast::<T>());
        let sin = Arc::new(layout.sin.cast::<T>());
        let (n, heads, hd) = (layout.order.len(), self.config.heads, self.config.head_dim());
        for b in &self.blocks {
            let m = b.modulation.apply(tape, p, c)?;
            let m = tape.gather_rows(m, &layout.time_index)?;
            let part = |tape: &mut Tape<T>, k: usize| tape.slice(m, 1, k * h, h);
            let (shift1, scale1, gate1) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
            let (shift2, scale2, gate2) = (part(tape, 3)?, part(tape, 4)?, part(tape, 5)?);

            let a = modulate(tape, x, shift1, scale1)?;
            let qkv = b.qkv.apply(tape, p, a)?;
            let split = |tape: &mut Tape<T>, k: usize| -> Result<Var> {
                let s = tape.slice(qkv, 1, k * h, h)?;
                tape.reshape(s, &[n, heads, hd])
            };
            let (q, k, v) = (split(tape, 0)?, split(tape, 1)?, split(tape, 2)?);
            let q = tape.rotary(q, cos.clone(), sin.clone())?;
            let k = tape.rotary(k, cos.clone(), sin.clone())?;
            let att = tape.segment_attention(q, k, v, &layout.segments)?;
            let att = tape.reshape(att, &[n, h])?;
            let att = b.proj.apply(tape, p, att)?;
            let att = tape.mul(att, gate1)?;
            x = tape.add(x, att)?;

            let a = modulate(tape, x, shift2, scale2)?;
            let f = b.fc1.apply(tape, p, a)?;
            let f = tape.gelu(f);
            let f = b.fc2.apply(tape, p, f)?;
            let f = tape.mul(f, gate2)?;
            x = tape.add(x, f)?;
        }

        let m = self.final_mod.apply(tape, p, c)?;
        let m = tape.gather_rows(m, &layout.time_index)?;
        let shift = tape.slice(m, 1, 0, h)?;
        let scale = tape.slice(m, 1, h, h)?;
        let y = modulate(tape, x, shift, scale)?;
        let y = tape.gather_rows(y, &layout.denoise_rows)?;
        self.out.apply(tape, p, y)
    }
}

/// `rms_norm(x) * (1 + scale) + shift`
fn modulate<T: Real>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.rms_norm(x);
    let s = tape.add_scalar(scale, T::one());
    let y = tape.mul(n, s)?;
    tape.add(y, shift)
}

/// Sinusoidal features of `t * 1000`, `[times, TIME_FEATURES]`.
pub fn timestep_features<T: Real>(times: &[f32]) -> NdArray<T> {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(times.len() * TIME_FEATURES);
    for &t in times {
        let t = t as f64 * 1000.0;
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out.push(T::lit((t * f).cos()));
        }
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out.push(T::lit((t * f).sin()));
        }
    }
    NdArray::new([times.len(), TIME_FEATURES], out).expect("sized above")
}

/// Index tables that interleave prompts with packed image tokens.
#[derive(Debug, Clone)]
pub struct StreamLayout {
    /// Vocabulary ids of every prompt, concatenated.
    pub text_ids: Vec<u32>,
    /// Slot index of each packed image token.
    pub slot_ids: Vec<usize>,
    /// Row of `[text; images]` placed at each stream position.
    pub order: Vec<usize>,
    /// Per-sample stream ranges (prompt then images).
    pub segments: Vec<Range<usize>>,
    /// Stream rows of denoisable tokens, in packed order.
    pub denoise_rows: Vec<usize>,
    /// Distinct timesteps and the one each stream row uses.
    pub times: Vec<f32>,
    pub time_index: Vec<usize>,
    pub cos: NdArray<f64>,
    pub sin: NdArray<f64>,
}

/// Everything the transformer reads besides the image token values.
#[derive(Debug, Clone)]
pub struct DitInput {
    pub packed: PackedSequence,
    pub prompts: Vec<TokenizedPrompt>,
    pub layout: StreamLayout,
}

impl DitInput {
    pub fn new(packed: PackedSequence, prompts: Vec<TokenizedPrompt>, rope: &RopeSplit) -> Result<Self> {
        if prompts.len() != packed.num_samples() {
            return Err(Error::invalid(
                "DitInput",
                format!("{} prompts for {} samples", prompts.len(), packed.num_samples()),
            ));
        }
        let text_total: usize = prompts.iter().map(TokenizedPrompt::len).sum();
        let mut layout = StreamLayout {
            text_ids: Vec::with_capacity(text_total),
            slot_ids: packed.positions.iter().map(|p| p.f as usize).collect(),
            order: Vec::new(),
            segments: Vec::new(),
            denoise_rows: Vec::new(),
            times: vec![0.0],
            time_index: Vec::new(),
            cos: NdArray::zeros([0]),
            sin: NdArray::zeros([0]),
        };
        let mut positions: Vec<Position4D> = Vec::new();
        let mut text_row = 0;
        for (i, prompt) in prompts.iter().enumerate() {
            let start = layout.order.len();
            for (k, &id) in prompt.ids.iter().enumerate() {
                layout.text_ids.push(id);
                layout.order.push(text_row);
                layout.time_index.push(0);
                positions.push(prompt.positions[k]);
                text_row += 1;
            }
            for tok in packed.sample_range(i) {
                let row = layout.order.len();
                layout.order.push(text_total + tok);
                positions.push(packed.positions[tok]);
                let t = packed.timesteps[tok];
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::invalid("DitInput", format!("timestep {t} outside [0, 1]")));
                }
                match packed.roles[tok] {
                    Role::Denoise => layout.denoise_rows.push(row),
                    Role::Frozen if t != 0.0 => {
                        return Err(Error::invalid("DitInput", "frozen token with nonzero timestep"))
                    }
                    Role::Frozen => {}
                    Role::Prompt => return Err(Error::invalid("DitInput", "image token with prompt role")),
                }
                let ti = match layout.times.iter().position(|&u| u.to_bits() == t.to_bits()) {
                    Some(ti) => ti,
                    None => {
                        layout.times.push(t);
                        layout.times.len() - 1
                    }
                };
                layout.time_index.push(ti);
            }
            layout.segments.push(start..layout.order.len());
        }
        let (cos, sin) = rope.angle_tables::<f64>(&positions);
        layout.cos = cos;
        layout.sin = sin;
        Ok(Self { packed, prompts, layout })
    }

    pub fn denoise_count(&self) -> usize {
        self.layout.denoise_rows.len()
    }

    /// Packed token indices of the denoisable tokens.
    pub fn denoise_tokens(&self) -> Vec<usize> {
        (0..self.packed.total_tokens())
            .filter(|&i| self.packed.roles[i] == Role::Denoise)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bucket::{pack, SampleStack};
    use crate::dit::train::tests::tiny_config;
    use crate::numeric::Ctx;
    use crate::prompt::{tokenize, PromptBundle, Vocab};

    fn noisy_model() -> (Dit, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let dit = Dit::new(tiny_config(Vocab::grammar().len()), &mut store, &mut rng).unwrap();
        // zero-init output layers would hide everything; perturb all weights
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let cur = store.get(id).clone();
            store
                .set(id, NdArray::from_fn(cur.shape().to_vec(), |i| cur.data()[i] + 0.3 * rng.normal() as f32))
                .unwrap();
        }
        (dit, store)
    }

    fn prompt(caption: &str, n: usize) -> TokenizedPrompt {
        let b = PromptBundle {
            scene_description: "a poster with a red circle".into(),
            layer_captions: (0..n).map(|_| caption.to_string()).collect(),
            type_section: "poster design".into(),
        };
        tokenize(&b, &Vocab::grammar()).unwrap()
    }

    fn stack(h: usize, w: usize, t: f32, seed: u64) -> SampleStack {
        let mut rng = Rng::new(seed);
        SampleStack {
            latents: NdArray::from_fn([3, 3, h, w], |_| rng.normal() as f32),
            roles: vec![Role::Frozen, Role::Denoise, Role::Denoise],
            t: vec![0.0, t, t],
        }
    }

    fn run(dit: &Dit, store: &ParamStore<f32>, stacks: &[SampleStack], prompts: Vec<TokenizedPrompt>) -> Vec<f32> {
        let packed = pack(stacks).unwrap();
        let input = DitInput::new(packed.clone(), prompts, &dit.config.rope).unwrap();
        let mut ctx = Ctx::inference(store);
        let (tape, p) = ctx.parts();
        let x = tape.constant(NdArray::new([packed.total_tokens(), 3], packed.tokens.clone()).unwrap());
        let y = dit.forward(tape, p, &input, x).unwrap();
        assert_eq!(tape.shape(y), [input.denoise_count(), 3]);
        tape.value(y).data().to_vec()
    }

    #[test]
    fn other_samples_do_not_leak() {
        let (dit, store) = noisy_model();
        let a = stack(2, 3, 0.4, 1);
        let out1 = run(&dit, &store, &[a.clone(), stack(3, 2, 0.7, 2)], vec![prompt("a solid navy background", 2); 2]);
        let out2 = run(
            &dit,
            &store,
            &[a, stack(1, 4, 0.1, 9)],
            vec![prompt("a solid navy background", 2), prompt("two lines of red text at the top", 2)],
        );
        let n = 2 * 2 * 3 * 3;
        let worst = out1[..n].iter().zip(&out2[..n]).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(worst <= 1e-5, "{worst}");
        assert!(out1[..n].iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn sample_order_permutes_outputs() {
        let (dit, store) = noisy_model();
        let (a, b) = (stack(2, 3, 0.4, 1), stack(3, 3, 0.8, 2));
        let (pa, pb) = (prompt("a solid navy background", 2), prompt("two lines of red text at the top", 2));
        let ab = run(&dit, &store, &[a.clone(), b.clone()], vec![pa.clone(), pb.clone()]);
        let ba = run(&dit, &store, &[b, a], vec![pb, pa]);
        let na = 2 * 2 * 3 * 3;
        let nb = ab.len() - na;
        let close = |x: &[f32], y: &[f32]| x.iter().zip(y).all(|(u, v)| (u - v).abs() <= 1e-5);
        assert!(close(&ab[..na], &ba[nb..]));
        assert!(close(&ab[na..], &ba[..nb]));
    }

    #[test]
    fn bad_inputs_rejected() {
        let (dit, store) = noisy_model();
        let mut s = stack(2, 2, 0.5, 1);
        let mut packed = pack(&[s.clone()]).unwrap();
        packed.timesteps[0] = 0.5; // frozen token
        assert!(DitInput::new(packed.clone(), vec![prompt("a solid navy background", 2)], &dit.config.rope).is_err());
        packed.timesteps[0] = 0.0;
        packed.timesteps[5] = 1.5;
        assert!(DitInput::new(packed, vec![prompt("a solid navy background", 2)], &dit.config.rope).is_err());

        // more slots than the slot table holds
        s.latents = NdArray::zeros([5, 3, 1, 1]);
        s.roles = vec![Role::Denoise; 5];
        s.t = vec![0.5; 5];
        let packed = pack(&[s]).unwrap();
        let input = DitInput::new(packed, vec![prompt("a solid navy background", 4)], &dit.config.rope).unwrap();
        let mut ctx = Ctx::inference(&store);
        let (tape, p) = ctx.parts();
        let x = tape.constant(NdArray::zeros([5, 3]));
        assert!(dit.forward(tape, p, &input, x).is_err());
    }
}
