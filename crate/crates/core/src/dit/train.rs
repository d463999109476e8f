use serde::{Deserialize, Serialize};

use crate::bucket::{pack, SampleStack};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numeric::{AdamW, Ctx, NdArray, OptimizerSettings, ParamStore, Real, Rng, Tape, Var};
use crate::prompt::TokenizedPrompt;
use crate::rope::{Role, RopeSplit};

use super::model::{Dit, DitConfig, DitInput, DIT_PREFIX};
use super::task::{choose_conditioning, TaskPlan};

/// One training design: normalized latents `[slots, d, h, w]` (slot 0 the
/// full design) and its tokenized prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct DitSample {
    pub latents: NdArray<f32>,
    pub prompt: TokenizedPrompt,
}

impl DitSample {
    pub fn n_layers(&self) -> usize {
        self.latents.shape()[0] - 1
    }
}

/// Per-sample draws of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw {
    pub plan: TaskPlan,
    pub t: f32,
    /// Noise with the shape of the sample's latents.
    pub noise: NdArray<f32>,
}

impl FlowDraw {
    pub fn sample(s: &DitSample, rng: &mut Rng) -> Self {
        let plan = choose_conditioning(s.n_layers(), rng);
        let t = rng.uniform() as f32;
        let noise = NdArray::from_fn(s.latents.shape().to_vec(), |_| rng.normal() as f32);
        Self { plan, t, noise }
    }
}

/// A packed training batch: clean tokens, noise tokens and interpolation
/// coefficients `x_t = a * x0 + b * noise`.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub input: DitInput,
    pub x0: NdArray<f32>,
    pub noise: NdArray<f32>,
    a: NdArray<f32>,
    b: NdArray<f32>,
    denoise_tokens: Vec<usize>,
}

fn stack(latents: &NdArray<f32>, plan: &TaskPlan, t: f32) -> Result<SampleStack> {
    if latents.rank() != 4 || latents.shape()[0] != plan.slots() {
        return Err(Error::invalid(
            "flow batch",
            format!("latents {:?} do not match a {}-slot plan", latents.shape(), plan.slots()),
        ));
    }
    Ok(SampleStack {
        latents: latents.clone(),
        roles: plan
            .frozen
            .iter()
            .map(|&f| if f { Role::Frozen } else { Role::Denoise })
            .collect(),
        t: plan.frozen.iter().map(|&f| if f { 0.0 } else { t }).collect(),
    })
}

impl FlowBatch {
    pub fn new(samples: &[&DitSample], draws: &[FlowDraw], rope: &RopeSplit) -> Result<Self> {
        if samples.len() != draws.len() {
            return Err(Error::invalid("flow batch", "one draw per sample required"));
        }
        if !draws.iter().all(|d| (0.0..=1.0).contains(&d.t)) {
            return Err(Error::invalid("flow batch", "t outside [0, 1]"));
        }
        let clean: Vec<SampleStack> = samples
            .iter()
            .zip(draws)
            .map(|(s, d)| stack(&s.latents, &d.plan, d.t))
            .collect::<Result<_>>()?;
        let noisy: Vec<SampleStack> = samples
            .iter()
            .zip(draws)
            .map(|(s, d)| {
                if d.noise.shape() != s.latents.shape() {
                    return Err(Error::shape("flow batch noise", d.noise.shape(), s.latents.shape()));
                }
                stack(&d.noise, &d.plan, d.t)
            })
            .collect::<Result<_>>()?;
        let packed = pack(&clean)?;
        let noise_packed = pack(&noisy)?;
        let c = packed.channels;
        let n = packed.total_tokens();
        let mut a = Vec::with_capacity(n * c);
        let mut b = Vec::with_capacity(n * c);
        for i in 0..n {
            let (ai, bi) = match packed.roles[i] {
                Role::Denoise => (1.0 - packed.timesteps[i], packed.timesteps[i]),
                _ => (1.0, 0.0),
            };
            a.extend(std::iter::repeat_n(ai, c));
            b.extend(std::iter::repeat_n(bi, c));
        }
        let x0 = NdArray::new([n, c], packed.tokens.clone())?;
        let noise = NdArray::new([n, c], noise_packed.tokens)?;
        let prompts = samples.iter().map(|s| s.prompt.clone()).collect();
        let input = DitInput::new(packed, prompts, rope)?;
        if input.layout.segments.len() != samples.len() {
            return Err(Error::invalid("flow batch", "segment count mismatch"));
        }
        let denoise_tokens = input.denoise_tokens();
        if denoise_tokens.is_empty() {
            return Err(Error::invalid("flow batch", "every slot is frozen"));
        }
        Ok(Self {
            input,
            x0,
            noise,
            a: NdArray::new([n, c], a)?,
            b: NdArray::new([n, c], b)?,
            denoise_tokens,
        })
    }

    /// Noisy model input `x_t` as plain numbers.
    pub fn x_t(&self) -> NdArray<f32> {
        let d = self
            .x0
            .data()
            .iter()
            .zip(self.noise.data())
            .zip(self.a.data().iter().zip(self.b.data()))
            .map(|((&x, &e), (&a, &b))| a * x + b * e)
            .collect();
        NdArray::new(self.x0.shape().to_vec(), d).expect("same shape")
    }
}

/// Mean squared velocity error over denoisable tokens. `noise` is the
/// packed noise on the tape, so its gradient can be inspected.
pub fn flow_loss<T: Real>(dit: &Dit, tape: &mut Tape<T>, p: &[Var], batch: &FlowBatch, noise: Var) -> Result<Var> {
    let x0 = tape.constant(batch.x0.cast());
    let a = tape.constant(batch.a.cast());
    let b = tape.constant(batch.b.cast());
    let ax = tape.mul(x0, a)?;
    let bn = tape.mul(noise, b)?;
    let xt = tape.add(ax, bn)?;
    let pred = dit.forward(tape, p, &batch.input, xt)?;
    let v = tape.sub(noise, x0)?;
    let v = tape.gather_rows(v, &batch.denoise_tokens)?;
    let err = tape.sub(pred, v)?;
    let sq = tape.square(err);
    Ok(tape.mean(sq))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DitTrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
}

impl Default for DitTrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 2,
            seed: 0,
            optimizer: OptimizerSettings {
                lr: 5e-4,
                lr_min: 5e-5,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DitStepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// A transformer with its parameters.
#[derive(Debug, Clone)]
pub struct DitModel {
    pub dit: Dit,
    pub store: ParamStore<f32>,
}

pub const DIT_META: &str = "meta.dit";

impl DitModel {
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let dit = Dit::new(config, &mut store, &mut Rng::stream(seed, u64::MAX))?;
        Ok(Self { dit, store })
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.push(DIT_META, NdArray::new([7], self.dit.config.meta())?)?;
        ck.push_store(&self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let store = ck.to_store(DIT_PREFIX)?;
        let dit = Dit::from_store(&store, ck.require(DIT_META)?.data())?;
        Ok(Self { dit, store })
    }
}

/// Training state that can be checkpointed and resumed.
#[derive(Debug, Clone)]
pub struct DitTrainer {
    pub model: DitModel,
    pub settings: DitTrainSettings,
    opt: AdamW,
}

const OPT_STEP: &str = "opt.step";

impl DitTrainer {
    pub fn new(model: DitModel, settings: DitTrainSettings) -> Self {
        let opt = AdamW::new(settings.optimizer, &model.store);
        Self { model, settings, opt }
    }

    pub fn step(&self) -> usize {
        self.opt.steps_taken() as usize
    }

    /// Run one step; the batch and all draws depend only on the seed and
    /// the step index.
    pub fn train_step(&mut self, samples: &[DitSample]) -> Result<DitStepLog> {
        if samples.is_empty() {
            return Err(Error::Data("no training designs".into()));
        }
        let step = self.step();
        let mut rng = Rng::stream(self.settings.seed, step as u64);
        // a batch shares one slot count, as a bucket does
        let anchor = &samples[rng.below(samples.len())];
        let mates: Vec<&DitSample> = samples
            .iter()
            .filter(|s| s.latents.shape()[0] == anchor.latents.shape()[0])
            .collect();
        let mut picked = vec![anchor];
        while picked.len() < self.settings.batch {
            picked.push(mates[rng.below(mates.len())]);
        }
        let draws: Vec<FlowDraw> = picked.iter().map(|s| FlowDraw::sample(s, &mut rng)).collect();
        let batch = FlowBatch::new(&picked, &draws, &self.model.dit.config.rope)?;

        let mut ctx = Ctx::train(&self.model.store);
        let (tape, p) = ctx.parts();
        let noise = tape.constant(batch.noise.clone());
        let loss = flow_loss(&self.model.dit, tape, p, &batch, noise)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite("transformer loss"));
        }
        let grads = ctx.param_grads(loss)?;
        drop(ctx);
        let lr = self.settings.optimizer.lr_at(step, self.settings.steps);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        Ok(DitStepLog { step, loss: value, lr })
    }

    /// Train until `settings.steps` steps have been taken.
    pub fn run(&mut self, samples: &[DitSample], mut on_step: impl FnMut(&DitStepLog)) -> Result<Vec<DitStepLog>> {
        let mut log = Vec::new();
        while self.step() < self.settings.steps {
            let entry = self.train_step(samples)?;
            on_step(&entry);
            log.push(entry);
        }
        Ok(log)
    }

    /// Model weights plus optimizer moments and step count.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        self.model.to_checkpoint(&mut ck)?;
        let step = self.opt.steps_taken();
        // two f32 halves keep every u64 step count exact
        ck.push(OPT_STEP, NdArray::new([2], vec![(step >> 24) as f32, (step & 0xff_ffff) as f32])?)?;
        for (id, m, v) in self.opt.moments() {
            let name = self.model.store.name(id);
            ck.push(format!("opt.m.{name}"), m.clone())?;
            ck.push(format!("opt.v.{name}"), v.clone())?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, settings: DitTrainSettings) -> Result<Self> {
        let model = DitModel::from_checkpoint(ck)?;
        let mut opt = AdamW::new(settings.optimizer, &model.store);
        if let Some(s) = ck.get(OPT_STEP) {
            let d = s.data();
            if d.len() != 2 {
                return Err(Error::Data("malformed optimizer step".into()));
            }
            let step = ((d[0] as u64) << 24) | d[1] as u64;
            let mut moments = Vec::new();
            for (id, name, value) in model.store.iter() {
                if let (Some(m), Some(v)) = (ck.get(&format!("opt.m.{name}")), ck.get(&format!("opt.v.{name}"))) {
                    if m.shape() != value.shape() || v.shape() != value.shape() {
                        return Err(Error::Data(format!("optimizer state for `{name}` has the wrong shape")));
                    }
                    moments.push((id, m.clone(), v.clone()));
                }
            }
            opt.restore(step, moments);
        }
        Ok(Self { model, settings, opt })
    }
}
