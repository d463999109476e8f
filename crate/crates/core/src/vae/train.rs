use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{AdamW, Ctx, NdArray, OptimizerSettings, ParamStore, Rng};
use crate::rgba::{alpha_weighted_rgb_l1, mean_abs_alpha_error, psnr, RgbaImage};

use super::loss::{kl_term, recon_terms, LossWeights};
use super::{Vae, VaeConfig, VaeModel, VaeVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTrainSettings {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub weights: LossWeights,
    /// Weight of the KL term; only used by variational models.
    #[serde(default)]
    pub kl_weight: f64,
    /// Random flips, transposes and RGB channel permutations per batch.
    #[serde(default)]
    pub augment: bool,
}

impl Default for VaeTrainSettings {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            seed: 0,
            optimizer: OptimizerSettings {
                lr: 2e-3,
                lr_min: 2e-4,
                ..Default::default()
            },
            weights: LossWeights::default(),
            kl_weight: 1e-4,
            augment: false,
        }
    }
}

impl VaeTrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("vae training needs steps >= 1 and batch >= 1".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be >= 0".into()));
        }
        self.weights.validate()
    }
}

/// Loss terms of one step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeStepLog {
    pub step: usize,
    pub total: f64,
    pub rgb: f64,
    pub alpha: f64,
    pub perceptual: f64,
    pub kl: f64,
    pub lr: f64,
}

/// Indices of images grouped by size, so a batch can be stacked.
fn size_groups(images: &[RgbaImage]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, im) in images.iter().enumerate() {
        groups.entry(im.dims()).or_default().push(i);
    }
    groups.into_values().collect()
}

fn pick_batch(groups: &[Vec<usize>], total: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    // an anchor image chosen uniformly fixes the size; the rest share it
    let mut k = rng.below(total);
    let group = groups
        .iter()
        .find(|g| {
            if k < g.len() {
                true
            } else {
                k -= g.len();
                false
            }
        })
        .expect("anchor falls in a group");
    let mut out = vec![group[k]];
    while out.len() < batch {
        out.push(group[rng.below(group.len())]);
    }
    out
}

/// One of the eight square symmetries plus an RGB channel order.
#[derive(Debug, Clone, Copy)]
struct Augment {
    flip_x: bool,
    flip_y: bool,
    transpose: bool,
    perm: [usize; 3],
}

impl Augment {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

    fn sample(rng: &mut Rng) -> Self {
        Self {
            flip_x: rng.bernoulli(0.5),
            flip_y: rng.bernoulli(0.5),
            transpose: rng.bernoulli(0.5),
            perm: Self::PERMS[rng.below(6)],
        }
    }

    fn apply(&self, im: &RgbaImage) -> Result<RgbaImage> {
        let (w, h) = im.dims();
        let (ow, oh) = if self.transpose { (h, w) } else { (w, h) };
        RgbaImage::from_fn(ow, oh, |x, y| {
            let (mut sx, mut sy) = if self.transpose { (y, x) } else { (x, y) };
            if self.flip_x {
                sx = w - 1 - sx;
            }
            if self.flip_y {
                sy = h - 1 - sy;
            }
            let p = im.pixel(sx, sy);
            [p[self.perm[0]], p[self.perm[1]], p[self.perm[2]], p[3]]
        })
    }
}

fn stack_rgba(images: &[&RgbaImage]) -> Result<NdArray<f32>> {
    let (w, h) = images[0].dims();
    let mut data = Vec::with_capacity(images.len() * 4 * w * h);
    for im in images {
        data.extend_from_slice(im.to_planar().data());
    }
    NdArray::new([images.len(), 4, h, w], data)
}

fn run_steps(
    vae: &Vae,
    store: &mut ParamStore<f32>,
    images: &[RgbaImage],
    settings: &VaeTrainSettings,
    mut on_step: impl FnMut(&VaeStepLog),
) -> Result<Vec<VaeStepLog>> {
    settings.validate()?;
    let c = vae.config.c;
    if let Some(im) = images.iter().find(|im| im.width() % c != 0 || im.height() % c != 0) {
        return Err(Error::Data(format!(
            "training image {}x{} is not divisible by {c}",
            im.width(),
            im.height()
        )));
    }
    let groups = size_groups(images);
    let mut opt = AdamW::new(settings.optimizer, store);
    let mut log = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let mut rng = Rng::stream(settings.seed, step as u64);
        let idx = pick_batch(&groups, images.len(), settings.batch, &mut rng);
        let augmented: Vec<RgbaImage>;
        let batch: Vec<&RgbaImage> = if settings.augment {
            let t = Augment::sample(&mut rng);
            augmented = idx.iter().map(|&i| t.apply(&images[i])).collect::<Result<_>>()?;
            augmented.iter().collect()
        } else {
            idx.iter().map(|&i| &images[i]).collect()
        };
        let x = vae.input_batch(&batch)?;
        let target = stack_rgba(&batch)?;

        let mut ctx = Ctx::train(store);
        let (tape, p) = ctx.parts();
        let xv = tape.constant(x);
        let tv = tape.constant(target);
        let (mu, logvar) = vae.encode_vars(tape, p, xv)?;
        let (z, kl) = match logvar {
            Some(lv) => {
                let half = tape.scale(lv, 0.5);
                let std = tape.exp(half);
                let eps = tape.constant(NdArray::from_fn(tape.shape(mu).to_vec(), |_| rng.normal() as f32));
                let noise = tape.mul(std, eps)?;
                (tape.add(mu, noise)?, Some(kl_term(tape, mu, lv)?))
            }
            None => (mu, None),
        };
        let y = vae.decode_vars(tape, p, z)?;
        let (mut total, parts) = recon_terms(tape, y, tv, &settings.weights)?;
        if let Some(kl) = kl {
            let k = tape.scale(kl, settings.kl_weight as f32);
            total = tape.add(total, k)?;
        }
        let value = |v| tape.value(v).data()[0] as f64;
        let entry = VaeStepLog {
            step,
            total: value(total),
            rgb: value(parts[0]),
            alpha: value(parts[1]),
            perceptual: value(parts[2]),
            kl: kl.map(value).unwrap_or(0.0),
            lr: settings.optimizer.lr_at(step, settings.steps),
        };
        if !entry.total.is_finite() {
            return Err(Error::NonFinite("autoencoder loss"));
        }
        let grads = ctx.param_grads(total)?;
        drop(ctx);
        opt.step(store, &grads, entry.lr)?;
        on_step(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Train an autoencoder from scratch on `images`.
pub fn train_vae(
    images: &[RgbaImage],
    config: VaeConfig,
    settings: &VaeTrainSettings,
    on_step: impl FnMut(&VaeStepLog),
) -> Result<(VaeModel, Vec<VaeStepLog>)> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let mut store = ParamStore::new();
    let vae = Vae::new(config, &mut store, &mut Rng::stream(settings.seed, u64::MAX))?;
    let log = run_steps(&vae, &mut store, images, settings, on_step)?;
    let d = vae.config.d;
    let mut model = VaeModel {
        vae,
        store,
        latent_std: vec![1.0; d],
    };
    model.fit_latent_std(images)?;
    Ok((model, log))
}

/// Give a gray-input autoencoder an alpha output and train only its decoder
/// on RGBA targets. The encoder parameters are left bit-identical.
pub fn finetune_decoder_rgba(
    model: &VaeModel,
    images: &[RgbaImage],
    settings: &VaeTrainSettings,
    on_step: impl FnMut(&VaeStepLog),
) -> Result<(VaeModel, Vec<VaeStepLog>)> {
    if model.vae.config.variant != VaeVariant::GrayRgb {
        return Err(Error::invalid("finetune_decoder_rgba", "model already encodes alpha"));
    }
    if images.is_empty() {
        return Err(Error::Data("no training images".into()));
    }
    let mut store = ParamStore::new();
    for (_, name, value) in model.store.iter() {
        let value = match name {
            "dec.out.w" if value.shape()[0] == 3 => {
                let s = value.shape();
                let mut data = value.data().to_vec();
                data.extend(std::iter::repeat_n(0.0, s[1] * s[2] * s[3]));
                NdArray::new([4, s[1], s[2], s[3]], data)?
            }
            "dec.out.b" if value.shape()[0] == 3 => {
                let mut data = value.data().to_vec();
                data.push(0.0);
                NdArray::new([4], data)?
            }
            _ => value.clone(),
        };
        store.add(name, value)?;
    }
    let vae = Vae::from_store(&store)?;
    store.freeze_prefix("enc.");
    let log = run_steps(&vae, &mut store, images, settings, on_step)?;
    store.unfreeze_all();
    Ok((
        VaeModel {
            vae,
            store,
            latent_std: model.latent_std.clone(),
        },
        log,
    ))
}

/// Mean reconstruction metrics over a set of images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeEval {
    pub images: usize,
    pub psnr_db: f64,
    pub rgb_l1: f64,
    pub alpha_l1: f64,
}

pub fn evaluate_vae(model: &VaeModel, images: &[RgbaImage]) -> Result<VaeEval> {
    if images.is_empty() {
        return Err(Error::Data("no evaluation images".into()));
    }
    let (mut p, mut r, mut a) = (0.0, 0.0, 0.0);
    for im in images {
        let y = model.reconstruct(im)?;
        p += psnr(&y, im)?;
        r += alpha_weighted_rgb_l1(&y, im)?;
        a += mean_abs_alpha_error(&y, im)?;
    }
    let n = images.len() as f64;
    Ok(VaeEval {
        images: images.len(),
        psnr_db: p / n,
        rgb_l1: r / n,
        alpha_l1: a / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::check_gradients_sampled;
    use crate::synth::{gen_design, DesignSpec};

    fn tiny(variant: VaeVariant) -> VaeConfig {
        VaeConfig {
            c: 4,
            d: 4,
            widths: vec![8, 8],
            variant,
            variational: false,
        }
    }

    fn designs(n: usize, size: usize) -> Vec<RgbaImage> {
        (0..n as u64)
            .flat_map(|s| {
                let (d, _) = gen_design(&DesignSpec::sample(s, 2, size, size).unwrap()).unwrap();
                d.layers
            })
            .collect()
    }

    #[test]
    fn loss_decreases() {
        let images = designs(3, 16);
        let settings = VaeTrainSettings {
            steps: 60,
            batch: 2,
            ..Default::default()
        };
        let (_, log) = train_vae(&images, tiny(VaeVariant::RgbaFull), &settings, |_| {}).unwrap();
        let head: f64 = log[..10].iter().map(|l| l.total).sum();
        let tail: f64 = log[50..].iter().map(|l| l.total).sum();
        assert!(tail < head * 0.8, "{head} -> {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let images = designs(2, 16);
        let s = VaeTrainSettings {
            steps: 5,
            batch: 2,
            ..Default::default()
        };
        let (a, la) = train_vae(&images, tiny(VaeVariant::RgbaFull), &s, |_| {}).unwrap();
        let (b, lb) = train_vae(&images, tiny(VaeVariant::RgbaFull), &s, |_| {}).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.store.checksum(""), b.store.checksum(""));
    }

    #[test]
    fn decoder_finetune_keeps_encoder() {
        let images = designs(2, 16);
        let s = VaeTrainSettings {
            steps: 4,
            batch: 2,
            ..Default::default()
        };
        let (gray, _) = train_vae(&images, tiny(VaeVariant::GrayRgb), &s, |_| {}).unwrap();
        assert_eq!(gray.vae.out_channels(), 3);
        let (rgba, _) = finetune_decoder_rgba(&gray, &images, &s, |_| {}).unwrap();
        assert_eq!(rgba.vae.out_channels(), 4);
        assert_eq!(gray.store.checksum("enc."), rgba.store.checksum("enc."));
        assert_ne!(gray.store.checksum("dec."), rgba.store.checksum("dec."));
        let (full, _) = train_vae(&images, tiny(VaeVariant::RgbaFull), &s, |_| {}).unwrap();
        assert!(finetune_decoder_rgba(&full, &images, &s, |_| {}).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let cfg = VaeConfig {
            variational: true,
            ..tiny(VaeVariant::RgbaFull)
        };
        let vae = Vae::new(cfg, &mut store, &mut Rng::new(1)).unwrap();
        let img = designs(1, 16).remove(1);
        let x: NdArray<f64> = img.to_planar().cast().reshape([1, 4, 16, 16]).unwrap();
        let eps = NdArray::from_fn([1, 4, 4, 4], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
        let weights = LossWeights {
            perceptual: 0.5,
            ..Default::default()
        };
        let params: Vec<NdArray<f64>> = store.cast::<f64>().iter().map(|(_, _, v)| v.clone()).collect();
        let report = check_gradients_sampled(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let (mu, lv) = vae.encode_vars(tape, p, xv).unwrap();
                let lv = lv.unwrap();
                let half = tape.scale(lv, 0.5);
                let std = tape.exp(half);
                let e = tape.constant(eps.clone());
                let n = tape.mul(std, e).unwrap();
                let z = tape.add(mu, n).unwrap();
                let y = vae.decode_vars(tape, p, z).unwrap();
                let (total, _) = recon_terms(tape, y, xv, &weights).unwrap();
                let kl = kl_term(tape, mu, lv).unwrap();
                tape.add(total, kl).unwrap()
            },
            &params,
            1e-6,
            6,
        )
        .unwrap();
        // L1 kinks make a few entries noisy; a smooth loss should agree tightly
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
