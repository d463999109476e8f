//! Convolutional autoencoder between RGBA images and latent grids.

mod loss;
mod train;

pub use loss::{kl_term, recon_terms, vae_loss, LossParts, LossWeights, PerceptualProxy};
pub use train::{evaluate_vae, finetune_decoder_rgba, train_vae, VaeEval, VaeStepLog, VaeTrainSettings};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Conv, WeightInit};
use crate::numeric::{Ctx, Init, NdArray, ParamStore, Real, Rng, Tape, Var};
use crate::rgba::RgbaImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeVariant {
    /// Encodes and decodes all four channels.
    RgbaFull,
    /// Encodes the image flattened onto gray; decodes RGB (or RGBA after
    /// [`finetune_decoder_rgba`]).
    GrayRgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    /// Spatial downsampling factor; a power of two.
    pub c: usize,
    /// Latent channels.
    pub d: usize,
    /// Channel width of each downsampling stage; `log2(c)` entries.
    pub widths: Vec<usize>,
    pub variant: VaeVariant,
    /// Adds a log-variance head and samples the latent during training.
    #[serde(default)]
    pub variational: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            c: 8,
            d: 8,
            widths: vec![32, 64, 64],
            variant: VaeVariant::RgbaFull,
            variational: false,
        }
    }
}

impl VaeConfig {
    /// The large configuration (factor 16, 256 latent channels). Recorded for
    /// reference; far too large to train here.
    pub fn full_scale() -> Self {
        Self {
            c: 16,
            d: 256,
            widths: vec![128, 256, 512, 512],
            variant: VaeVariant::RgbaFull,
            variational: false,
        }
    }

    pub fn stages(&self) -> usize {
        self.c.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("vae: {m}")));
        if self.c < 2 || !self.c.is_power_of_two() {
            return bad(format!("compression factor {} must be a power of two >= 2", self.c));
        }
        if self.d == 0 {
            return bad("latent dim must be positive".into());
        }
        if self.widths.len() != self.stages() || self.widths.contains(&0) {
            return bad(format!("need {} positive stage widths, got {:?}", self.stages(), self.widths));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        match self.variant {
            VaeVariant::RgbaFull => 4,
            VaeVariant::GrayRgb => 3,
        }
    }
}

/// Latent of one image, `[d, H/c, W/c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub data: NdArray<f32>,
}

impl LatentGrid {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
}

impl ResBlock {
    fn new(store: &mut ParamStore<f32>, name: &str, ch: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            c1: Conv::new(store, &format!("{name}.c1"), ch, ch, 3, 1, init, WeightInit::FanIn(1.4))?,
            c2: Conv::new(store, &format!("{name}.c2"), ch, ch, 3, 1, init, WeightInit::FanIn(0.3))?,
        })
    }

    fn find<T: Real>(store: &ParamStore<T>, name: &str) -> Option<Self> {
        Some(Self {
            c1: Conv::find(store, &format!("{name}.c1"), 1)?,
            c2: Conv::find(store, &format!("{name}.c2"), 1)?,
        })
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let h = tape.silu(x);
        let h = self.c1.apply(tape, p, h)?;
        let h = tape.silu(h);
        let h = self.c2.apply(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Layer handles of an autoencoder. Parameters named `enc.*` belong to the
/// encoder and `dec.*` to the decoder.
#[derive(Debug, Clone)]
pub struct Vae {
    pub config: VaeConfig,
    out_channels: usize,
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_res: Vec<ResBlock>,
    enc_mu: Conv,
    enc_logvar: Option<Conv>,
    dec_in: Conv,
    dec_res: Vec<ResBlock>,
    dec_up: Vec<Conv>,
    dec_out: Conv,
}

impl Vae {
    pub fn new(config: VaeConfig, store: &mut ParamStore<f32>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut init = Init { rng };
        let w = config.widths.clone();
        let s = w.len();
        let gain = WeightInit::FanIn(1.4);
        let enc_in = Conv::new(store, "enc.in", config.in_channels(), w[0], 3, 1, &mut init, gain)?;
        let mut enc_down = Vec::new();
        let mut enc_res = Vec::new();
        for i in 0..s {
            let prev = if i == 0 { w[0] } else { w[i - 1] };
            enc_down.push(Conv::new(store, &format!("enc.down{i}"), prev, w[i], 3, 2, &mut init, gain)?);
            enc_res.push(ResBlock::new(store, &format!("enc.res{i}"), w[i], &mut init)?);
        }
        let enc_mu = Conv::new(store, "enc.mu", w[s - 1], config.d, 3, 1, &mut init, WeightInit::FanIn(1.0))?;
        let enc_logvar = if config.variational {
            Some(Conv::new(store, "enc.logvar", w[s - 1], config.d, 3, 1, &mut init, WeightInit::Zero)?)
        } else {
            None
        };
        let dec_in = Conv::new(store, "dec.in", config.d, w[s - 1], 3, 1, &mut init, gain)?;
        let mut dec_res = Vec::new();
        let mut dec_up = Vec::new();
        for i in 0..s {
            let next = if i == 0 { w[0] } else { w[i - 1] };
            dec_res.push(ResBlock::new(store, &format!("dec.res{i}"), w[i], &mut init)?);
            dec_up.push(Conv::new(store, &format!("dec.up{i}"), w[i], next, 3, 1, &mut init, gain)?);
        }
        let out_channels = config.in_channels();
        let dec_out = Conv::new(store, "dec.out", w[0], out_channels, 3, 1, &mut init, WeightInit::FanIn(1.0))?;
        Ok(Self {
            config,
            out_channels,
            enc_in,
            enc_down,
            enc_res,
            enc_mu,
            enc_logvar,
            dec_in,
            dec_res,
            dec_up,
            dec_out,
        })
    }

    /// Rebuild the layer handles from parameter names and shapes.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Result<Self> {
        let missing = |n: &str| Error::Data(format!("autoencoder parameter `{n}` missing"));
        let enc_in = Conv::find(store, "enc.in", 1).ok_or_else(|| missing("enc.in"))?;
        let mut enc_down = Vec::new();
        let mut enc_res = Vec::new();
        let mut dec_res = Vec::new();
        let mut dec_up = Vec::new();
        let mut widths = Vec::new();
        while let Some(c) = Conv::find(store, &format!("enc.down{}", enc_down.len()), 2) {
            let i = enc_down.len();
            widths.push(c.out_channels(store));
            enc_down.push(c);
            enc_res.push(ResBlock::find(store, &format!("enc.res{i}")).ok_or_else(|| missing("enc.res"))?);
            dec_res.push(ResBlock::find(store, &format!("dec.res{i}")).ok_or_else(|| missing("dec.res"))?);
            dec_up.push(Conv::find(store, &format!("dec.up{i}"), 1).ok_or_else(|| missing("dec.up"))?);
        }
        let enc_mu = Conv::find(store, "enc.mu", 1).ok_or_else(|| missing("enc.mu"))?;
        let enc_logvar = Conv::find(store, "enc.logvar", 1);
        let dec_in = Conv::find(store, "dec.in", 1).ok_or_else(|| missing("dec.in"))?;
        let dec_out = Conv::find(store, "dec.out", 1).ok_or_else(|| missing("dec.out"))?;
        let in_ch = enc_in.in_channels(store);
        let config = VaeConfig {
            c: 1 << enc_down.len(),
            d: enc_mu.out_channels(store),
            widths,
            variant: if in_ch == 4 {
                VaeVariant::RgbaFull
            } else {
                VaeVariant::GrayRgb
            },
            variational: enc_logvar.is_some(),
        };
        config.validate().map_err(|e| Error::Data(e.to_string()))?;
        Ok(Self {
            out_channels: dec_out.out_channels(store),
            config,
            enc_in,
            enc_down,
            enc_res,
            enc_mu,
            enc_logvar,
            dec_in,
            dec_res,
            dec_up,
            dec_out,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Whether decoded images carry a learned alpha channel.
    pub fn decodes_alpha(&self) -> bool {
        self.out_channels == 4
    }

    /// Mean (and log-variance, if variational) of `x [N, Cin, H, W]`.
    pub fn encode_vars<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        let mut h = self.enc_in.apply(tape, p, x)?;
        for (down, res) in self.enc_down.iter().zip(&self.enc_res) {
            h = tape.silu(h);
            h = down.apply(tape, p, h)?;
            h = res.apply(tape, p, h)?;
        }
        let h = tape.silu(h);
        let mu = self.enc_mu.apply(tape, p, h)?;
        let logvar = match &self.enc_logvar {
            Some(c) => Some(c.apply(tape, p, h)?),
            None => None,
        };
        Ok((mu, logvar))
    }

    /// Image `[N, Cout, H, W]` in `(0, 1)` from latents `[N, d, h, w]`.
    pub fn decode_vars<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], z: Var) -> Result<Var> {
        let mut h = self.dec_in.apply(tape, p, z)?;
        for (res, up) in self.dec_res.iter().zip(&self.dec_up).rev() {
            h = res.apply(tape, p, h)?;
            h = tape.upsample2x(h)?;
            h = up.apply(tape, p, h)?;
            h = tape.silu(h);
        }
        let h = self.dec_out.apply(tape, p, h)?;
        Ok(tape.sigmoid(h))
    }

    fn check_dims(&self, image: &RgbaImage) -> Result<()> {
        let c = self.config.c;
        if image.width() % c != 0 || image.height() % c != 0 {
            return Err(Error::invalid(
                "vae encode",
                format!("{}x{} is not divisible by {c}", image.width(), image.height()),
            ));
        }
        Ok(())
    }

    /// Encoder input planes for one image.
    pub fn input_planes(&self, image: &RgbaImage) -> NdArray<f32> {
        match self.config.variant {
            VaeVariant::RgbaFull => image.to_planar(),
            VaeVariant::GrayRgb => image.to_planar_gray_rgb(),
        }
    }

    /// Stack same-sized images into `[N, Cin, H, W]`.
    pub fn input_batch(&self, images: &[&RgbaImage]) -> Result<NdArray<f32>> {
        let first = images.first().ok_or_else(|| Error::invalid("vae", "empty batch"))?;
        let mut data = Vec::new();
        for im in images {
            self.check_dims(im)?;
            if im.dims() != first.dims() {
                return Err(Error::invalid("vae", "batch images differ in size"));
            }
            data.extend_from_slice(self.input_planes(im).data());
        }
        NdArray::new([images.len(), self.config.in_channels(), first.height(), first.width()], data)
    }

    /// Deterministic latents (the mean head) of same-sized images.
    pub fn encode_batch(&self, store: &ParamStore<f32>, images: &[&RgbaImage]) -> Result<Vec<LatentGrid>> {
        let x = self.input_batch(images)?;
        let mut ctx = Ctx::inference(store);
        let (tape, p) = ctx.parts();
        let xv = tape.constant(x);
        let (mu, _) = self.encode_vars(tape, p, xv)?;
        let out = tape.value(mu);
        split_batch(out).map(|v| v.into_iter().map(|data| LatentGrid { data }).collect())
    }

    pub fn encode(&self, store: &ParamStore<f32>, image: &RgbaImage) -> Result<LatentGrid> {
        Ok(self.encode_batch(store, &[image])?.remove(0))
    }

    pub fn decode_batch(&self, store: &ParamStore<f32>, latents: &[&LatentGrid]) -> Result<Vec<RgbaImage>> {
        let first = latents.first().ok_or_else(|| Error::invalid("vae decode", "empty batch"))?;
        let expect = [self.config.d, first.height(), first.width()];
        let mut data = Vec::new();
        for l in latents {
            if l.data.shape() != expect {
                return Err(Error::shape("vae decode", l.data.shape(), &expect));
            }
            data.extend_from_slice(l.data.data());
        }
        let z = NdArray::new([latents.len(), expect[0], expect[1], expect[2]], data)?;
        let mut ctx = Ctx::inference(store);
        let (tape, p) = ctx.parts();
        let zv = tape.constant(z);
        let y = self.decode_vars(tape, p, zv)?;
        let out = tape.value(y);
        if !out.all_finite() {
            return Err(Error::NonFinite("vae decode"));
        }
        let (h, w) = (out.shape()[2], out.shape()[3]);
        split_batch(out)?
            .into_iter()
            .map(|planes| RgbaImage::from_planar(planes.data(), self.out_channels, w, h))
            .collect()
    }

    pub fn decode(&self, store: &ParamStore<f32>, latent: &LatentGrid) -> Result<RgbaImage> {
        Ok(self.decode_batch(store, &[latent])?.remove(0))
    }
}

fn split_batch(x: &NdArray<f32>) -> Result<Vec<NdArray<f32>>> {
    let n = x.shape()[0];
    let inner = x.shape()[1..].to_vec();
    let len = x.len() / n;
    (0..n)
        .map(|i| NdArray::new(inner.clone(), x.data()[i * len..(i + 1) * len].to_vec()))
        .collect()
}

pub const VAE_LATENT_STD: &str = "meta.vae.latent_std";

/// A trained autoencoder with its parameters and latent statistics.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub vae: Vae,
    pub store: ParamStore<f32>,
    /// Per-channel standard deviation of training latents.
    pub latent_std: Vec<f32>,
}

impl VaeModel {
    pub fn encode(&self, image: &RgbaImage) -> Result<LatentGrid> {
        self.vae.encode(&self.store, image)
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<RgbaImage> {
        self.vae.decode(&self.store, latent)
    }

    pub fn reconstruct(&self, image: &RgbaImage) -> Result<RgbaImage> {
        self.decode(&self.encode(image)?)
    }

    /// Latent divided by the per-channel std.
    pub fn normalize(&self, latent: &LatentGrid) -> LatentGrid {
        self.rescale(latent, false)
    }

    pub fn denormalize(&self, latent: &LatentGrid) -> LatentGrid {
        self.rescale(latent, true)
    }

    fn rescale(&self, latent: &LatentGrid, multiply: bool) -> LatentGrid {
        let plane = latent.height() * latent.width();
        let mut data = latent.data.clone();
        for (c, chunk) in data.data_mut().chunks_mut(plane).enumerate() {
            let s = self.latent_std[c];
            for v in chunk {
                *v = if multiply { *v * s } else { *v / s };
            }
        }
        LatentGrid { data }
    }

    /// Parameters plus the latent statistics.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push(VAE_LATENT_STD, NdArray::new([self.latent_std.len()], self.latent_std.clone())?)?;
        ck.push_store(&self.store)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut store = ck.to_store("enc.")?;
        for (name, value) in ck.iter().filter(|(n, _)| n.starts_with("dec.")) {
            store.add(name, value.clone())?;
        }
        let vae = Vae::from_store(&store)?;
        let latent_std = ck.require(VAE_LATENT_STD)?.data().to_vec();
        if latent_std.len() != vae.config.d || latent_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Data("latent statistics do not match the autoencoder".into()));
        }
        Ok(Self { vae, store, latent_std })
    }

    /// Estimate `latent_std` from `images`.
    pub fn fit_latent_std(&mut self, images: &[RgbaImage]) -> Result<()> {
        let d = self.vae.config.d;
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut count = 0usize;
        for im in images {
            let l = self.encode(im)?;
            let plane = l.height() * l.width();
            for (c, chunk) in l.data.data().chunks(plane).enumerate() {
                for &v in chunk {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::Data("no images to fit latent statistics".into()));
        }
        self.latent_std = (0..d)
            .map(|c| {
                let mean = sum[c] / count as f64;
                ((sq[c] / count as f64 - mean * mean).max(0.0).sqrt() as f32).max(1e-3)
            })
            .collect();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VaeConfig {
        VaeConfig {
            c: 4,
            d: 3,
            widths: vec![4, 6],
            variant: VaeVariant::RgbaFull,
            variational: false,
        }
    }

    fn image(w: usize, h: usize, seed: u64) -> RgbaImage {
        let mut rng = Rng::new(seed);
        RgbaImage::from_fn(w, h, |_, _| [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]).unwrap()
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut store = ParamStore::new();
        let vae = Vae::new(tiny(), &mut store, &mut Rng::new(0)).unwrap();
        let model = VaeModel { vae, store, latent_std: vec![0.5, 1.0, 2.0] };
        let ck = model.to_checkpoint().unwrap();
        let back = VaeModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.vae.config, tiny());
        assert_eq!(back.latent_std, model.latent_std);
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), ck.to_bytes());
        let im = image(8, 8, 1);
        assert_eq!(back.reconstruct(&im).unwrap(), model.reconstruct(&im).unwrap());
    }

    #[test]
    fn shapes_and_determinism() {
        let mut store = ParamStore::new();
        let cfg = VaeConfig::default();
        let vae = Vae::new(cfg, &mut store, &mut Rng::new(0)).unwrap();
        let x = image(64, 64, 1);
        let z = vae.encode(&store, &x).unwrap();
        assert_eq!(z.data.shape(), &[8, 8, 8]);
        assert_eq!(vae.encode(&store, &x).unwrap(), z);
        let y = vae.decode(&store, &z).unwrap();
        assert_eq!(y.dims(), (64, 64));
        assert_eq!(vae.decode(&store, &z).unwrap(), y);
    }

    #[test]
    fn shape_law_for_other_sizes() {
        let mut store = ParamStore::new();
        let vae = Vae::new(tiny(), &mut store, &mut Rng::new(0)).unwrap();
        for (w, h) in [(4, 4), (12, 8), (8, 20)] {
            let x = image(w, h, 2);
            let y = vae.decode(&store, &vae.encode(&store, &x).unwrap()).unwrap();
            assert_eq!(y.dims(), (w, h));
        }
        assert!(vae.encode(&store, &image(10, 8, 3)).is_err());
    }

    #[test]
    fn architecture_recovered_from_store() {
        let mut store = ParamStore::new();
        let cfg = VaeConfig {
            variational: true,
            ..tiny()
        };
        let vae = Vae::new(cfg.clone(), &mut store, &mut Rng::new(0)).unwrap();
        let again = Vae::from_store(&store).unwrap();
        assert_eq!(again.config, cfg);
        assert_eq!(again.out_channels(), vae.out_channels());
    }

    #[test]
    fn gray_variant_ignores_hidden_rgb() {
        let mut store = ParamStore::new();
        let cfg = VaeConfig {
            variant: VaeVariant::GrayRgb,
            ..tiny()
        };
        let vae = Vae::new(cfg, &mut store, &mut Rng::new(0)).unwrap();
        let a = RgbaImage::from_fn(8, 8, |x, _| if x < 4 { [1.0, 0.0, 0.0, 0.0] } else { [0.2, 0.4, 0.6, 1.0] }).unwrap();
        let b = RgbaImage::from_fn(8, 8, |x, _| if x < 4 { [0.0, 1.0, 1.0, 0.0] } else { [0.2, 0.4, 0.6, 1.0] }).unwrap();
        assert_eq!(vae.encode(&store, &a).unwrap(), vae.encode(&store, &b).unwrap());
        let y = vae.decode(&store, &vae.encode(&store, &a).unwrap()).unwrap();
        assert!(y.pixels().all(|p| p[3] == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(VaeConfig { c: 6, ..tiny() }.validate().is_err());
        assert!(VaeConfig { widths: vec![4], ..tiny() }.validate().is_err());
        assert!(VaeConfig::full_scale().validate().is_ok());
    }
}
