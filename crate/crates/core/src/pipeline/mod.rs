//! End-to-end stages shared by the command line and the acceptance suite.

mod config;

pub use config::{DataSection, DitSection, PathsSection, RunConfig, TrainSection, VaeSection, DESK_PARAM_BUDGET};

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::dit::{sample, DitModel, DitSample, SampleRequest, TaskPlan};
use crate::error::{Error, Result};
use crate::numeric::NdArray;
use crate::prompt::{tokenize, PromptBundle, Vocab};
use crate::rgba::{alpha_weighted_rgb_l1, composite, psnr, LayeredDesign, RgbaImage};
use crate::vae::{train_vae, LatentGrid, VaeModel, VaeStepLog};

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Every image of every design, each design's full image first.
pub fn design_images<'a>(designs: impl IntoIterator<Item = &'a LayeredDesign>) -> Vec<RgbaImage> {
    designs
        .into_iter()
        .flat_map(|d| std::iter::once(d.composite.clone()).chain(d.layers.iter().cloned()))
        .collect()
}

/// Train the autoencoder on the first `config.vae.images` corpus images.
pub fn train_vae_stage(
    config: &RunConfig,
    designs: &[LayeredDesign],
    on_step: impl FnMut(&VaeStepLog),
) -> Result<(VaeModel, Vec<VaeStepLog>)> {
    let mut images = design_images(designs);
    if let Some(n) = config.vae.images {
        if n > images.len() {
            return Err(Error::Data(format!("vae.images is {n} but the corpus has {} images", images.len())));
        }
        images.truncate(n);
    }
    train_vae(&images, config.vae_config(), &config.vae_settings(), on_step)
}

/// Normalized latents of a design and its tokenized prompt.
pub fn encode_design(vae: &VaeModel, design: &LayeredDesign, bundle: &PromptBundle, vocab: &Vocab) -> Result<DitSample> {
    if bundle.n_layers() != design.n_layers() {
        return Err(Error::Data(format!(
            "prompt has {} layer captions for a {}-layer design",
            bundle.n_layers(),
            design.n_layers()
        )));
    }
    let slots = design.slots();
    let grids = vae.vae.encode_batch(&vae.store, &slots)?;
    let first = grids[0].data.shape().to_vec();
    let mut data = Vec::with_capacity(slots.len() * grids[0].data.len());
    for g in &grids {
        data.extend_from_slice(vae.normalize(g).data.data());
    }
    Ok(DitSample {
        latents: NdArray::new([slots.len(), first[0], first[1], first[2]], data)?,
        prompt: tokenize(bundle, vocab)?,
    })
}

fn decode_slots(vae: &VaeModel, latents: &NdArray<f32>) -> Result<Vec<RgbaImage>> {
    let s = latents.shape();
    let plane = s[1] * s[2] * s[3];
    let grids: Vec<LatentGrid> = latents
        .data()
        .chunks(plane)
        .map(|c| {
            let g = LatentGrid {
                data: NdArray::new([s[1], s[2], s[3]], c.to_vec())?,
            };
            Ok(vae.denormalize(&g))
        })
        .collect::<Result<_>>()?;
    vae.vae.decode_batch(&vae.store, &grids.iter().collect::<Vec<_>>())
}

fn latent_size(vae: &VaeModel, width: usize, height: usize) -> Result<(usize, usize)> {
    let c = vae.vae.config.c;
    if width == 0 || height == 0 || width % c != 0 || height % c != 0 {
        return Err(Error::invalid(
            "pipeline",
            format!("image size {width}x{height} must be a positive multiple of {c}"),
        ));
    }
    Ok((height / c, width / c))
}

/// Output of text-to-layers (or text-to-image when there are no layers).
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// The full design as generated in slot 0.
    pub composite: RgbaImage,
    pub layers: Vec<RgbaImage>,
}

/// Generate a design with `bundle.n_layers()` layers.
pub fn generate(
    vae: &VaeModel,
    dit: &DitModel,
    bundle: &PromptBundle,
    width: usize,
    height: usize,
    steps: usize,
    seed: u64,
) -> Result<Generated> {
    let (h, w) = latent_size(vae, width, height)?;
    let plan = TaskPlan::t2l(bundle.n_layers());
    let request = SampleRequest {
        prompt: tokenize(bundle, &Vocab::grammar())?,
        given: vec![None; plan.slots()],
        plan,
        h,
        w,
    };
    let latents = sample(dit, &[request], steps, seed)?.remove(0);
    let mut images = decode_slots(vae, &latents)?;
    let layers = images.split_off(1);
    Ok(Generated {
        composite: images.remove(0),
        layers,
    })
}

/// Output of image-to-layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub layers: Vec<RgbaImage>,
    /// Composite of the predicted layers.
    pub recomposed: RgbaImage,
    /// Against the input image.
    pub psnr_db: f64,
    pub rgb_l1: f64,
}

/// Split `image` into `bundle.n_layers()` layers.
pub fn decompose(
    vae: &VaeModel,
    dit: &DitModel,
    image: &RgbaImage,
    bundle: &PromptBundle,
    steps: usize,
    seed: u64,
) -> Result<Decomposition> {
    let (h, w) = latent_size(vae, image.width(), image.height())?;
    let plan = TaskPlan::i2l(bundle.n_layers())?;
    let mut given = vec![None; plan.slots()];
    given[0] = Some(vae.normalize(&vae.encode(image)?).data);
    let request = SampleRequest {
        prompt: tokenize(bundle, &Vocab::grammar())?,
        plan,
        h,
        w,
        given,
    };
    let latents = sample(dit, &[request], steps, seed)?.remove(0);
    let layers = decode_slots(vae, &latents)?.split_off(1);
    let recomposed = composite(&layers)?;
    Ok(Decomposition {
        psnr_db: psnr(&recomposed, image)?,
        rgb_l1: alpha_weighted_rgb_l1(&recomposed, image)?,
        layers,
        recomposed,
    })
}

/// A JSON report plus the SHA-256 of its bytes. Field order follows the
/// serialized type, so equal reports hash equally.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFile {
    pub text: String,
    pub hash: String,
}

pub fn render_report(report: &impl Serialize) -> Result<ReportFile> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::Data(format!("report: {e}")))?;
    text.push('\n');
    Ok(ReportFile {
        hash: sha256_hex(text.as_bytes()),
        text,
    })
}

pub fn write_report(report: &impl Serialize, path: &Path) -> Result<ReportFile> {
    let r = render_report(report)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &r.text).map_err(|e| Error::io(path, e))?;
    Ok(r)
}

/// SHA-256 of a checkpoint's serialized bytes.
pub fn checkpoint_hash(ck: &Checkpoint) -> String {
    sha256_hex(&ck.to_bytes())
}
