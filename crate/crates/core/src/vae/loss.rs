use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{NdArray, Real, Rng, Tape, Var};
use crate::rgba::{RgbaImage, GRAY};

/// Weights of the reconstruction terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// RGB L1.
    pub rgb: f64,
    /// Alpha L1.
    pub alpha: f64,
    /// Feature distance on gray-blended images.
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            alpha: 1.0,
            perceptual: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("rgb", self.rgb), ("alpha", self.alpha), ("perceptual", self.perceptual)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight `{n}` must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub rgb: f64,
    pub alpha: f64,
    pub perceptual: f64,
    pub total: f64,
}

const PROXY_SEED: u64 = 0x7e57_f00d;
const PROXY_WIDTH: usize = 8;

/// Two fixed random conv layers standing in for a pretrained feature
/// network. Never trained.
#[derive(Debug, Clone)]
pub struct PerceptualProxy {
    w1: NdArray<f64>,
    w2: NdArray<f64>,
}

impl PerceptualProxy {
    pub fn get() -> &'static Self {
        static P: OnceLock<PerceptualProxy> = OnceLock::new();
        P.get_or_init(|| {
            let mut rng = Rng::new(PROXY_SEED);
            let mut w = |o: usize, i: usize| {
                let std = (2.0 / (i * 9) as f64).sqrt();
                NdArray::from_fn([o, i, 3, 3], |_| rng.normal() * std)
            };
            let w1 = w(PROXY_WIDTH, 3);
            let w2 = w(PROXY_WIDTH, PROXY_WIDTH);
            Self { w1, w2 }
        })
    }

    fn features<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<[Var; 2]> {
        let w1 = tape.constant(self.w1.cast());
        let w2 = tape.constant(self.w2.cast());
        let f1 = tape.conv2d(x, w1, 1, 1)?;
        let f1 = tape.silu(f1);
        let f2 = tape.conv2d(f1, w2, 2, 1)?;
        let f2 = tape.silu(f2);
        Ok([f1, f2])
    }

    /// Mean L1 distance between features of two `[N, 3, H, W]` images.
    pub fn distance<T: Real>(&self, tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
        let fa = self.features(tape, a)?;
        let fb = self.features(tape, b)?;
        let mut total = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = tape.sub(x, y)?;
            let d = tape.abs(d);
            let m = tape.mean(d);
            total = Some(match total {
                None => m,
                Some(t) => tape.add(t, m)?,
            });
        }
        Ok(total.expect("two feature levels"))
    }
}

fn l1<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// `[N, 4, H, W]` straight-alpha image flattened onto gray, `[N, 3, H, W]`.
fn gray_rgb<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let rgb = tape.slice(x, 1, 0, 3)?;
    let a = tape.slice(x, 1, 3, 1)?;
    let a3 = tape.concat(&[a, a, a], 1)?;
    let centred = tape.add_scalar(rgb, T::lit(-(GRAY as f64)));
    let blended = tape.mul(centred, a3)?;
    Ok(tape.add_scalar(blended, T::lit(GRAY as f64)))
}

/// Reconstruction terms for a decoder output `y` against RGBA `target`
/// (`[N, 4, H, W]`). A three-channel `y` is compared with the gray-blended
/// target and has no alpha term.
pub fn recon_terms<T: Real>(
    tape: &mut Tape<T>,
    y: Var,
    target: Var,
    w: &LossWeights,
) -> Result<(Var, [Var; 3])> {
    let zero = tape.constant(NdArray::scalar(T::zero()));
    let target_gray = gray_rgb(tape, target)?;
    let (rgb, alpha, y_gray) = match tape.shape(y)[1] {
        4 => {
            let yr = tape.slice(y, 1, 0, 3)?;
            let tr = tape.slice(target, 1, 0, 3)?;
            let ya = tape.slice(y, 1, 3, 1)?;
            let ta = tape.slice(target, 1, 3, 1)?;
            let rgb = l1(tape, yr, tr)?;
            let alpha = l1(tape, ya, ta)?;
            (rgb, alpha, gray_rgb(tape, y)?)
        }
        3 => (l1(tape, y, target_gray)?, zero, y),
        c => return Err(Error::invalid("vae loss", format!("decoder has {c} channels"))),
    };
    let perceptual = if w.perceptual > 0.0 {
        PerceptualProxy::get().distance(tape, y_gray, target_gray)?
    } else {
        zero
    };
    let a = tape.scale(rgb, T::lit(w.rgb));
    let b = tape.scale(alpha, T::lit(w.alpha));
    let c = tape.scale(perceptual, T::lit(w.perceptual));
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok((total, [rgb, alpha, perceptual]))
}

/// `0.5 * mean(mu^2 + exp(lv) - lv - 1)`.
pub fn kl_term<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = tape.square(mu);
    let ev = tape.exp(logvar);
    let s = tape.add(m2, ev)?;
    let s = tape.sub(s, logvar)?;
    let s = tape.add_scalar(s, T::lit(-1.0));
    let m = tape.mean(s);
    Ok(tape.scale(m, T::lit(0.5)))
}

/// Reconstruction loss of `x_hat` against `x`, evaluated outside training.
/// Both images are treated as RGBA.
pub fn vae_loss(x: &RgbaImage, x_hat: &RgbaImage, weights: &LossWeights) -> Result<LossParts> {
    weights.validate()?;
    if x.dims() != x_hat.dims() {
        let (a, b) = (x.dims(), x_hat.dims());
        return Err(Error::shape("vae_loss", &[a.1, a.0], &[b.1, b.0]));
    }
    let (w, h) = x.dims();
    let mut tape = Tape::<f64>::new();
    let t = tape.constant(x.to_planar().cast().reshape([1, 4, h, w])?);
    let y = tape.constant(x_hat.to_planar().cast().reshape([1, 4, h, w])?);
    let (total, parts) = recon_terms(&mut tape, y, t, weights)?;
    let v = |tape: &Tape<f64>, v: Var| tape.value(v).data()[0];
    Ok(LossParts {
        rgb: v(&tape, parts[0]),
        alpha: v(&tape, parts[1]),
        perceptual: v(&tape, parts[2]),
        total: v(&tape, total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(rgba: [f32; 4]) -> RgbaImage {
        RgbaImage::filled(8, 8, rgba).unwrap()
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let x = img([0.2, 0.4, 0.9, 0.5]);
        let w = LossWeights {
            perceptual: 1.0,
            ..Default::default()
        };
        let l = vae_loss(&x, &x, &w).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn terms_match_hand_values() {
        let l = vae_loss(&img([0.0, 0.0, 0.0, 1.0]), &img([0.3, 0.3, 0.0, 0.5]), &LossWeights::default()).unwrap();
        assert!((l.rgb - 0.2).abs() < 1e-6);
        assert!((l.alpha - 0.5).abs() < 1e-6);
        assert!((l.total - 0.7).abs() < 1e-6);
        assert_eq!(l.perceptual, 0.0);
    }

    #[test]
    fn perceptual_sees_only_visible_colour() {
        let w = LossWeights {
            rgb: 0.0,
            alpha: 0.0,
            perceptual: 1.0,
        };
        // fully transparent pixels look the same whatever their colour
        let l = vae_loss(&img([1.0, 0.0, 0.0, 0.0]), &img([0.0, 1.0, 0.0, 0.0]), &w).unwrap();
        assert!(l.total.abs() < 1e-12);
        let l = vae_loss(&img([1.0, 0.0, 0.0, 1.0]), &img([0.0, 1.0, 0.0, 1.0]), &w).unwrap();
        assert!(l.total > 0.0);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            alpha: -1.0,
            ..Default::default()
        };
        let x = img([0.0; 4]);
        assert!(matches!(vae_loss(&x, &x, &w), Err(Error::Config(_))));
    }
}
