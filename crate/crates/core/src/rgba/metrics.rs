use crate::error::{Error, Result};

use super::image::{gray_blend, RgbaImage};

/// Value returned by [`psnr`] for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

fn same_dims(op: &'static str, a: &RgbaImage, b: &RgbaImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, &[a.height(), a.width()], &[b.height(), b.width()]));
    }
    Ok(())
}

/// Peak signal-to-noise ratio on gray-blended RGB at 8-bit scale.
pub fn psnr(a: &RgbaImage, b: &RgbaImage) -> Result<f64> {
    same_dims("psnr", a, b)?;
    let (ga, gb) = (gray_blend(a), gray_blend(b));
    let mut sse = 0.0f64;
    for (pa, pb) in ga.pixels().zip(gb.pixels()) {
        for c in 0..3 {
            let d = 255.0 * (pa[c] as f64 - pb[c] as f64);
            sse += d * d;
        }
    }
    let mse = sse / (3 * a.width() * a.height()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * (255.0 / mse.sqrt()).log10()).min(PSNR_CAP_DB))
}

/// Mean RGB L1 distance at 8-bit scale, weighted by the ground-truth alpha.
///
/// Equals `255 * sum(A_gt * |pred - gt|) / (3 * sum(A_gt))` over pixels and
/// RGB channels; 0 when the ground truth is fully transparent.
pub fn alpha_weighted_rgb_l1(pred: &RgbaImage, gt: &RgbaImage) -> Result<f64> {
    same_dims("alpha_weighted_rgb_l1", pred, gt)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (p, g) in pred.pixels().zip(gt.pixels()) {
        let a = g[3] as f64;
        den += a;
        for c in 0..3 {
            num += a * (p[c] as f64 - g[c] as f64).abs();
        }
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(255.0 * num / (3.0 * den))
}

/// Mean absolute alpha difference in unit scale.
pub fn mean_abs_alpha_error(pred: &RgbaImage, gt: &RgbaImage) -> Result<f64> {
    same_dims("mean_abs_alpha_error", pred, gt)?;
    let total: f64 = pred.pixels().zip(gt.pixels()).map(|(p, g)| (p[3] as f64 - g[3] as f64).abs()).sum();
    Ok(total / (pred.width() * pred.height()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn random_image(rng: &mut Rng, w: usize, h: usize) -> RgbaImage {
        RgbaImage::from_fn(w, h, |_, _| {
            [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]
        })
        .unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = RgbaImage::filled(8, 8, [0.25, 0.5, 0.75, 1.0]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let d = 16.0 / 255.0;
        let b = RgbaImage::filled(8, 8, [0.25 + d, 0.5 + d, 0.75 + d, 1.0]).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 24.0484).abs() < 1e-3, "{p}");
    }

    #[test]
    fn psnr_symmetric() {
        let mut rng = Rng::new(9);
        let (a, b) = (random_image(&mut rng, 7, 5), random_image(&mut rng, 7, 5));
        assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn l1_closed_forms() {
        let gt = RgbaImage::filled(4, 4, [0.2, 0.3, 0.4, 1.0]).unwrap();
        assert_eq!(alpha_weighted_rgb_l1(&gt, &gt).unwrap(), 0.0);
        let pred = RgbaImage::filled(4, 4, [0.3, 0.4, 0.5, 1.0]).unwrap();
        assert!((alpha_weighted_rgb_l1(&pred, &gt).unwrap() - 25.5).abs() < 1e-3);
        let clear = RgbaImage::filled(4, 4, [0.2, 0.3, 0.4, 0.0]).unwrap();
        assert_eq!(alpha_weighted_rgb_l1(&pred, &clear).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = RgbaImage::filled(4, 4, [0.0; 4]).unwrap();
        let b = RgbaImage::filled(4, 5, [0.0; 4]).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(alpha_weighted_rgb_l1(&a, &b).is_err());
    }
}
