use crate::error::{Error, Result};
use crate::numeric::NdArray;

/// Straight-alpha RGBA raster, row-major, channel values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct RgbaImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for RgbaImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbaImage({}x{})", self.width, self.height)
    }
}

impl RgbaImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("image dimensions must be >= 1, got {width}x{height}")));
        }
        if data.len() != width * height * 4 {
            return Err(Error::Data(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height * 4,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("channel value {} at index {i} outside [0, 1]", data[i])));
        }
        Ok(Self { width, height, data })
    }

    /// Build from arbitrary values, clamping each channel to `[0, 1]`
    /// (NaN maps to 0).
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgba: [f32; 4]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgba).collect();
        Self::new(width, height, data)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 4]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 4);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y));
            }
        }
        Self::from_clamped(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(4)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 4] {
        let i = (y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    /// Snap every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize8(v) as f32 / 255.0).collect(),
        }
    }

    /// Planar `[4, H, W]` array.
    pub fn to_planar(&self) -> NdArray<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 4 * n];
        for (i, px) in self.pixels().enumerate() {
            for c in 0..4 {
                out[c * n + i] = px[c];
            }
        }
        NdArray::new([4, self.height, self.width], out).expect("consistent extents")
    }

    /// Planar `[3, H, W]` RGB of the gray-blended image.
    pub fn to_planar_gray_rgb(&self) -> NdArray<f32> {
        let g = gray_blend(self);
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in g.pixels().enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c];
            }
        }
        NdArray::new([3, self.height, self.width], out).expect("consistent extents")
    }

    /// Inverse of [`Self::to_planar`]; 3-channel input is treated as opaque.
    pub fn from_planar(planes: &[f32], channels: usize, width: usize, height: usize) -> Result<Self> {
        let n = width * height;
        if planes.len() != channels * n || !(channels == 3 || channels == 4) {
            return Err(Error::Data(format!(
                "planar buffer of {} values does not match {channels}x{height}x{width}",
                planes.len()
            )));
        }
        let mut data = Vec::with_capacity(4 * n);
        for i in 0..n {
            for c in 0..3 {
                data.push(planes[c * n + i]);
            }
            data.push(if channels == 4 { planes[3 * n + i] } else { 1.0 });
        }
        Self::from_clamped(width, height, data)
    }
}

pub(crate) fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Gray level used when flattening transparency.
pub const GRAY: f32 = 0.5;

/// Flatten onto a mid-gray background: `RGB <- A*RGB + (1-A)*0.5`, `A <- 1`.
pub fn gray_blend(image: &RgbaImage) -> RgbaImage {
    let mut data = image.data.clone();
    for px in data.chunks_exact_mut(4) {
        let a = px[3];
        for c in px.iter_mut().take(3) {
            *c = a * *c + (1.0 - a) * GRAY;
        }
        px[3] = 1.0;
    }
    RgbaImage {
        width: image.width,
        height: image.height,
        data,
    }
}

/// Back-to-front source-over blend of a layer stack.
pub fn composite(layers: &[RgbaImage]) -> Result<RgbaImage> {
    let (first, rest) = layers
        .split_first()
        .ok_or_else(|| Error::Data("composite needs at least one layer".into()))?;
    let mut data = first.data.clone();
    for layer in rest {
        if layer.dims() != first.dims() {
            return Err(Error::Data(format!(
                "layer is {}x{}, expected {}x{}",
                layer.width, layer.height, first.width, first.height
            )));
        }
        for (dst, src) in data.chunks_exact_mut(4).zip(layer.pixels()) {
            let a = src[3];
            for c in 0..3 {
                dst[c] = a * src[c] + (1.0 - a) * dst[c];
            }
            dst[3] = a + (1.0 - a) * dst[3];
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(RgbaImage {
        width: first.width,
        height: first.height,
        data,
    })
}

/// A full design and its ordered back-to-front layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredDesign {
    pub composite: RgbaImage,
    pub layers: Vec<RgbaImage>,
    pub scene_caption: String,
    pub layer_captions: Vec<String>,
}

impl LayeredDesign {
    pub fn new(
        composite: RgbaImage,
        layers: Vec<RgbaImage>,
        scene_caption: String,
        layer_captions: Vec<String>,
    ) -> Result<Self> {
        if layers.iter().any(|l| l.dims() != composite.dims()) {
            return Err(Error::Data("every layer must match the composite's dimensions".into()));
        }
        if layer_captions.len() != layers.len() {
            return Err(Error::Data(format!(
                "{} layers but {} layer captions",
                layers.len(),
                layer_captions.len()
            )));
        }
        Ok(Self {
            composite,
            layers,
            scene_caption,
            layer_captions,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.composite.aspect_ratio()
    }

    /// Slot images in model order: the full design, then each layer.
    pub fn slots(&self) -> Vec<&RgbaImage> {
        std::iter::once(&self.composite).chain(&self.layers).collect()
    }
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
    fn rejects_out_of_range_and_zero_dims() {
        assert!(RgbaImage::new(1, 1, vec![0.0, 0.0, 1.5, 1.0]).is_err());
        assert!(RgbaImage::new(0, 1, vec![]).is_err());
        assert!(RgbaImage::new(1, 1, vec![0.0, 0.0, f32::NAN, 1.0]).is_err());
    }

    #[test]
    fn opaque_top_occludes() {
        let mut rng = Rng::new(1);
        let bottom = random_image(&mut rng, 4, 3);
        let top = RgbaImage::filled(4, 3, [0.2, 0.4, 0.6, 1.0]).unwrap();
        let c = composite(&[bottom, top.clone()]).unwrap();
        for (a, b) in c.pixels().zip(top.pixels()) {
            assert_eq!(&a[..3], &b[..3]);
        }
    }

    #[test]
    fn transparent_top_is_invisible() {
        let mut rng = Rng::new(2);
        let bottom = random_image(&mut rng, 3, 3);
        let top = RgbaImage::filled(3, 3, [0.9, 0.1, 0.3, 0.0]).unwrap();
        assert_eq!(composite(&[bottom.clone(), top]).unwrap(), bottom);
    }

    #[test]
    fn half_white_over_black_is_half_gray() {
        let black = RgbaImage::filled(2, 2, [0.0, 0.0, 0.0, 1.0]).unwrap();
        let white = RgbaImage::filled(2, 2, [1.0, 1.0, 1.0, 0.5]).unwrap();
        let c = composite(&[black, white]).unwrap();
        for px in c.pixels() {
            assert_eq!(&px[..3], &[0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn composite_errors() {
        assert!(composite(&[]).is_err());
        let a = RgbaImage::filled(2, 2, [0.0; 4]).unwrap();
        let b = RgbaImage::filled(3, 2, [0.0; 4]).unwrap();
        assert!(composite(&[a, b]).is_err());
    }

    #[test]
    fn single_layer_composite_is_identity() {
        let mut rng = Rng::new(3);
        let a = random_image(&mut rng, 5, 2);
        assert_eq!(composite(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn composite_is_associative() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let n = 2 + rng.below(4);
            let layers: Vec<RgbaImage> = (0..n).map(|_| random_image(&mut rng, 4, 4)).collect();
            let full = composite(&layers).unwrap();
            let k = 1 + rng.below(n - 1);
            let mut nested = vec![composite(&layers[..k]).unwrap()];
            nested.extend_from_slice(&layers[k..]);
            let nested = composite(&nested).unwrap();
            for (a, b) in full.data().iter().zip(nested.data()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gray_blend_cases() {
        let opaque = RgbaImage::filled(2, 2, [0.1, 0.2, 0.3, 1.0]).unwrap();
        assert_eq!(gray_blend(&opaque), opaque);
        let clear = RgbaImage::filled(2, 2, [0.9, 0.1, 0.3, 0.0]).unwrap();
        assert!(gray_blend(&clear).pixels().all(|p| p == [0.5, 0.5, 0.5, 1.0]));
        let half = RgbaImage::filled(2, 2, [1.0, 1.0, 1.0, 0.5]).unwrap();
        assert!(gray_blend(&half).pixels().all(|p| p == [0.75, 0.75, 0.75, 1.0]));
    }

    #[test]
    fn gray_blend_is_idempotent() {
        let mut rng = Rng::new(5);
        let x = random_image(&mut rng, 6, 6);
        let once = gray_blend(&x);
        assert_eq!(gray_blend(&once), once);
    }

    #[test]
    fn planar_round_trip() {
        let mut rng = Rng::new(6);
        let x = random_image(&mut rng, 5, 3);
        let p = x.to_planar();
        assert_eq!(p.shape(), &[4, 3, 5]);
        assert_eq!(RgbaImage::from_planar(p.data(), 4, 5, 3).unwrap(), x);
    }
}
