//! Lossless 8-bit image files.
//!
//! The raw `LRGA` layout is: the four magic bytes `LRGA`, width and height as
//! little-endian `u32`, then `width * height` RGBA byte quadruples, row-major,
//! top row first. PNG files are handled by the `png` crate and chosen by the
//! `.png` extension.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

use super::image::{quantize8, RgbaImage};

pub const LRGA_MAGIC: &[u8; 4] = b"LRGA";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Lrga,
    Png,
}

impl ImageFormat {
    /// `.png` selects PNG; anything else is raw.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Lrga,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Lrga => "lrga",
            ImageFormat::Png => "png",
        }
    }
}

fn to_bytes8(image: &RgbaImage) -> Vec<u8> {
    image.data().iter().map(|&v| quantize8(v)).collect()
}

fn from_bytes8(width: usize, height: usize, bytes: &[u8]) -> Result<RgbaImage> {
    RgbaImage::new(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn encode_lrga(image: &RgbaImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + image.data().len());
    out.extend_from_slice(LRGA_MAGIC);
    out.extend_from_slice(&(image.width() as u32).to_le_bytes());
    out.extend_from_slice(&(image.height() as u32).to_le_bytes());
    out.extend(to_bytes8(image));
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "LRGA image",
        offset,
        msg: msg.into(),
    }
}

pub fn decode_lrga(bytes: &[u8]) -> Result<RgbaImage> {
    if bytes.len() < 4 || &bytes[..4] != LRGA_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if width == 0 {
        return Err(format_err(4, "zero width"));
    }
    if height == 0 {
        return Err(format_err(8, "zero height"));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(4, "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < need {
        return Err(format_err(bytes.len(), format!("truncated payload, expected {need} pixel bytes")));
    }
    if payload.len() > need {
        return Err(format_err(HEADER_LEN + need, "trailing bytes after payload"));
    }
    from_bytes8(width, height, payload)
}

pub fn encode_png(image: &RgbaImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&to_bytes8(image)).map_err(png_err)?;
    }
    Ok(out)
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format {
        what: "PNG image",
        offset: 0,
        msg: e.to_string(),
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbaImage> {
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgba: Vec<u8> = match info.color_type {
        png::ColorType::Rgba => buf.to_vec(),
        png::ColorType::Rgb => buf.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0], p[1]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g, 255]).collect(),
        png::ColorType::Indexed => return Err(png_err("unexpanded palette")),
    };
    from_bytes8(w, h, &rgba)
}

pub fn encode_image(image: &RgbaImage, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Lrga => Ok(encode_lrga(image)),
        ImageFormat::Png => encode_png(image),
    }
}

pub fn decode_image(bytes: &[u8], format: ImageFormat) -> Result<RgbaImage> {
    match format {
        ImageFormat::Lrga => decode_lrga(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbaImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, ImageFormat::from_path(path))
}

pub fn write_image(image: &RgbaImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(image, ImageFormat::from_path(path))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn random_image(rng: &mut Rng) -> RgbaImage {
        let (w, h) = (1 + rng.below(9), 1 + rng.below(9));
        RgbaImage::from_fn(w, h, |_, _| {
            [rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32, rng.uniform() as f32]
        })
        .unwrap()
    }

    #[test]
    fn one_red_pixel_is_sixteen_bytes() {
        let red = RgbaImage::filled(1, 1, [1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = encode_lrga(&red);
        assert_eq!(bytes, b"LRGA\x01\0\0\0\x01\0\0\0\xff\0\0\xff");
        assert_eq!(decode_lrga(&bytes).unwrap(), red);
    }

    #[test]
    fn round_trip_matches_quantized_image() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let x = random_image(&mut rng);
            let q = x.quantized();
            assert_eq!(decode_lrga(&encode_lrga(&x)).unwrap(), q);
            assert_eq!(decode_png(&encode_png(&x).unwrap()).unwrap(), q);
        }
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let err = |b: &[u8]| match decode_lrga(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(err(b"PNG\0\0\0\0\0\0\0\0\0"), 0);
        assert_eq!(err(b"LRGA\0\0\0\0\x01\0\0\0"), 4);
        assert_eq!(err(b"LRGA\x01\0\0\0\0\0\0\0"), 8);
        assert_eq!(err(b"LRGA\x01\0\0\0\x01\0\0\0\xff\xff"), 14);
        assert_eq!(err(b"LRGA\x01\0"), 6);
    }
}
