//! RGBA rasters, compositing, file I/O and pixel metrics.

mod codec;
mod image;
mod metrics;

pub use codec::{
    decode_image, decode_lrga, decode_png, encode_image, encode_lrga, encode_png, read_image, write_image,
    ImageFormat, LRGA_MAGIC,
};
pub use image::{composite, gray_blend, LayeredDesign, RgbaImage, GRAY};
pub use metrics::{alpha_weighted_rgb_l1, mean_abs_alpha_error, psnr, PSNR_CAP_DB};
