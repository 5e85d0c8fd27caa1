//! 8-bit PNG/PPM at the boundary; everything inside is linear RGB.

use std::path::Path;

use image::ImageEncoder;

use crate::raster::Image;

use super::{write_file_atomic, IoError};

pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn to_byte(linear: f64) -> u8 {
    let c = if linear.is_nan() {
        0.0
    } else {
        linear.clamp(0.0, 1.0)
    };
    (linear_to_srgb(c) * 255.0).round() as u8
}

/// Decodes an 8-bit sRGB PNG (alpha dropped) to linear RGB.
pub fn load_png(path: &Path) -> Result<Image, IoError> {
    let img = image::open(path)
        .map_err(|e| IoError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Image::from_fn(w, h, |x, y| {
        img.get_pixel(x as u32, y as u32)
            .0
            .map(|b| srgb_to_linear(b as f64 / 255.0))
    }))
}

/// sRGB bytes of a linear image, row-major RGB.
pub fn encode_srgb8(img: &Image) -> Vec<u8> {
    img.pixels.iter().flat_map(|p| p.map(to_byte)).collect()
}

pub fn save_png(path: &Path, img: &Image) -> Result<(), IoError> {
    let mut png = Vec::new();
    image::codecs::png::PngEncoder::new(&mut png)
        .write_image(
            &encode_srgb8(img),
            img.width as u32,
            img.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| IoError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    write_file_atomic(path, &png)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(encode_srgb8(img));
    out
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<(), IoError> {
    write_file_atomic(path, &encode_ppm(img))
}

/// Chooses PNG or PPM from the extension.
pub fn save_image(path: &Path, img: &Image) -> Result<(), IoError> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("ppm") => save_ppm(path, img),
        _ => save_png(path, img),
    }
}
