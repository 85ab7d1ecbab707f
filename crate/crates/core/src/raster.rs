//! Greyscale raster helpers shared by the registry, augmentation and
//! classifier stages.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, GrayImage, ImageFormat, Luma};

use crate::error::{Error, Result};

/// Side length of a normalized symbol or slip image.
pub const SYMBOL_SIZE: u32 = 180;

pub const WHITE: u8 = 255;

/// Decode an image file (PNG, JPG or JPEG) into 8-bit greyscale.
/// Transparent pixels are composited over white.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_gray(&bytes).map_err(|msg| {
        Error::Registry(crate::registry::RegistryError::InvalidImage(format!(
            "{}: {msg}",
            path.display()
        )))
    })
}

/// Decode in-memory image bytes into greyscale.
pub fn decode_gray(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(format!("unsupported image format {format:?}"));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| e.to_string())?;
    let gray = flatten_on_white(img);
    if gray.width() == 0 || gray.height() == 0 {
        return Err("empty image".into());
    }
    Ok(gray)
}

fn flatten_on_white(img: DynamicImage) -> GrayImage {
    if !img.color().has_alpha() {
        return img.into_luma8();
    }
    let la = img.into_luma_alpha8();
    let (w, h) = la.dimensions();
    GrayImage::from_fn(w, h, |x, y| {
        let [l, a] = la.get_pixel(x, y).0;
        let a = a as u32;
        let v = (l as u32 * a + WHITE as u32 * (255 - a) + 127) / 255;
        Luma([v as u8])
    })
}

/// Scale `img` to fit a 180×180 square, preserving aspect ratio, and pad
/// the rest with white. An image that is already 180×180 is returned as is.
pub fn letterbox(img: &GrayImage) -> GrayImage {
    let (w, h) = img.dimensions();
    if w == SYMBOL_SIZE && h == SYMBOL_SIZE {
        return img.clone();
    }
    let scale = (SYMBOL_SIZE as f64 / w as f64).min(SYMBOL_SIZE as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as u32).clamp(1, SYMBOL_SIZE);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, SYMBOL_SIZE);
    let scaled = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::Triangle)
    };
    let mut canvas = GrayImage::from_pixel(SYMBOL_SIZE, SYMBOL_SIZE, Luma([WHITE]));
    let ox = (SYMBOL_SIZE - nw) / 2;
    let oy = (SYMBOL_SIZE - nh) / 2;
    imageops::replace(&mut canvas, &scaled, ox as i64, oy as i64);
    canvas
}

pub fn is_uniform(img: &GrayImage) -> bool {
    let mut pixels = img.as_raw().iter();
    match pixels.next() {
        Some(first) => pixels.all(|p| p == first),
        None => true,
    }
}

pub fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("encoding greyscale PNG into memory cannot fail");
    out.into_inner()
}

pub fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(img)).map_err(|e| Error::io(path, e))
}
