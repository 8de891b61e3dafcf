//! 8-bit grayscale PNG reading and writing.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader};

use crate::error::{Error, Result};

/// Raw 8-bit single-channel raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| err(e.to_string()))
}

/// Reads an image, converting color inputs to luminance.
pub fn read_image(path: &Path) -> Result<Gray8> {
    let g = decode(path)?.to_luma8();
    Ok(Gray8 {
        height: g.height() as usize,
        width: g.width() as usize,
        pixels: g.into_raw(),
    })
}

/// Reads a class-index mask. Only 8-bit single-channel files are accepted,
/// since any color conversion would corrupt the class ids.
pub fn read_mask(path: &Path) -> Result<Gray8> {
    match decode(path)? {
        DynamicImage::ImageLuma8(g) => Ok(Gray8 {
            height: g.height() as usize,
            width: g.width() as usize,
            pixels: g.into_raw(),
        }),
        other => Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("mask must be 8-bit grayscale, found {:?}", other.color()),
        }),
    }
}

pub fn write_gray(path: &Path, img: &Gray8) -> Result<()> {
    let g = GrayImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone()).ok_or_else(|| Error::Image {
        path: path.to_path_buf(),
        msg: format!("{} pixels for {}x{}", img.pixels.len(), img.height, img.width),
    })?;
    g.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Intensities in `[0, 1]` from 8-bit values.
pub fn to_unit(pixels: &[u8]) -> Vec<f64> {
    pixels.iter().map(|&v| v as f64 / 255.0).collect()
}

/// 8-bit values from intensities, rounding to nearest and clamping.
pub fn from_unit(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
