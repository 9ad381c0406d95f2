//! PNG/PPM output and PNG input. Renders are written as 8-bit RGB; dataset
//! images as 16-bit RGBA so synthetic ground truth survives a round trip.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::{to_f64, Real};

fn img_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image { path: path.into(), source }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_rgb8<T: Real>(width: usize, height: usize, rgb: &[T]) -> Result<RgbImage> {
    if rgb.len() != width * height * 3 {
        return Err(Error::SizeMismatch(format!("{} values for a {width}x{height} RGB image", rgb.len())));
    }
    let bytes = rgb.iter().map(|&v| quantize(to_f64(v))).collect();
    ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::SizeMismatch("image buffer".into()))
}

/// Save interleaved RGB in `[0, 1]` as 8-bit PNG.
pub fn save_png<T: Real>(path: &Path, width: usize, height: usize, rgb: &[T]) -> Result<()> {
    to_rgb8(width, height, rgb)?.save_with_format(path, image::ImageFormat::Png).map_err(|e| img_err(path, e))?;
    Ok(())
}

/// Save interleaved RGB in `[0, 1]` as binary PPM (P6).
pub fn save_ppm<T: Real>(path: &Path, width: usize, height: usize, rgb: &[T]) -> Result<()> {
    let img = to_rgb8(width, height, rgb)?;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(img.as_raw());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Save by extension: `.ppm` writes P6, anything else PNG.
pub fn save_image<T: Real>(path: &Path, width: usize, height: usize, rgb: &[T]) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ppm") => save_ppm(path, width, height, rgb),
        _ => save_png(path, width, height, rgb),
    }
}

/// Image loaded as floats in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    /// `None` when the file has no alpha channel.
    pub alpha: Option<Vec<f64>>,
}

pub fn load_image(path: &Path) -> Result<LoadedImage> {
    let img = image::open(path).map_err(|e| img_err(path, e))?;
    let has_alpha = img.color().has_alpha();
    let rgba = img.to_rgba16();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut alpha = Vec::with_capacity(w * h);
    for px in rgba.pixels() {
        rgb.extend(px.0[..3].iter().map(|&c| c as f64 / 65535.0));
        alpha.push(px.0[3] as f64 / 65535.0);
    }
    Ok(LoadedImage { width: w, height: h, rgb, alpha: has_alpha.then_some(alpha) })
}

fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Save RGB plus alpha as a 16-bit RGBA PNG.
pub fn save_rgba_png<T: Real>(path: &Path, width: usize, height: usize, rgb: &[T], alpha: &[T]) -> Result<()> {
    if rgb.len() != width * height * 3 || alpha.len() != width * height {
        return Err(Error::SizeMismatch("RGBA buffers".into()));
    }
    let mut bytes = Vec::with_capacity(width * height * 4);
    for i in 0..width * height {
        bytes.extend(rgb[3 * i..3 * i + 3].iter().map(|&v| quantize16(to_f64(v))));
        bytes.push(quantize16(to_f64(alpha[i])));
    }
    ImageBuffer::<image::Rgba<u16>, _>::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::SizeMismatch("image buffer".into()))?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| img_err(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trips_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let rgb: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 17.0).collect();
        let alpha = vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0];
        save_rgba_png(&p, 3, 2, &rgb, &alpha).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        for (a, b) in img.rgb.iter().zip(&rgb) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        assert!((img.alpha.unwrap()[1] - 32768.0 / 65535.0).abs() < 1e-12);
        let q = dir.path().join("b.png");
        save_png(&q, 3, 2, &rgb).unwrap();
        let eight = load_image(&q).unwrap();
        assert!(eight.alpha.is_none());
        assert_eq!(eight.rgb[0], 0.0);
        assert_eq!(eight.rgb[1], 15.0 / 255.0);
        assert_eq!(eight.rgb[17], 1.0);
    }

    #[test]
    fn ppm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        save_image(&p, 2, 1, &[1.0f32, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 0, 0, 0, 255]);
        assert!(save_png(&p, 2, 2, &[0.0f64; 3]).is_err());
    }
}
