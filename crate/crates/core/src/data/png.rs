//! PNG loading and saving in the three pixel formats the datasets use:
//! 8-bit RGB frames, 16-bit single-channel depth (millimeters), and 8-bit
//! binary masks stored as {0, 255}.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub struct RgbData {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

pub fn load_rgb(path: &Path) -> Result<RgbData> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(RgbData {
        width: img.width() as usize,
        height: img.height() as usize,
        pixels: img.into_raw(),
    })
}

pub fn save_rgb(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let img: RgbImage = ImageBuffer::from_vec(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::Data("rgb buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub struct DepthData {
    pub width: usize,
    pub height: usize,
    /// Depth in millimeters; 0 means invalid.
    pub values: Vec<u16>,
}

pub fn load_depth(path: &Path) -> Result<DepthData> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma16();
    Ok(DepthData {
        width: img.width() as usize,
        height: img.height() as usize,
        values: img.into_raw(),
    })
}

pub fn save_depth(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_vec(width as u32, height as u32, values.to_vec())
            .ok_or_else(|| Error::Data("depth buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Loads a binary mask; pixels must be exactly 0 or 255.
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Vec::with_capacity(w * h);
    for &v in img.as_raw() {
        match v {
            0 => out.push(0u8),
            255 => out.push(1u8),
            other => {
                return Err(Error::Data(format!(
                    "{}: mask pixel value {other} (must be 0 or 255)",
                    path.display()
                )))
            }
        }
    }
    Ok((w, h, out))
}

/// Saves a binary {0,1} mask as {0,255} grayscale.
pub fn save_mask(path: &Path, width: usize, height: usize, mask: &[u8]) -> Result<()> {
    let pixels: Vec<u8> = mask
        .iter()
        .map(|&v| match v {
            0 => Ok(0u8),
            1 => Ok(255u8),
            other => Err(Error::Data(format!("mask value {other} (must be 0 or 1)"))),
        })
        .collect::<Result<_>>()?;
    let img: GrayImage = ImageBuffer::from_vec(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Data("mask buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Converts interleaved RGB bytes to planar channel-major floats in [0, 1].
pub fn rgb_to_chw<T: Scalar>(rgb: &RgbData) -> Vec<T> {
    let plane = rgb.width * rgb.height;
    let mut out = vec![T::zero(); 3 * plane];
    let scale = T::of_f64(1.0 / 255.0);
    for p in 0..plane {
        for c in 0..3 {
            out[c * plane + p] = T::of_f64(rgb.pixels[p * 3 + c] as f64) * scale;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_and_chw() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 11 % 256) as u8).collect();
        save_rgb(&path, 3, 2, &pixels).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert_eq!(back.pixels, pixels);
        let chw: Vec<f32> = rgb_to_chw(&back);
        assert_eq!(chw.len(), 18);
        assert!((chw[0] - pixels[0] as f32 / 255.0).abs() < 1e-7);
        // channel plane layout
        assert!((chw[6] - pixels[1] as f32 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn depth_round_trip_16bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let values: Vec<u16> = vec![0, 400, 1500, 65535, 123, 7];
        save_depth(&path, 3, 2, &values).unwrap();
        let back = load_depth(&path).unwrap();
        assert_eq!(back.values, values);
    }

    #[test]
    fn mask_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_mask(&path, 2, 2, &[0, 1, 1, 0]).unwrap();
        let (_, _, back) = load_mask(&path).unwrap();
        assert_eq!(back, vec![0, 1, 1, 0]);
        assert!(save_mask(&path, 2, 2, &[0, 3, 0, 0]).is_err());

        // grey pixel rejected on load
        let grey: GrayImage = ImageBuffer::from_vec(1, 1, vec![128u8]).unwrap();
        let bad = dir.path().join("bad.png");
        grey.save(&bad).unwrap();
        assert!(load_mask(&bad).is_err());
    }
}
