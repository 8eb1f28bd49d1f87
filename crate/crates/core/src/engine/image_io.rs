use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Decodes PNG or TIFF bytes to `[H, W, 1]` (greyscale) or `[H, W, 3]`
/// with intensities scaled to `[0, 1]`. Alpha is dropped.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Image(e.to_string()))?;
    from_dynamic(img)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&std::fs::read(path)?)
}

fn from_dynamic(img: DynamicImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        Tensor::new(vec![h, w, 3], img.to_rgb32f().into_raw())
    } else {
        Tensor::new(vec![h, w, 1], img.to_luma32f().into_raw())
    }
}

/// Encodes a `[H, W, 3]` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn encode_rgb_png(rgb: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = rgb.hwc()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let raw = rgb.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from dims");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Encodes a `[H, W, 1]` tensor in `[0, 1]` as an 8-bit greyscale PNG.
pub fn encode_grey_png(grey: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = grey.hwc()?;
    if c != 1 {
        return Err(Error::shape(format!("expected 1 channel, got {c}")));
    }
    let raw = grey.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from dims");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grey_round_trip() {
        let t = Tensor::from_fn_hwc(3, 4, 1, |y, x, _| (y * 4 + x) as f32 / 11.0);
        let back = decode_image(&encode_grey_png(&t).unwrap()).unwrap();
        assert_eq!(back.dims(), &[3, 4, 1]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn rgb_round_trip_and_tiff() {
        let t = Tensor::from_fn_hwc(2, 2, 3, |y, x, c| ((y + x + c) % 2) as f32);
        let back = decode_image(&encode_rgb_png(&t).unwrap()).unwrap();
        assert_eq!(back, t);
        let img = image::GrayImage::from_raw(2, 1, vec![0, 255]).unwrap();
        let mut tiff = Cursor::new(Vec::new());
        img.write_to(&mut tiff, ImageFormat::Tiff).unwrap();
        assert_eq!(decode_image(tiff.get_ref()).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn garbage_is_an_image_error() {
        assert!(matches!(decode_image(b"not an image"), Err(Error::Image(_))));
    }
}
