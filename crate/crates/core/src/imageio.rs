//! Conversions between 8-bit RGB and `[-1, 1]` tensors, and image files.

use std::path::Path;

use facelock_tensor::Tensor;
use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};

use crate::{invalid, Image, Result};

/// `[-1, 1] -> [0, 255]` with round-half-even and clamping, interleaved RGB.
/// Accepts `[3, h, w]` or `[1, 3, h, w]`.
pub fn to_u8(x: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = match *x.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        ref s => panic!("to_u8 expects a single RGB image, got {s:?}"),
    };
    let hw = h * w;
    let mut out = vec![0u8; 3 * hw];
    for c in 0..3 {
        for (p, &v) in x.data()[c * hw..(c + 1) * hw].iter().enumerate() {
            out[p * 3 + c] = level((v as f64 + 1.0) * 127.5);
        }
    }
    out
}

fn level(scaled: f64) -> u8 {
    scaled.round_ties_even().clamp(0.0, 255.0) as u8
}

/// Interleaved RGB bytes to a `[1, 3, h, w]` tensor.
pub fn from_u8(rgb: &[u8], h: usize, w: usize) -> Image {
    assert_eq!(rgb.len(), 3 * h * w, "RGB buffer size");
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        rgb[p * 3 + c] as f32 / 127.5 - 1.0
    })
}

/// The 8-bit image a viewer would see: quantise every image of a batch.
pub fn quantize(x: &Image) -> Image {
    let (n, _, h, w) = x.dims4();
    let parts: Vec<Image> = (0..n).map(|i| from_u8(&to_u8(&x.select_batch(i)), h, w)).collect();
    Tensor::stack_batch(&parts)
}

/// Centre square crop and resize to `size x size`.
pub fn prepare(img: &DynamicImage, size: usize) -> Image {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let resized = if side as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    };
    from_u8(resized.as_raw(), size, size)
}

pub fn load(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path)?;
    Ok(prepare(&img, size))
}

/// Writes one image as an 8-bit PNG.
pub fn save_png(path: &Path, x: &Tensor<f32>) -> Result<()> {
    let (h, w) = match *x.shape() {
        [3, h, w] | [1, 3, h, w] => (h, w),
        _ => return invalid(format!("expected a single RGB image, got {:?}", x.shape())),
    };
    let img = RgbImage::from_raw(w as u32, h as u32, to_u8(x)).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_even() {
        assert_eq!([level(0.5), level(1.5), level(2.5), level(254.5)], [0, 2, 2, 254]);
        assert_eq!([level(-4.0), level(300.0)], [0, 255]);
        let x = Tensor::from_vec(&[3, 1, 2], vec![-1.0, 1.0, 1.0, 2.0, -3.0, 0.0]).unwrap();
        assert_eq!(to_u8(&x), [0, 255, 0, 255, 255, 128]);
    }

    #[test]
    fn quantize_is_idempotent() {
        let x = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i * 37) % 200) as f32 / 100.0 - 1.0);
        let q = quantize(&x);
        assert_eq!(quantize(&q), q);
        assert!(q.zip_map(&x, |a, b| a - b).max_abs() <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let x = quantize(&Tensor::from_fn(&[1, 3, 8, 8], |i| (i as f32 * 0.05).sin()));
        save_png(&p, &x).unwrap();
        assert_eq!(load(&p, 8).unwrap(), x);
    }
}
