//! 8-bit PNG input and output.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ColorType, DynamicImage, ImageFormat, ImageReader, Limits, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Largest accepted width or height.
pub const MAX_DIM: u32 = 8192;

fn limits() -> Limits {
    let mut l = Limits::default();
    l.max_image_width = Some(MAX_DIM);
    l.max_image_height = Some(MAX_DIM);
    l.max_alloc = Some(512 * 1024 * 1024);
    l
}

fn to_tensor<T: Float>(img: DynamicImage) -> Result<Tensor<T>> {
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{other:?} pixels; only 8-bit gray or RGB images are supported"
            )))
        }
    }
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let hw = h * w;
    let mut data = vec![T::zero(); 3 * hw];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * hw + i] = T::of(px.0[c] as f64 / 255.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Decodes PNG bytes into a `3 x H x W` tensor with values `x / 255`.
/// Gray images are replicated to three channels, alpha is dropped, and
/// 16-bit or float images are rejected.
pub fn decode_png<T: Float>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    reader.limits(limits());
    to_tensor(reader.decode()?)
}

pub fn read_image<T: Float>(path: &Path) -> Result<Tensor<T>> {
    let mut reader = ImageReader::open(path)?.with_guessed_format()?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(Error::UnsupportedFormat(format!("{} is not a PNG file", path.display())));
    }
    reader.limits(limits());
    to_tensor(reader.decode()?)
}

/// 8-bit samples of a `3 x H x W` (or `1 x 3 x H x W`) tensor in
/// interleaved RGB order, clamped to `[0, 1]` and rounded half away from zero.
pub fn quantize<T: Float>(t: &Tensor<T>) -> Result<(Vec<u8>, usize, usize)> {
    let (h, w) = match t.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => return Err(Error::shape("write_image", format!("expected 3 x H x W, got {s:?}"))),
    };
    if !t.all_finite() {
        return Err(Error::NonFinite("image to write".into()));
    }
    let hw = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            let v = d[c * hw + i].as_f64().clamp(0.0, 1.0) * 255.0;
            out.push(v.round() as u8);
        }
    }
    Ok((out, h, w))
}

pub fn encode_png<T: Float>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (buf, h, w) = quantize(t)?;
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized for image");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn write_image<T: Float>(t: &Tensor<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_png(t)?)?;
    Ok(())
}

/// Bilinear resize of a `3 x H x W` image to `3 x h x w`.
pub fn resize<T: Float>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (sh, sw) = match t.shape() {
        [3, sh, sw] => (*sh, *sw),
        s => return Err(Error::shape("resize", format!("expected 3 x H x W, got {s:?}"))),
    };
    if h == 0 || w == 0 || h > MAX_DIM as usize || w > MAX_DIM as usize {
        return Err(Error::InvalidArgument(format!("cannot resize to {h} x {w}")));
    }
    if (sh, sw) == (h, w) {
        return Ok(t.clone());
    }
    let hw = sh * sw;
    let d = t.data();
    let src = Rgb32FImage::from_fn(sw as u32, sh as u32, |x, y| {
        let i = y as usize * sw + x as usize;
        image::Rgb([d[i].as_f64() as f32, d[hw + i].as_f64() as f32, d[2 * hw + i].as_f64() as f32])
    });
    let out = imageops::resize(&src, w as u32, h as u32, FilterType::Triangle);
    let ohw = h * w;
    let mut data = vec![T::zero(); 3 * ohw];
    for (i, px) in out.pixels().enumerate() {
        for c in 0..3 {
            data[c * ohw + i] = T::of(px.0[c] as f64);
        }
    }
    Tensor::new(&[3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        let t = Tensor::<f64>::from_fn(&[3, 1, 1], |c| [0.5, -1.0, 2.0][c]);
        assert_eq!(quantize(&t).unwrap().0, vec![128, 0, 255]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_png::<f32>(b"not a png").is_err());
    }
}
