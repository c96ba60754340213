use std::io::Cursor;

use image::{ImageBuffer, ImageFormat, Luma, Rgb, RgbaImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seascan::imageio::{decode_png, encode_png, quantize, read_image, resize, write_image};
use seascan::Tensor;

fn png_bytes<P: image::PixelWithColorType, C: std::ops::Deref<Target = [P::Subpixel]>>(
    img: &ImageBuffer<P, C>,
) -> Vec<u8>
where
    [P::Subpixel]: image::EncodableLayout,
{
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).unwrap();
    out.into_inner()
}

#[test]
fn png_round_trip_within_half_a_level() {
    let t = Tensor::<f64>::uniform(&[3, 17, 9], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let back: Tensor<f64> = decode_png(&encode_png(&t).unwrap()).unwrap();
    assert_eq!(back.shape(), &[3, 17, 9]);
    assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-12);
    // a second pass is lossless
    let again: Tensor<f64> = decode_png(&encode_png(&back).unwrap()).unwrap();
    assert_eq!(again, back);
}

#[test]
fn file_round_trip_and_batch_form() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let t = Tensor::<f32>::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    write_image(&t, &path).unwrap();
    let back: Tensor<f32> = read_image(&path).unwrap();
    assert_eq!(back.shape(), &[3, 8, 8]);
    let flat = t.reshape(&[3, 8, 8]).unwrap();
    assert!(back.max_abs_diff(&flat) <= 0.5 / 255.0 + 1e-6);
}

#[test]
fn out_of_range_values_clamp_and_nan_is_refused() {
    let t = Tensor::new(&[3, 1, 2], vec![-0.5, 1.5, 0.5, 0.0, 1.0, 0.25]).unwrap();
    let (bytes, h, w) = quantize::<f64>(&t).unwrap();
    assert_eq!((h, w), (1, 2));
    assert_eq!(bytes, vec![0, 128, 255, 255, 0, 64]);
    let nan = Tensor::new(&[3, 1, 1], vec![0.1, f64::NAN, 0.3]).unwrap();
    assert!(encode_png(&nan).is_err());
    assert!(encode_png(&Tensor::<f64>::zeros(&[2, 4, 4])).is_err());
}

#[test]
fn gray_is_replicated_and_alpha_dropped() {
    let gray = ImageBuffer::from_fn(4, 3, |x, y| Luma([(x * 50 + y * 10) as u8]));
    let t: Tensor<f64> = decode_png(&png_bytes(&gray)).unwrap();
    assert_eq!(t.shape(), &[3, 3, 4]);
    for c in 0..3 {
        for i in 0..12 {
            let (y, x) = (i / 4, i % 4);
            assert_eq!(t.data()[c * 12 + i], (x * 50 + y * 10) as f64 / 255.0);
        }
    }
    let rgba = RgbaImage::from_fn(2, 2, |_, _| image::Rgba([10, 20, 30, 0]));
    let t: Tensor<f64> = decode_png(&png_bytes(&rgba)).unwrap();
    assert_eq!(t.data()[..4], [10.0 / 255.0; 4]);
    assert_eq!(t.data()[8..], [30.0 / 255.0; 4]);
}

#[test]
fn sixteen_bit_input_is_rejected() {
    let deep: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::from_fn(4, 4, |x, _| Rgb([x as u16 * 1000; 3]));
    assert!(decode_png::<f64>(&png_bytes(&deep)).is_err());
    let deep_gray: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(4, 4, |_, _| Luma([7]));
    assert!(decode_png::<f64>(&png_bytes(&deep_gray)).is_err());
}

#[test]
fn garbage_and_non_png_are_rejected() {
    assert!(decode_png::<f64>(b"").is_err());
    assert!(decode_png::<f64>(b"\x89PNG\r\n\x1a\n garbage").is_err());
    let dir = tempfile::tempdir().unwrap();
    // a JPEG header behind a .png name
    let fake = dir.path().join("x.png");
    std::fs::write(&fake, b"\xff\xd8\xff\xe0\x00\x10JFIF\x00").unwrap();
    assert!(read_image::<f64>(&fake).is_err());
    assert!(read_image::<f64>(&dir.path().join("missing.png")).is_err());
}

#[test]
fn resize_preserves_constants_and_shapes() {
    let t = Tensor::<f64>::from_fn(&[3, 10, 6], |k| [0.1, 0.5, 0.9][k / 60]);
    let r = resize(&t, 32, 32).unwrap();
    assert_eq!(r.shape(), &[3, 32, 32]);
    for (k, v) in r.data().iter().enumerate() {
        assert!((v - [0.1, 0.5, 0.9][k / 1024]).abs() < 1e-6);
    }
    assert_eq!(resize(&t, 10, 6).unwrap(), t);
    assert!(resize(&t, 0, 4).is_err());
    assert!(resize(&Tensor::<f64>::zeros(&[1, 4, 4]), 2, 2).is_err());
}
