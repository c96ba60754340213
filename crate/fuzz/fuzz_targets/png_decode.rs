#![no_main]

use libfuzzer_sys::fuzz_target;
use seascan::imageio::{decode_png, encode_png};
use seascan::Tensor;

fuzz_target!(|data: &[u8]| {
    let Ok(img) = decode_png::<f32>(data) else {
        return;
    };
    assert_eq!(img.shape().len(), 3);
    assert_eq!(img.shape()[0], 3);
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let again: Tensor<f32> = decode_png(&encode_png(&img).unwrap()).unwrap();
    assert_eq!(again, img);
});
