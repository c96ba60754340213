#![no_main]

use std::path::{Component, Path};

use libfuzzer_sys::fuzz_target;
use seascan::sim::{parse_manifest, parse_scene};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_manifest(data) {
        for e in &m.pairs {
            // entries must never point outside the dataset root
            let plain = Path::new(&e.dir).components().all(|c| matches!(c, Component::Normal(_)));
            assert!(plain, "{:?}", e.dir);
        }
        let text = serde_json::to_vec(&m).unwrap();
        assert_eq!(parse_manifest(&text).unwrap(), m);
    }
    if let Ok(s) = parse_scene(data) {
        assert!(s.background.iter().chain(&s.beta).all(|v| v.is_finite()));
    }
});
