#![no_main]

use libfuzzer_sys::fuzz_target;
use seascan_cli::config::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(cfg) = serde_json::from_slice::<ExperimentConfig>(data) else {
        return;
    };
    if cfg.validate().is_ok() {
        // a valid config always describes a buildable network
        let model = cfg.model().expect("validated config has a model");
        assert!(model.image_size >= 16);
    }
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    // NaN fields never compare equal
    if cfg.lr == cfg.lr && cfg.min_lr == cfg.min_lr {
        assert_eq!(back.data, cfg.data);
        assert_eq!(back.steps, cfg.steps);
    }
});
