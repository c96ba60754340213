#![no_main]

use libfuzzer_sys::fuzz_target;
use seascan::network::{decode_checkpoint, decode_optimizer, encode_checkpoint, encode_optimizer};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ck.config, &ck.store).expect("decoded checkpoint re-encodes");
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.config, ck.config);
        assert_eq!(again.store, ck.store);
    }
    if let Ok(opt) = decode_optimizer(data) {
        let bytes = encode_optimizer(&opt).expect("decoded state re-encodes");
        assert_eq!(decode_optimizer(&bytes).expect("re-encoded state decodes").step, opt.step);
    }
});
