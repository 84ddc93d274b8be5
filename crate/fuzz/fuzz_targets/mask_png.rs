#![no_main]

use intent_core::masks::decode_mask_png;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_mask_png(data);
});
