#![no_main]

use intent_core::masks::RegionRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = RegionRecord::from_json_str(text) {
        assert!((0.0..=1.0).contains(&r.score));
    }
});
