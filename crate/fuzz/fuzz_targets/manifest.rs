#![no_main]

use intent_core::data::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Manifest::from_json_str(text) {
        let enc = m.to_json_string();
        let again = Manifest::from_json_str(&enc).expect("re-parse of encoded manifest");
        assert_eq!(again.to_json_string(), enc);
    }
});
