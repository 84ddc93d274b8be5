#![no_main]

use intent_core::evaluation::DisruptionStudy;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = DisruptionStudy::from_json_str(text) {
        let enc = v.to_json_string();
        let again = DisruptionStudy::from_json_str(&enc).expect("re-parse of encoded value");
        assert_eq!(again.to_json_string(), enc);
    }
});
