#![no_main]

use intent_core::hashtags::{format_hashtag_file, parse_hashtag_file};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rows) = parse_hashtag_file(text) else { return };
    let enc = format_hashtag_file(&rows);
    let again = parse_hashtag_file(&enc).expect("re-parse of encoded hashtag file");
    assert_eq!(again, rows);
});
