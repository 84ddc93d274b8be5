#![no_main]

use intent_core::hashtags::{word_break_str, SegDictionary};
use libfuzzer_sys::fuzz_target;

// First line is the string to segment, the rest is the dictionary.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (word, dict_text) = text.split_once('\n').unwrap_or((text, ""));
    let Ok(dict) = SegDictionary::parse(dict_text) else { return };
    let enc = dict.to_text();
    let again = SegDictionary::parse(&enc).expect("re-parse of encoded dictionary");
    assert_eq!(again.to_text(), enc);
    if word.chars().count() > 64 {
        return;
    }
    if let Ok(seg) = word_break_str(word, &dict) {
        assert_eq!(seg.tokens.concat(), word);
    }
});
