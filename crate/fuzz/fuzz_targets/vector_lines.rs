#![no_main]

use intent_core::hashtags::{format_vector_lines, parse_vector_lines, EmbeddingTable};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_vector_lines(text, "fuzz") {
        let enc = format_vector_lines(rows.iter().map(|(id, v)| (id.as_str(), v.as_slice())));
        let again = parse_vector_lines(&enc, "fuzz").expect("re-parse of encoded vectors");
        assert_eq!(again.len(), rows.len());
    }
    if let Ok(table) = EmbeddingTable::parse(text) {
        let enc = table.to_text();
        let again = EmbeddingTable::parse(&enc).expect("re-parse of encoded table");
        assert_eq!(again.to_text(), enc);
    }
});
