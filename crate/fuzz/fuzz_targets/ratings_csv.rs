#![no_main]

use intent_core::annotation::{fleiss_kappa, format_ratings_csv, parse_ratings_csv, ratings_to_matrix};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(rows) = parse_ratings_csv(text) else { return };
    let enc = format_ratings_csv(&rows);
    let again = parse_ratings_csv(&enc).expect("re-parse of encoded ratings");
    assert_eq!(format_ratings_csv(&again), enc);
    if let Ok((m, _, _)) = ratings_to_matrix(&rows) {
        if let Ok(k) = fleiss_kappa(&m) {
            assert!(k.kappa <= 1.0 + 1e-12);
        }
    }
});
