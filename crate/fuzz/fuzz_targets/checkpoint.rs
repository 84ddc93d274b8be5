#![no_main]

use intent_core::model::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((header, model)) = decode_checkpoint(data) else { return };
    let enc = encode_checkpoint(&model, &header.meta);
    let (again, _) = decode_checkpoint(&enc).expect("decode of encoded checkpoint");
    assert_eq!(again, header);
});
