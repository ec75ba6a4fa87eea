#![no_main]

use labelmill::classify::persist::{decode_model, encode_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(model) = decode_model(data) else {
        return;
    };
    // Decoded models re-encode to a canonical form that roundtrips stably.
    let encoded = encode_model(&model);
    let reparsed = decode_model(&encoded).expect("re-encoded model must decode");
    assert_eq!(encoded, encode_model(&reparsed));
});
