#![no_main]

use libfuzzer_sys::fuzz_target;
use nif::data::idx::{encode_idx, parse_idx};

fuzz_target!(|data: &[u8]| {
    if let Ok(array) = parse_idx(data) {
        let bytes = encode_idx(&array).expect("parsed array re-encodes");
        assert_eq!(parse_idx(&bytes).expect("re-encoded array parses"), array);
    }
});
