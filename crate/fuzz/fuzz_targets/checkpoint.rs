#![no_main]

use libfuzzer_sys::fuzz_target;
use nif::train::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must survive a second trip unchanged.
    if let Ok(ckpt) = decode_checkpoint(data) {
        let once = encode_checkpoint(&ckpt).expect("decoded checkpoint re-encodes");
        let again = decode_checkpoint(&once).expect("re-encoded checkpoint decodes");
        assert_eq!(encode_checkpoint(&again).unwrap(), once);
    }
});
