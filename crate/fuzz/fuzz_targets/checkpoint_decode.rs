#![no_main]

use asyncflow::nn::checkpoint::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = decode_checkpoint(data) {
        // Accepted input is canonical: re-encoding reproduces it exactly.
        assert_eq!(encode_checkpoint(&entries), data);
    }
});
