#![no_main]

use asyncflow::sampler::parse_trajectory_jsonl;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((steps, _trailer)) = parse_trajectory_jsonl(text) {
        assert!(steps.iter().enumerate().all(|(i, s)| s.k == i));
    }
});
