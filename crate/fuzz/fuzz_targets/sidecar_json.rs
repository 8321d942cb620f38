#![no_main]

use asyncflow::nn::checkpoint::Sidecar;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(sc) = serde_json::from_slice::<Sidecar>(data) {
        let _ = sc.check("tpm");
        let _ = sc.check("field");
    }
});
