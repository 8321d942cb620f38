#![no_main]

use asyncflow_harness::config::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Anything that parses must survive a round trip unchanged.
    if let Ok(cfg) = Config::parse(text) {
        let again = Config::parse(&cfg.to_toml()).expect("serialized config reparses");
        assert_eq!(again, cfg);
    }
});
