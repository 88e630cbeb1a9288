#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = pyrocast::config::RunConfig::parse(text) {
            assert_eq!(pyrocast::config::RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        }
    }
});
