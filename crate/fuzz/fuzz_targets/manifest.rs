#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = pyrocast::dataset::Manifest::parse(text) {
            assert_eq!(pyrocast::dataset::Manifest::parse(&m.to_text()).unwrap(), m);
        }
    }
});
