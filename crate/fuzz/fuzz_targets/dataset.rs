#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = pyrocast::dataset::decode_dataset(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(pyrocast::dataset::encode_dataset(&ds), data);
    }
});
