#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = pyrocast::dataset::decode_trajectory(data) {
        assert_eq!(pyrocast::dataset::encode_trajectory(&t), data);
    }
});
