#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frames) = pyrocast::dataset::decode_frames(data) {
        assert_eq!(pyrocast::dataset::encode_frames(&frames).unwrap(), data);
    }
});
