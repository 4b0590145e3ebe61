#![no_main]

use libfuzzer_sys::fuzz_target;
use paraknow_core::train::{decode, encode};

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(ids) = encode(s) {
        assert_eq!(decode(&ids), s);
    }
});
