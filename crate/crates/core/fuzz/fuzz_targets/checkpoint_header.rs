#![no_main]

use libfuzzer_sys::fuzz_target;
use paraknow_core::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok((header, payload)) = checkpoint::decode_header(data) {
        // A validated manifest tiles the payload exactly.
        let total: u64 = header.tensors.iter().map(|t| t.nbytes).sum();
        assert_eq!(total, payload.len() as u64);
    }
});
