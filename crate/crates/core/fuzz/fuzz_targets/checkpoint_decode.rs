#![no_main]

use libfuzzer_sys::fuzz_target;
use paraknow_core::checkpoint::{self, ContentKind};

fuzz_target!(|data: &[u8]| {
    let Ok(c) = checkpoint::decode(data) else { return };

    // Anything that decodes must survive a re-encode unchanged.
    let bytes = checkpoint::encode(&c).expect("decoded container re-encodes");
    assert_eq!(checkpoint::decode(&bytes).expect("re-encoded container decodes"), c);

    // Typed loaders may refuse, but must not panic.
    match c.kind {
        ContentKind::Model => drop(checkpoint::model_from_container(c)),
        ContentKind::Sensitivity => drop(checkpoint::sensitivity_from_container(c)),
        ContentKind::Injected => drop(checkpoint::injected_from_container(c)),
        ContentKind::Plan => drop(checkpoint::plan_from_container(c)),
    }
});
