#![no_main]

use libfuzzer_sys::fuzz_target;
use paraknow_core::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(cfg) = serde_json::from_slice::<PipelineConfig>(data) else { return };
    if cfg.validate().is_ok() {
        let text = serde_json::to_string(&cfg).expect("config serializes");
        let back: PipelineConfig = serde_json::from_str(&text).expect("serialized config parses");
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
});
