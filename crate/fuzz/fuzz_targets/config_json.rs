#![no_main]

use libfuzzer_sys::fuzz_target;

use awaker::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::from_json_str(text) else {
        return;
    };
    // accepted configs are validated and serialize/parse idempotently
    let serialized = serde_json::to_string(&cfg).unwrap();
    let again = RunConfig::from_json_str(&serialized).unwrap();
    assert_eq!(again, cfg);
});
