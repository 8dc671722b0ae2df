#![no_main]

use libfuzzer_sys::fuzz_target;

use awaker::taskgen::{instance_to_line, parse_instance_line};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for line in text.lines() {
        let Ok(inst) = parse_instance_line(line) else {
            continue;
        };
        // accepted instances must round-trip through the writer
        let rewritten = instance_to_line(&inst).unwrap();
        assert_eq!(parse_instance_line(&rewritten).unwrap(), inst);
    }
});
