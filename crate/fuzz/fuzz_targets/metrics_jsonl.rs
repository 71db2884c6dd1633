#![no_main]

use std::path::Path;

use bro_harness::metrics::parse_metrics;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(log) = parse_metrics(&text, Path::new("fuzz.jsonl")) {
        assert!(log.lines.windows(2).all(|w| w[0].env_step() <= w[1].env_step()));
    }
});
