#![no_main]

use kvrefresh::harness::parse_run_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // first line is an optional `key=value` override, the rest the document
    let (head, body) = text.split_once('\n').unwrap_or(("", text));
    let overrides: Vec<(String, String)> = head
        .split_once('=')
        .map(|(k, v)| vec![(k.to_string(), v.to_string())])
        .unwrap_or_default();
    if let Ok(config) = parse_run_config(Some(body), &overrides) {
        let _ = config.validate();
    }
});
