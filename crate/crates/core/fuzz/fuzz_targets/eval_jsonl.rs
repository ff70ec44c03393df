#![no_main]

use kvrefresh::tasks::chainkey::{parse_eval_line, parse_instance_line};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for line in text.lines() {
        let _ = parse_eval_line(line);
        if let Ok(inst) = parse_instance_line(line) {
            inst.validate().unwrap();
        }
    }
});
