#![no_main]

use kvrefresh::model::{read_weights, write_weights};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // anything that parses must round-trip
    if let Ok((config, weights)) = read_weights(data) {
        let bytes = write_weights(&config, &weights).unwrap();
        let (c2, w2) = read_weights(&bytes).unwrap();
        assert_eq!(config, c2);
        assert_eq!(weights.embed.data.len(), w2.embed.data.len());
    }
});
