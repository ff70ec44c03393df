#![no_main]

use std::sync::OnceLock;

use kvrefresh::tasks::chainkey::{evaluate_chain, generate_chain_instance, ChainKeyInstance};
use libfuzzer_sys::fuzz_target;

fn instance() -> &'static ChainKeyInstance {
    static INST: OnceLock<ChainKeyInstance> = OnceLock::new();
    INST.get_or_init(|| generate_chain_instance(20, 2, 5, 0).unwrap())
}

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let s = evaluate_chain(instance(), &text);
    assert!(s.valid_prefix_length <= instance().t);
    assert!((0.0..=1.0).contains(&s.score));
});
