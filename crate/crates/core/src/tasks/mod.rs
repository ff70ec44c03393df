//! Workloads: the chain-of-key retrieval task and synthetic token streams.

pub mod chainkey;
pub mod stream;

pub use chainkey::{
    evaluate_chain, generate_chain_instance, oracle_chain, oracle_output, ChainKeyInstance,
    ChainScore,
};
pub use stream::{synthetic_lm_stream, StreamStructure};

/// Byte-level tokenization, matching a 256-entry vocabulary.
pub fn encode_bytes(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`encode_bytes`]; tokens above 255 and invalid UTF-8 are
/// replaced.
pub fn decode_bytes(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .map(|&t| u8::try_from(t).unwrap_or(b'?'))
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
