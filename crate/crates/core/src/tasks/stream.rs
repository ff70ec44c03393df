//! Deterministic synthetic token streams for perplexity runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of motif tokens replaced by uniform noise.
pub const MOTIF_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamStructure {
    /// Independent uniform tokens.
    Uniform,
    /// A random motif of `period` tokens repeated end to end, with
    /// [`MOTIF_NOISE`] of positions resampled.
    RepeatedMotif { period: usize },
}

pub fn synthetic_lm_stream(
    length: usize,
    vocab: usize,
    seed: u64,
    structure: StreamStructure,
) -> Result<Vec<u32>> {
    if vocab == 0 || vocab > u32::MAX as usize {
        return Err(Error::config("stream vocabulary out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| rng.random_range(0..vocab) as u32;
    Ok(match structure {
        StreamStructure::Uniform => (0..length).map(|_| draw(&mut rng)).collect(),
        StreamStructure::RepeatedMotif { period } => {
            if period == 0 {
                return Err(Error::config("motif period must be positive"));
            }
            let motif: Vec<u32> = (0..period).map(|_| draw(&mut rng)).collect();
            (0..length)
                .map(|i| {
                    if rng.random_bool(MOTIF_NOISE) {
                        draw(&mut rng)
                    } else {
                        motif[i % period]
                    }
                })
                .collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        for s in [
            StreamStructure::Uniform,
            StreamStructure::RepeatedMotif { period: 64 },
        ] {
            let a = synthetic_lm_stream(500, 256, 11, s).unwrap();
            assert_eq!(a, synthetic_lm_stream(500, 256, 11, s).unwrap());
            assert_ne!(a, synthetic_lm_stream(500, 256, 12, s).unwrap());
            assert!(a.iter().all(|&t| t < 256));
        }
    }

    #[test]
    fn motif_mostly_repeats() {
        let s = synthetic_lm_stream(2048, 256, 5, StreamStructure::RepeatedMotif { period: 64 })
            .unwrap();
        let same = (64..s.len()).filter(|&i| s[i] == s[i - 64]).count();
        let frac = same as f64 / (s.len() - 64) as f64;
        // both positions clean with probability 0.95^2
        assert!(frac > 0.85, "{frac}");
    }

    #[test]
    fn bad_parameters() {
        assert!(synthetic_lm_stream(10, 0, 0, StreamStructure::Uniform).is_err());
        assert!(
            synthetic_lm_stream(10, 4, 0, StreamStructure::RepeatedMotif { period: 0 }).is_err()
        );
    }
}
