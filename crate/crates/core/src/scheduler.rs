//! Per-layer decision of when to run a full-attention step.
//!
//! Steps are numbered from 1 (the first generated token). In `fixed` mode a
//! layer goes full at every multiple of `stride`. In `qc` mode the layer's
//! averaged query is compared with the one recorded at its last full step,
//! but only every `qc_stride` steps; a similarity strictly below
//! `threshold` triggers full attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::StepTrace;
use crate::policies::LayerMode;
use crate::numerics::cosine_similarity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Fixed,
    Qc,
    AlwaysFull,
    NeverFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    pub stride: usize,
    pub qc_stride: usize,
    pub threshold: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Qc,
            stride: 10,
            qc_stride: 10,
            threshold: 0.85,
        }
    }
}

impl ScheduleConfig {
    pub fn fixed(stride: usize) -> Self {
        Self {
            mode: ScheduleMode::Fixed,
            stride,
            ..Self::default()
        }
    }

    pub fn qc(qc_stride: usize, threshold: f64) -> Self {
        Self {
            mode: ScheduleMode::Qc,
            qc_stride,
            threshold,
            ..Self::default()
        }
    }

    pub fn always_full() -> Self {
        Self {
            mode: ScheduleMode::AlwaysFull,
            ..Self::default()
        }
    }

    pub fn never_full() -> Self {
        Self {
            mode: ScheduleMode::NeverFull,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("schedule.stride must be positive"));
        }
        if self.qc_stride == 0 {
            return Err(Error::config("schedule.qc_stride must be positive"));
        }
        if !self.threshold.is_finite() {
            return Err(Error::config("schedule.threshold must be finite"));
        }
        Ok(())
    }
}

/// Scheduling state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScheduleState {
    /// Averaged query of the layer's most recent full step; the prefill
    /// counts as the first one.
    pub reference_query: Vec<f64>,
    pub full_step_count: usize,
    pub generated_step_count: usize,
}

impl LayerScheduleState {
    pub fn from_prefill(query: Vec<f64>) -> Self {
        Self {
            reference_query: query,
            full_step_count: 0,
            generated_step_count: 0,
        }
    }

    /// Record a completed generation step. The reference query moves only
    /// on full steps.
    pub fn record(&mut self, full: bool, query: &[f64]) {
        self.generated_step_count += 1;
        if full {
            self.full_step_count += 1;
            self.reference_query.clear();
            self.reference_query.extend_from_slice(query);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub full: bool,
    /// Query similarity, when it was evaluated at this step.
    pub similarity: Option<f64>,
}

pub fn should_full(
    state: &LayerScheduleState,
    step_index: usize,
    current_query: &[f64],
    config: &ScheduleConfig,
) -> Result<Decision> {
    let decision = match config.mode {
        ScheduleMode::AlwaysFull => Decision {
            full: true,
            similarity: None,
        },
        ScheduleMode::NeverFull => Decision {
            full: false,
            similarity: None,
        },
        ScheduleMode::Fixed => Decision {
            full: step_index > 0 && step_index.is_multiple_of(config.stride),
            similarity: None,
        },
        ScheduleMode::Qc => {
            if step_index > 0 && step_index.is_multiple_of(config.qc_stride) {
                let sim = cosine_similarity(current_query, &state.reference_query)?;
                Decision {
                    full: sim < config.threshold,
                    similarity: Some(sim),
                }
            } else {
                Decision {
                    full: false,
                    similarity: None,
                }
            }
        }
    };
    Ok(decision)
}

/// Full-step decisions implied by a recorded similarity trace under a given
/// threshold.
pub fn replay_threshold(similarities: &[Option<f64>], threshold: f64) -> Vec<bool> {
    similarities
        .iter()
        .map(|s| s.is_some_and(|s| s < threshold))
        .collect()
}

/// Generated steps per full-attention event for `layer`; `None` when the
/// layer never went full during generation.
pub fn effective_stride(trace: &[StepTrace], layer: usize) -> Option<f64> {
    let full = trace
        .iter()
        .filter(|t| t.modes.get(layer) == Some(&LayerMode::Full))
        .count();
    (full > 0).then(|| trace.len() as f64 / full as f64)
}

/// Per-layer effective strides and their mean over the layers that have one.
pub fn effective_strides(trace: &[StepTrace], n_layers: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let per_layer: Vec<Option<f64>> = (0..n_layers).map(|l| effective_stride(trace, l)).collect();
    let defined: Vec<f64> = per_layer.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per_layer, mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> LayerScheduleState {
        LayerScheduleState::from_prefill(vec![1.0, 0.0, 0.0])
    }

    #[test]
    fn fixed_fires_on_multiples() {
        let c = ScheduleConfig::fixed(10);
        let fired: Vec<usize> = (1..=35)
            .filter(|&i| should_full(&state(), i, &[0.0; 3], &c).unwrap().full)
            .collect();
        assert_eq!(fired, vec![10, 20, 30]);
    }

    #[test]
    fn qc_threshold_limits() {
        let q = [0.2, 0.9, -0.4];
        let above = ScheduleConfig::qc(5, 1.5);
        let floor = ScheduleConfig::qc(5, -1.0);
        for i in 1..=40 {
            let d = should_full(&state(), i, &q, &above).unwrap();
            assert_eq!(d.full, i % 5 == 0);
            assert_eq!(d.similarity.is_some(), i % 5 == 0);
            assert!(!should_full(&state(), i, &q, &floor).unwrap().full);
        }
        // exact anti-parallel query: similarity -1 equals the threshold, so partial
        let d = should_full(&state(), 5, &[-2.0, 0.0, 0.0], &floor).unwrap();
        assert_eq!(d.similarity, Some(-1.0));
        assert!(!d.full);
    }

    #[test]
    fn zero_query_forces_full() {
        let c = ScheduleConfig::qc(1, 0.5);
        assert!(should_full(&state(), 1, &[0.0; 3], &c).unwrap().full);
    }

    #[test]
    fn reference_moves_only_on_full() {
        let mut s = state();
        s.record(false, &[0.0, 1.0, 0.0]);
        assert_eq!(s.reference_query, vec![1.0, 0.0, 0.0]);
        s.record(true, &[0.0, 1.0, 0.0]);
        assert_eq!(s.reference_query, vec![0.0, 1.0, 0.0]);
        assert_eq!((s.full_step_count, s.generated_step_count), (1, 2));
    }

    #[test]
    fn replay_is_monotone_in_threshold() {
        let sims = [None, Some(0.9), None, Some(0.84), Some(0.85), Some(-0.2)];
        let lo = replay_threshold(&sims, 0.85);
        let hi = replay_threshold(&sims, 0.9);
        assert_eq!(lo, vec![false, false, false, true, false, true]);
        for (a, b) in lo.iter().zip(&hi) {
            assert!(!a || *b);
        }
    }

    #[test]
    fn validation() {
        assert!(ScheduleConfig::fixed(0).validate().is_err());
        assert!(ScheduleConfig::qc(0, 0.5).validate().is_err());
        assert!(ScheduleConfig::qc(3, f64::NAN).validate().is_err());
        assert!(ScheduleConfig::default().validate().is_ok());
    }
}
