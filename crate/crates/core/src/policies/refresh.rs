//! Alternating full and partial attention with a refreshable partial cache.
//!
//! Per layer and step, the scheduler picks a mode:
//!
//! * partial: the token's KV goes into the partial cache (evicting the
//!   lowest-scored entry when over budget) and into the pending buffer; the
//!   token attends to the partial cache only.
//! * full: pending KVs are merged into the full cache, the token's KV is
//!   appended to it and the token attends to the whole cache. The observed
//!   scores then rebuild the partial cache from scratch.
//!
//! The two ablations change only the full step: `NoRefresh` appends the
//! token to the partial cache as a partial step would and never rebuilds it,
//! `NoFull` rescores and rebuilds the partial cache
//! but produces its output by attending to the rebuilt partial cache.

use crate::error::{Error, Result};
use crate::kv_store::{FullCache, PartialCache, PendingBuffer};
use crate::metrics::retained_mass;
use crate::model::{AttentionProvider, LayerProjection, Model, ModelConfig, PrefillOutput};
use crate::scheduler::{should_full, LayerScheduleState, ScheduleConfig};

use super::snapkv::select_from_prefill;
use super::{
    group_mean_rows, selection_overhead, selection_scores, CachePolicy, LayerMode, LayerStep,
    PolicyConfig, PolicyKind, RefreshMass,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshVariant {
    Refresh,
    NoRefresh,
    NoFull,
}

#[derive(Debug)]
struct LayerState {
    full: FullCache,
    partial: PartialCache,
    pending: PendingBuffer,
    schedule: LayerScheduleState,
    /// Raw per-query-head rows observed at the layer's latest full step.
    last_rows: Option<Vec<Vec<f64>>>,
}

#[derive(Debug)]
pub struct RefreshPolicy {
    config: PolicyConfig,
    schedule: ScheduleConfig,
    variant: RefreshVariant,
    k: usize,
    step_index: usize,
    layers: Vec<LayerState>,
    steps: Vec<LayerStep>,
}

impl RefreshPolicy {
    pub fn new(config: PolicyConfig, schedule: ScheduleConfig, variant: RefreshVariant) -> Self {
        Self {
            config,
            schedule,
            variant,
            k: 0,
            step_index: 0,
            layers: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Resolved partial-cache budget.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn full_cache(&self, layer: usize) -> &FullCache {
        &self.layers[layer].full
    }

    pub fn partial_cache(&self, layer: usize) -> &PartialCache {
        &self.layers[layer].partial
    }

    pub fn pending(&self, layer: usize) -> &PendingBuffer {
        &self.layers[layer].pending
    }

    pub fn schedule_state(&self, layer: usize) -> &LayerScheduleState {
        &self.layers[layer].schedule
    }

    /// Attention rows observed at the layer's most recent full step, one per
    /// query head, aligned with the full cache at that moment.
    pub fn last_observed_rows(&self, layer: usize) -> Option<&[Vec<f64>]> {
        self.layers[layer].last_rows.as_deref()
    }

    fn full_step(
        &mut self,
        model: &Model,
        layer: usize,
        projection: LayerProjection,
    ) -> Result<(Vec<Vec<f64>>, Option<RefreshMass>, u64)> {
        let c = model.config();
        let state = &mut self.layers[layer];
        state.full.merge_pending(&mut state.pending)?;
        state.full.push_token(projection.entries.clone())?;
        let n = state.full.len();

        if self.variant == RefreshVariant::NoRefresh {
            // the partial cache keeps its selection but still takes the
            // token, exactly as on a partial step
            let att = model.attend(&projection.queries, &state.full.view(), false)?;
            state
                .partial
                .append_and_evict(projection.entries, self.config.evict_on_append())?;
            return Ok((att.outputs, None, 0));
        }

        let att = model.attend(&projection.queries, &state.full.view(), true)?;
        let rows = att
            .rows
            .ok_or_else(|| Error::contract("full step produced no attention rows"))?;
        let scores = selection_scores(&rows, c, &self.config)?;
        let mean_rows = group_mean_rows(&rows, c)?;
        let cf_positions = state.full.positions();
        let before = mean_partial_mass(&mean_rows, &cf_positions, &state.partial);
        state.partial.refresh(&state.full, &scores, self.k)?;
        let after = mean_partial_mass(&mean_rows, &cf_positions, &state.partial);
        state.last_rows = Some(rows);
        let mut overhead = selection_overhead(c, &self.config, n);

        let outputs = match self.variant {
            RefreshVariant::NoFull => {
                // the scoring pass is overhead; the output comes from the
                // rebuilt partial cache, which must hold the current token
                overhead += (2 * c.n_query_heads * c.head_dim * n) as u64;
                state.partial.ensure_token(projection.entries, true)?;
                model
                    .attend(&projection.queries, &state.partial.view(), false)?
                    .outputs
            }
            _ => att.outputs,
        };
        Ok((outputs, Some(RefreshMass { before, after }), overhead))
    }
}

fn mean_partial_mass(mean_rows: &[Vec<f64>], cf_positions: &[usize], partial: &PartialCache) -> f64 {
    let total: f64 = mean_rows
        .iter()
        .enumerate()
        .map(|(h, row)| {
            let idx: Vec<usize> = partial
                .positions(h)
                .iter()
                .filter_map(|p| cf_positions.binary_search(p).ok())
                .collect();
            retained_mass(row, &idx)
        })
        .sum();
    total / mean_rows.len() as f64
}

impl AttentionProvider for RefreshPolicy {
    fn attend_layer(
        &mut self,
        model: &Model,
        layer: usize,
        projection: LayerProjection,
    ) -> Result<Vec<Vec<f64>>> {
        if layer >= self.layers.len() {
            return Err(Error::contract("decode before prefill"));
        }
        let c = model.config();
        let decision = should_full(
            &self.layers[layer].schedule,
            self.step_index,
            &projection.mean_query,
            &self.schedule,
        )?;
        let mean_query = projection.mean_query.clone();
        let sim_overhead = decision.similarity.map_or(0, |_| 3 * c.head_dim as u64);

        let (outputs, refresh, overhead, mode, attended) = if decision.full {
            let (out, refresh, overhead) = self.full_step(model, layer, projection)?;
            let state = &self.layers[layer];
            let attended = if self.variant == RefreshVariant::NoFull {
                (0..c.n_kv_heads).map(|h| state.partial.positions(h)).collect()
            } else {
                vec![state.full.positions(); c.n_kv_heads]
            };
            (out, refresh, overhead, LayerMode::Full, attended)
        } else {
            let evict = self.config.evict_on_append();
            let state = &mut self.layers[layer];
            if state.partial.is_empty() {
                return Err(Error::contract("partial step over an empty partial cache"));
            }
            state.pending.push_token(projection.entries.clone())?;
            state.partial.append_and_evict(projection.entries, evict)?;
            let att = model.attend(&projection.queries, &state.partial.view(), false)?;
            let attended = (0..c.n_kv_heads).map(|h| state.partial.positions(h)).collect();
            (att.outputs, None, 0, LayerMode::Partial, attended)
        };

        self.layers[layer]
            .schedule
            .record(decision.full, &mean_query);
        self.steps.push(LayerStep {
            mode,
            attended,
            similarity: decision.similarity,
            refresh,
            overhead_flops: overhead + sim_overhead,
        });
        Ok(outputs)
    }
}

impl CachePolicy for RefreshPolicy {
    fn kind(&self) -> PolicyKind {
        match self.variant {
            RefreshVariant::Refresh => PolicyKind::Refreshkv,
            RefreshVariant::NoRefresh => PolicyKind::RefreshkvNoRefresh,
            RefreshVariant::NoFull => PolicyKind::RefreshkvNoFull,
        }
    }

    fn prefill(&mut self, model: &ModelConfig, prefill: PrefillOutput) -> Result<()> {
        let prompt_len = prefill.caches.first().map_or(0, |c| c.len());
        self.k = self.config.resolve_k(prompt_len)?;
        let partials = select_from_prefill(model, &self.config, &prefill, self.k)?;
        let rows = prefill.last.attention_rows.unwrap_or_default();
        self.layers = prefill
            .caches
            .into_iter()
            .zip(partials)
            .zip(prefill.last.per_layer_queries)
            .enumerate()
            .map(|(layer, ((full, partial), query))| LayerState {
                pending: PendingBuffer::new(full.heads().len()),
                full,
                partial,
                schedule: LayerScheduleState::from_prefill(query),
                last_rows: rows.get(layer).cloned(),
            })
            .collect();
        self.step_index = 0;
        Ok(())
    }

    fn begin_step(&mut self, step_index: usize) {
        self.step_index = step_index;
        self.steps.clear();
    }

    fn take_layer_steps(&mut self) -> Vec<LayerStep> {
        std::mem::take(&mut self.steps)
    }
}
