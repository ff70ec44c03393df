use crate::error::{Error, Result};
use crate::kv_store::PartialCache;
use crate::model::{AttentionProvider, LayerProjection, Model, ModelConfig, PrefillOutput};

use super::{selection_scores, CachePolicy, LayerMode, LayerStep, PolicyConfig, PolicyKind};

/// One-shot selection from the last prompt token's attention; generated
/// tokens are appended (without eviction by default).
#[derive(Debug)]
pub struct SnapKvPolicy {
    config: PolicyConfig,
    caches: Vec<PartialCache>,
    steps: Vec<LayerStep>,
}

impl SnapKvPolicy {
    pub fn new(config: PolicyConfig) -> Self {
        Self {
            config,
            caches: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn caches(&self) -> &[PartialCache] {
        &self.caches
    }
}

/// Prefill-time selection shared with the refreshing policies.
pub(super) fn select_from_prefill(
    model: &ModelConfig,
    config: &PolicyConfig,
    prefill: &PrefillOutput,
    k: usize,
) -> Result<Vec<PartialCache>> {
    let rows = prefill
        .last
        .attention_rows
        .as_ref()
        .ok_or_else(|| Error::contract("selection needs observed prefill scores"))?;
    prefill
        .caches
        .iter()
        .zip(rows)
        .map(|(cache, layer_rows)| {
            let scores = selection_scores(layer_rows, model, config)?;
            PartialCache::init(cache, &scores, k)
        })
        .collect()
}

impl AttentionProvider for SnapKvPolicy {
    fn attend_layer(
        &mut self,
        model: &Model,
        layer: usize,
        projection: LayerProjection,
    ) -> Result<Vec<Vec<f64>>> {
        let cache = self
            .caches
            .get_mut(layer)
            .ok_or_else(|| Error::contract("decode before prefill"))?;
        cache.append_and_evict(projection.entries, self.config.evict_on_append())?;
        let att = model.attend(&projection.queries, &cache.view(), false)?;
        self.steps.push(LayerStep {
            mode: LayerMode::Partial,
            attended: (0..cache.heads().len()).map(|h| cache.positions(h)).collect(),
            similarity: None,
            refresh: None,
            overhead_flops: 0,
        });
        Ok(att.outputs)
    }
}

impl CachePolicy for SnapKvPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Snapkv
    }

    fn prefill(&mut self, model: &ModelConfig, prefill: PrefillOutput) -> Result<()> {
        let prompt_len = prefill.caches.first().map_or(0, |c| c.len());
        let k = self.config.resolve_k(prompt_len)?;
        self.caches = select_from_prefill(model, &self.config, &prefill, k)?;
        Ok(())
    }

    fn begin_step(&mut self, _step_index: usize) {
        self.steps.clear();
    }

    fn take_layer_steps(&mut self) -> Vec<LayerStep> {
        std::mem::take(&mut self.steps)
    }
}
