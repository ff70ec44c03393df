use crate::error::{Error, Result};
use crate::kv_store::FullCache;
use crate::model::{AttentionProvider, LayerProjection, Model, ModelConfig, PrefillOutput};

use super::{CachePolicy, LayerMode, LayerStep, PolicyKind};

/// Attends to the complete cache at every step.
#[derive(Debug, Default)]
pub struct VanillaPolicy {
    caches: Vec<FullCache>,
    steps: Vec<LayerStep>,
}

impl VanillaPolicy {
    pub fn new() -> Self {
        Self::default()
    }
}

impl AttentionProvider for VanillaPolicy {
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
        cache.push_token(projection.entries)?;
        let att = model.attend(&projection.queries, &cache.view(), false)?;
        let positions = cache.positions();
        self.steps.push(LayerStep {
            mode: LayerMode::Full,
            attended: vec![positions; cache.heads().len()],
            similarity: None,
            refresh: None,
            overhead_flops: 0,
        });
        Ok(att.outputs)
    }
}

impl CachePolicy for VanillaPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Vanilla
    }

    fn prefill(&mut self, _model: &ModelConfig, prefill: PrefillOutput) -> Result<()> {
        self.caches = prefill.caches;
        Ok(())
    }

    fn begin_step(&mut self, _step_index: usize) {
        self.steps.clear();
    }

    fn take_layer_steps(&mut self) -> Vec<LayerStep> {
        std::mem::take(&mut self.steps)
    }
}
