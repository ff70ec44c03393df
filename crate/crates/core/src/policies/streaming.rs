use crate::error::{Error, Result};
use crate::kv_store::KvEntry;
use crate::model::{AttentionProvider, LayerProjection, Model, ModelConfig, PrefillOutput};

use super::{CachePolicy, LayerMode, LayerStep, PolicyConfig, PolicyKind};

/// Positions kept after `generated` tokens on top of a prompt of
/// `prompt_len`: the first `n_sink` plus the `budget - n_sink` most recent.
pub fn streaming_keepset(
    prompt_len: usize,
    generated: usize,
    budget: usize,
    n_sink: usize,
) -> Result<Vec<usize>> {
    if budget <= n_sink {
        return Err(Error::config(format!(
            "streaming budget {budget} leaves no recent window beside {n_sink} sink tokens"
        )));
    }
    let total = prompt_len + generated;
    if total <= budget {
        return Ok((0..total).collect());
    }
    let recent = budget - n_sink;
    Ok((0..n_sink).chain(total - recent..total).collect())
}

/// Sink tokens plus a sliding recency window.
#[derive(Debug)]
pub struct StreamingPolicy {
    config: PolicyConfig,
    budget: usize,
    prompt_len: usize,
    generated: usize,
    /// `[layer][kv_head]`, ascending positions.
    caches: Vec<Vec<Vec<KvEntry>>>,
    steps: Vec<LayerStep>,
}

impl StreamingPolicy {
    pub fn new(config: PolicyConfig) -> Self {
        Self {
            config,
            budget: 0,
            prompt_len: 0,
            generated: 0,
            caches: Vec::new(),
            steps: Vec::new(),
        }
    }

    fn compress(&mut self, layer: usize) -> Result<()> {
        let keep =
            streaming_keepset(self.prompt_len, self.generated, self.budget, self.config.n_sink)?;
        for head in &mut self.caches[layer] {
            head.retain(|e| keep.binary_search(&e.position).is_ok());
        }
        Ok(())
    }
}

impl AttentionProvider for StreamingPolicy {
    fn attend_layer(
        &mut self,
        model: &Model,
        layer: usize,
        projection: LayerProjection,
    ) -> Result<Vec<Vec<f64>>> {
        if layer >= self.caches.len() {
            return Err(Error::contract("decode before prefill"));
        }
        for (head, e) in self.caches[layer].iter_mut().zip(projection.entries) {
            head.push(e);
        }
        self.compress(layer)?;
        let heads = &self.caches[layer];
        let view: Vec<Vec<&KvEntry>> = heads.iter().map(|h| h.iter().collect()).collect();
        let att = model.attend(&projection.queries, &view, false)?;
        self.steps.push(LayerStep {
            mode: LayerMode::Partial,
            attended: heads
                .iter()
                .map(|h| h.iter().map(|e| e.position).collect())
                .collect(),
            similarity: None,
            refresh: None,
            overhead_flops: 0,
        });
        Ok(att.outputs)
    }
}

impl CachePolicy for StreamingPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Streaming
    }

    fn prefill(&mut self, _model: &ModelConfig, prefill: PrefillOutput) -> Result<()> {
        self.prompt_len = prefill.caches.first().map_or(0, |c| c.len());
        self.budget = self.config.resolve_k(self.prompt_len)?;
        self.generated = 0;
        self.caches = prefill
            .caches
            .into_iter()
            .map(|c| c.heads().to_vec())
            .collect();
        for layer in 0..self.caches.len() {
            self.compress(layer)?;
        }
        Ok(())
    }

    fn begin_step(&mut self, step_index: usize) {
        self.generated = step_index;
        self.steps.clear();
    }

    fn take_layer_steps(&mut self) -> Vec<LayerStep> {
        std::mem::take(&mut self.steps)
    }
}
