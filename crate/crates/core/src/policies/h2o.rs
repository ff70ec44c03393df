use crate::error::{Error, Result};
use crate::kv_store::KvEntry;
use crate::model::{AttentionProvider, LayerProjection, Model, ModelConfig, PrefillOutput};
use crate::numerics::top_k_indices;

use super::{
    aggregate_group_scores, CachePolicy, LayerMode, LayerStep, PolicyConfig, PolicyKind,
};

/// Indices (into ascending `cumulative`) kept under `budget`: the
/// `budget / 2` newest entries plus the highest cumulative scores among the
/// rest, ties to the older entry.
pub fn h2o_keep(cumulative: &[f64], budget: usize) -> Vec<usize> {
    let n = cumulative.len();
    if n <= budget {
        return (0..n).collect();
    }
    let recent = budget / 2;
    let heavy = budget - recent;
    let older = n - recent;
    let mut keep = top_k_indices(&cumulative[..older], heavy).expect("heavy <= older");
    keep.extend(older..n);
    keep
}

/// One kv-head's cache with per-entry cumulative attention.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct H2oHead {
    pub entries: Vec<KvEntry>,
    pub cumulative: Vec<f64>,
}

impl H2oHead {
    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    /// Add the attention row observed over the current entries.
    pub fn accumulate(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cumulative.len() {
            return Err(Error::contract("h2o row does not match the keep set"));
        }
        for (c, r) in self.cumulative.iter_mut().zip(row) {
            *c += r;
        }
        Ok(())
    }

    /// Insert a new token with zero accumulated score.
    pub fn admit(&mut self, entry: KvEntry) {
        self.entries.push(entry);
        self.cumulative.push(0.0);
    }

    /// Drop entries until at most `budget` remain.
    pub fn enforce(&mut self, budget: usize) {
        if self.entries.len() <= budget {
            return;
        }
        let keep = h2o_keep(&self.cumulative, budget);
        let entries = std::mem::take(&mut self.entries);
        let mut it = keep.iter().peekable();
        let mut cumulative = Vec::with_capacity(keep.len());
        for (i, e) in entries.into_iter().enumerate() {
            if it.peek() == Some(&&i) {
                it.next();
                self.entries.push(e);
                cumulative.push(self.cumulative[i]);
            }
        }
        self.cumulative = cumulative;
    }
}

/// Heavy hitters plus recent tokens, scored by cumulative attention.
#[derive(Debug)]
pub struct H2oPolicy {
    config: PolicyConfig,
    budget: usize,
    /// `[layer][kv_head]`
    heads: Vec<Vec<H2oHead>>,
    steps: Vec<LayerStep>,
}

impl H2oPolicy {
    pub fn new(config: PolicyConfig) -> Self {
        Self {
            config,
            budget: 0,
            heads: Vec::new(),
            steps: Vec::new(),
        }
    }

    pub fn heads(&self, layer: usize) -> &[H2oHead] {
        &self.heads[layer]
    }

    fn group_rows(&self, model: &ModelConfig, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.chunks(model.group_size())
            .map(|g| {
                let refs: Vec<&[f64]> = g.iter().map(Vec::as_slice).collect();
                aggregate_group_scores(&refs, self.config.gqa_aggregation)
            })
            .collect()
    }
}

impl AttentionProvider for H2oPolicy {
    fn attend_layer(
        &mut self,
        model: &Model,
        layer: usize,
        projection: LayerProjection,
    ) -> Result<Vec<Vec<f64>>> {
        if layer >= self.heads.len() {
            return Err(Error::contract("decode before prefill"));
        }
        let budget = self.budget;
        for (head, e) in self.heads[layer].iter_mut().zip(projection.entries) {
            head.admit(e);
            head.enforce(budget);
        }
        let view: Vec<Vec<&KvEntry>> = self.heads[layer]
            .iter()
            .map(|h| h.entries.iter().collect())
            .collect();
        let att = model.attend(&projection.queries, &view, true)?;
        let rows = att.rows.as_deref().unwrap_or_default();
        let per_head = self.group_rows(model.config(), rows)?;
        let n = self.heads[layer].first().map_or(0, |h| h.entries.len());
        for (head, row) in self.heads[layer].iter_mut().zip(&per_head) {
            head.accumulate(row)?;
        }
        let c = model.config();
        self.steps.push(LayerStep {
            mode: LayerMode::Partial,
            attended: self.heads[layer].iter().map(H2oHead::positions).collect(),
            similarity: None,
            refresh: None,
            overhead_flops: (c.n_query_heads * n) as u64,
        });
        Ok(att.outputs)
    }
}

impl CachePolicy for H2oPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::H2o
    }

    fn prefill(&mut self, model: &ModelConfig, prefill: PrefillOutput) -> Result<()> {
        let prompt_len = prefill.caches.first().map_or(0, |c| c.len());
        self.budget = self.config.resolve_k(prompt_len)?;
        let rows = prefill
            .last
            .attention_rows
            .ok_or_else(|| Error::contract("h2o needs observed prefill scores"))?;
        self.heads = Vec::with_capacity(prefill.caches.len());
        for (cache, layer_rows) in prefill.caches.into_iter().zip(&rows) {
            let per_head = self.group_rows(model, layer_rows)?;
            let mut heads: Vec<H2oHead> = cache
                .heads()
                .iter()
                .zip(per_head)
                .map(|(entries, row)| H2oHead {
                    entries: entries.clone(),
                    cumulative: row,
                })
                .collect();
            for h in &mut heads {
                h.enforce(self.budget);
            }
            self.heads.push(heads);
        }
        Ok(())
    }

    fn begin_step(&mut self, _step_index: usize) {
        self.steps.clear();
    }

    fn take_layer_steps(&mut self) -> Vec<LayerStep> {
        std::mem::take(&mut self.steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(n: usize) -> H2oHead {
        H2oHead {
            entries: (0..n)
                .map(|p| KvEntry {
                    position: p,
                    key: vec![0.0],
                    value: vec![0.0],
                })
                .collect(),
            cumulative: vec![0.0; n],
        }
    }

    fn step(h: &mut H2oHead, pos: usize, budget: usize, row: impl Fn(&[usize]) -> Vec<f64>) {
        h.admit(KvEntry {
            position: pos,
            key: vec![0.0],
            value: vec![0.0],
        });
        h.enforce(budget);
        let r = row(&h.positions());
        h.accumulate(&r).unwrap();
    }

    #[test]
    fn keep_splits_recent_and_heavy() {
        let cum = [5.0, 0.1, 3.0, 0.2, 0.0, 0.0];
        assert_eq!(h2o_keep(&cum, 4), vec![0, 2, 4, 5]);
        assert_eq!(h2o_keep(&cum, 6), (0..6).collect::<Vec<_>>());
        // odd budget: 1 recent + 2 heavy
        assert_eq!(h2o_keep(&cum, 3), vec![0, 2, 5]);
    }

    #[test]
    fn uniform_attention_keeps_earliest() {
        let budget = 6;
        let mut h = head(6);
        for pos in 6..30 {
            step(&mut h, pos, budget, |p| vec![1.0 / p.len() as f64; p.len()]);
        }
        let p = h.positions();
        assert_eq!(&p[..3], &[0, 1, 2]);
        assert_eq!(&p[3..], &[27, 28, 29]);
    }

    #[test]
    fn dominant_position_survives() {
        let budget = 4;
        let mut h = head(4);
        for pos in 4..40 {
            step(&mut h, pos, budget, |p| {
                let mut r = vec![0.1 / (p.len() - 1) as f64; p.len()];
                if let Some(i) = p.iter().position(|&x| x == 1) {
                    r[i] = 0.9;
                }
                r
            });
            assert!(h.positions().contains(&1));
        }
    }

    #[test]
    fn large_budget_never_evicts() {
        let mut h = head(5);
        for pos in 5..20 {
            step(&mut h, pos, 100, |p| vec![1.0 / p.len() as f64; p.len()]);
        }
        assert_eq!(h.positions(), (0..20).collect::<Vec<_>>());
    }
}
