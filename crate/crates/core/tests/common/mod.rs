//! Brute-force reference implementations used by the integration tests.
//! Written from the definitions, without calling the engine's selection,
//! pooling or eviction code.
#![allow(dead_code)]

use kvrefresh::kv_store::KvEntry;
use kvrefresh::model::{AttentionProvider, LayerProjection, Model, ModelConfig};
use kvrefresh::policies::Aggregation;
use kvrefresh::Result;

pub fn aggregate(rows: &[Vec<f64>], mode: Aggregation) -> Vec<f64> {
    let n = rows[0].len();
    (0..n)
        .map(|j| match mode {
            Aggregation::First => rows[0][j],
            Aggregation::Max => rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Mean => rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64,
        })
        .collect()
}

pub fn pool(scores: &[f64], kernel: usize) -> Vec<f64> {
    let h = kernel as isize / 2;
    (0..scores.len() as isize)
        .map(|i| {
            let mut m = f64::NEG_INFINITY;
            for j in i - h..=i + h {
                if j >= 0 && (j as usize) < scores.len() {
                    m = m.max(scores[j as usize]);
                }
            }
            m
        })
        .collect()
}

/// Indices of the k best scores (higher first, lower index on ties), sorted.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = idx[..k.min(idx.len())].to_vec();
    out.sort_unstable();
    out
}

/// Selected row indices per kv-head from per-query-head rows.
pub fn select(
    rows: &[Vec<f64>],
    config: &ModelConfig,
    mode: Aggregation,
    kernel: usize,
    k: usize,
) -> Vec<Vec<usize>> {
    let g = config.n_query_heads / config.n_kv_heads;
    (0..config.n_kv_heads)
        .map(|h| top_k(&pool(&aggregate(&rows[h * g..(h + 1) * g], mode), kernel), k))
        .collect()
}

/// Keepset of a sink-plus-window cache over `total` positions.
pub fn streaming_keep(total: usize, budget: usize, n_sink: usize) -> Vec<usize> {
    if total <= budget {
        return (0..total).collect();
    }
    let sinks = n_sink.min(budget);
    let mut keep: Vec<usize> = (0..sinks).collect();
    keep.extend(total - (budget - sinks)..total);
    keep
}

/// Independent heavy-hitter cache: per kv-head map of position to entry and
/// cumulative score, evicting by sorting the whole set on every step.
pub struct BruteH2o {
    pub budget: usize,
    pub mode: Aggregation,
    /// `[layer][kv_head]` of (entry, cumulative score), ascending position.
    pub heads: Vec<Vec<Vec<(KvEntry, f64)>>>,
}

impl BruteH2o {
    pub fn positions(&self, layer: usize, head: usize) -> Vec<usize> {
        self.heads[layer][head].iter().map(|(e, _)| e.position).collect()
    }

    fn enforce(set: &mut Vec<(KvEntry, f64)>, budget: usize) {
        if set.len() <= budget {
            return;
        }
        let recent = budget / 2;
        let older = set.len() - recent;
        let mut order: Vec<usize> = (0..older).collect();
        order.sort_by(|&a, &b| set[b].1.partial_cmp(&set[a].1).unwrap().then(a.cmp(&b)));
        let mut keep: Vec<usize> = order[..budget - recent].to_vec();
        keep.extend(older..set.len());
        keep.sort_unstable();
        *set = keep.into_iter().map(|i| set[i].clone()).collect();
    }

    pub fn from_prefill(
        config: &ModelConfig,
        caches: &[kvrefresh::kv_store::FullCache],
        rows: &[Vec<Vec<f64>>],
        budget: usize,
        mode: Aggregation,
    ) -> Self {
        let g = config.n_query_heads / config.n_kv_heads;
        let heads = caches
            .iter()
            .zip(rows)
            .map(|(cache, layer_rows)| {
                cache
                    .heads()
                    .iter()
                    .enumerate()
                    .map(|(h, entries)| {
                        let agg = aggregate(&layer_rows[h * g..(h + 1) * g], mode);
                        let mut set: Vec<(KvEntry, f64)> =
                            entries.iter().cloned().zip(agg).collect();
                        Self::enforce(&mut set, budget);
                        set
                    })
                    .collect()
            })
            .collect();
        Self { budget, mode, heads }
    }
}

impl AttentionProvider for BruteH2o {
    fn attend_layer(
        &mut self,
        model: &Model,
        layer: usize,
        projection: LayerProjection,
    ) -> Result<Vec<Vec<f64>>> {
        let c = model.config().clone();
        let g = c.n_query_heads / c.n_kv_heads;
        for (set, e) in self.heads[layer].iter_mut().zip(projection.entries) {
            set.push((e, 0.0));
            Self::enforce(set, self.budget);
        }
        let view: Vec<Vec<&KvEntry>> = self.heads[layer]
            .iter()
            .map(|s| s.iter().map(|(e, _)| e).collect())
            .collect();
        let att = model.attend(&projection.queries, &view, true)?;
        let rows = att.rows.unwrap();
        for (h, set) in self.heads[layer].iter_mut().enumerate() {
            let agg = aggregate(&rows[h * g..(h + 1) * g], self.mode);
            for ((_, cum), a) in set.iter_mut().zip(agg) {
                *cum += a;
            }
        }
        Ok(att.outputs)
    }
}
