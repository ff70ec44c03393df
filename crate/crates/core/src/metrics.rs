//! Cost accounting and quality metrics.
//!
//! Attention cost is modelled, not timed. For one layer attending to `n`
//! cached entries:
//!
//! ```text
//! flops = n_query_heads · 4 · n · head_dim      (q·k scores + value mix)
//! bytes = n · 2 · head_dim · n_kv_heads · 8      (K and V, 64-bit floats)
//! ```
//!
//! A step's totals sum these over layers at each layer's own attended size.
//! Scoring, pooling, top-K and query-similarity work is reported separately
//! as overhead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::log_softmax_at;
use crate::policies::{LayerMode, PolicyConfig, RefreshMass};
use crate::scheduler::ScheduleConfig;
use crate::session::Session;

/// Cost formula, as written into report headers.
pub const COST_MODEL: &str = "per layer attending n entries: flops = n_query_heads*4*n*head_dim; \
bytes = n*2*head_dim*n_kv_heads*8; overhead counts group aggregation, pooling, top-k and \
query-similarity work";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AttentionCost {
    pub flops: u64,
    pub bytes: u64,
}

/// Cost of one layer attending to `attended` entries.
pub fn layer_attention_cost(attended: usize, config: &ModelConfig) -> AttentionCost {
    let n = attended as u64;
    let hd = config.head_dim as u64;
    AttentionCost {
        flops: config.n_query_heads as u64 * 4 * n * hd,
        bytes: n * 2 * hd * config.n_kv_heads as u64 * 8,
    }
}

/// Cost of every layer attending to `attended` entries.
pub fn attention_cost(attended: usize, config: &ModelConfig) -> AttentionCost {
    let per = layer_attention_cost(attended, config);
    let l = config.n_layers as u64;
    AttentionCost {
        flops: per.flops * l,
        bytes: per.bytes * l,
    }
}

/// One decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step_index: usize,
    /// Token fed at this step.
    pub token: u32,
    pub modes: Vec<LayerMode>,
    /// Attended-set size per layer, including the current token.
    pub attended: Vec<usize>,
    pub attention_flops: u64,
    pub kv_bytes_moved: u64,
    pub overhead_flops: u64,
    pub similarity: Vec<Option<f64>>,
    /// Partial-cache coverage around each refresh, per layer.
    pub refresh: Vec<Option<RefreshMass>>,
    /// Mean post-refresh retained mass over the layers refreshed this step.
    pub retained_mass: Option<f64>,
    /// Attended positions per layer and kv-head; kept in memory only.
    #[serde(skip)]
    pub attended_positions: Vec<Vec<Vec<usize>>>,
}

impl StepTrace {
    /// Recompute this step's attention cost from its attended sizes.
    pub fn rederive_cost(&self, config: &ModelConfig) -> AttentionCost {
        self.attended
            .iter()
            .map(|&n| layer_attention_cost(n, config))
            .fold(AttentionCost::default(), |a, c| AttentionCost {
                flops: a.flops + c.flops,
                bytes: a.bytes + c.bytes,
            })
    }
}

/// Aggregated costs over one or more sessions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostTotals {
    pub steps: usize,
    pub attention_flops: u64,
    pub kv_bytes_moved: u64,
    pub overhead_flops: u64,
    pub full_steps: Vec<usize>,
    pub partial_steps: Vec<usize>,
}

impl CostTotals {
    pub fn from_trace(trace: &[StepTrace]) -> Self {
        let mut t = Self::default();
        for s in trace {
            t.add(s);
        }
        t
    }

    pub fn add(&mut self, s: &StepTrace) {
        let n = s.modes.len();
        if self.full_steps.len() < n {
            self.full_steps.resize(n, 0);
            self.partial_steps.resize(n, 0);
        }
        self.steps += 1;
        self.attention_flops += s.attention_flops;
        self.kv_bytes_moved += s.kv_bytes_moved;
        self.overhead_flops += s.overhead_flops;
        for (l, m) in s.modes.iter().enumerate() {
            match m {
                LayerMode::Full => self.full_steps[l] += 1,
                LayerMode::Partial => self.partial_steps[l] += 1,
            }
        }
    }

    /// Combine two totals; associative and commutative.
    pub fn merge(&self, other: &Self) -> Self {
        let n = self.full_steps.len().max(other.full_steps.len());
        let sum = |a: &[usize], b: &[usize]| -> Vec<usize> {
            (0..n)
                .map(|i| a.get(i).copied().unwrap_or(0) + b.get(i).copied().unwrap_or(0))
                .collect()
        };
        Self {
            steps: self.steps + other.steps,
            attention_flops: self.attention_flops + other.attention_flops,
            kv_bytes_moved: self.kv_bytes_moved + other.kv_bytes_moved,
            overhead_flops: self.overhead_flops + other.overhead_flops,
            full_steps: sum(&self.full_steps, &other.full_steps),
            partial_steps: sum(&self.partial_steps, &other.partial_steps),
        }
    }
}

/// Probability mass of `row` over the given row indices.
pub fn retained_mass(row: &[f64], indices: &[usize]) -> f64 {
    indices.iter().filter_map(|&i| row.get(i)).sum()
}

#[derive(Debug, Clone)]
pub struct PerplexityRun {
    pub perplexity: f64,
    /// Negative log-likelihood of each tail token, in stream order.
    pub nll: Vec<f64>,
    pub trace: Vec<StepTrace>,
}

/// Teacher-forced perplexity of the last `tail` tokens of `tokens`.
///
/// The prefix before the tail is prefilled; each tail token is then
/// predicted from the policy's cache state evolved over everything before it.
pub fn perplexity(
    model: &Model,
    policy: &PolicyConfig,
    schedule: &ScheduleConfig,
    tokens: &[u32],
    tail: usize,
) -> Result<PerplexityRun> {
    if tail == 0 || tail >= tokens.len() {
        return Err(Error::config(format!(
            "perplexity tail {tail} must lie in [1, {})",
            tokens.len()
        )));
    }
    let split = tokens.len() - tail;
    let (mut session, mut logits) = Session::start(model, policy, schedule, &tokens[..split])?;
    let mut nll = Vec::with_capacity(tail);
    for (i, &target) in tokens[split..].iter().enumerate() {
        nll.push(-log_softmax_at(&logits, target as usize));
        if i + 1 < tail {
            logits = session.step(target)?;
        }
    }
    let perplexity = (nll.iter().sum::<f64>() / tail as f64).exp();
    Ok(PerplexityRun {
        perplexity,
        nll,
        trace: session.into_trace(),
    })
}

/// Perplexity of a tail from plain teacher-forced logits, with no cache
/// policy involved.
pub fn reference_perplexity(model: &Model, tokens: &[u32], tail: usize) -> Result<f64> {
    if tail == 0 || tail >= tokens.len() {
        return Err(Error::config("perplexity tail out of range"));
    }
    let logits = model.forward_full(tokens)?;
    let split = tokens.len() - tail;
    let total: f64 = (split..tokens.len())
        .map(|i| -log_softmax_at(&logits[i - 1], tokens[i] as usize))
        .sum();
    Ok((total / tail as f64).exp())
}
