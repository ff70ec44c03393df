//! Cache policies.
//!
//! Every policy implements [`CachePolicy`]: it takes ownership of the
//! prefill caches, then, for each decode step and layer, decides which
//! cached entries the current token attends to and how the caches change.
//!
//! | kind                   | attends to                                    |
//! |------------------------|-----------------------------------------------|
//! | `vanilla`              | every cached token                            |
//! | `streaming`            | sink tokens plus a recency window             |
//! | `h2o`                  | recent tokens plus cumulative-score leaders   |
//! | `snapkv`               | a prefill-time top-K selection, then appends  |
//! | `refreshkv`            | a top-K partial cache, rebuilt at full steps  |
//! | `refreshkv_no_refresh` | as `refreshkv`, but full steps keep the cache |
//! | `refreshkv_no_full`    | full steps only rescore, then attend partial  |

mod h2o;
mod refresh;
mod snapkv;
mod streaming;
mod vanilla;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionProvider, ModelConfig, PrefillOutput};
use crate::numerics::max_pool_1d;
use crate::scheduler::ScheduleConfig;

pub use h2o::{h2o_keep, H2oHead, H2oPolicy};
pub use refresh::{RefreshPolicy, RefreshVariant};
pub use snapkv::SnapKvPolicy;
pub use streaming::{streaming_keepset, StreamingPolicy};
pub use vanilla::VanillaPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Vanilla,
    Streaming,
    H2o,
    Snapkv,
    Refreshkv,
    RefreshkvNoRefresh,
    RefreshkvNoFull,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Vanilla => "vanilla",
            PolicyKind::Streaming => "streaming",
            PolicyKind::H2o => "h2o",
            PolicyKind::Snapkv => "snapkv",
            PolicyKind::Refreshkv => "refreshkv",
            PolicyKind::RefreshkvNoRefresh => "refreshkv_no_refresh",
            PolicyKind::RefreshkvNoFull => "refreshkv_no_full",
        }
    }

    fn selects_from_prefill(self) -> bool {
        matches!(
            self,
            PolicyKind::Snapkv
                | PolicyKind::Refreshkv
                | PolicyKind::RefreshkvNoRefresh
                | PolicyKind::RefreshkvNoFull
        )
    }
}

/// How attention rows of the query heads sharing a kv-head are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Mean,
    First,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Absolute cache budget; takes precedence over `k_fraction`.
    pub k: Option<usize>,
    /// Budget as a fraction of the prompt length.
    pub k_fraction: f64,
    pub kernel_size: usize,
    pub gqa_aggregation: Aggregation,
    pub n_sink: usize,
    /// Evict on append to the partial cache; defaults to true for the
    /// refreshing policies and false for `snapkv`.
    pub evict_on_append: Option<bool>,
    /// Select one position set per layer (scores max-combined across
    /// kv-heads) instead of one per kv-head.
    pub shared_selection: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Refreshkv,
            k: None,
            k_fraction: 0.125,
            kernel_size: 7,
            gqa_aggregation: Aggregation::Max,
            n_sink: 4,
            evict_on_append: None,
            shared_selection: false,
        }
    }
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = Some(k);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "policy.kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.k.is_none() && !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(Error::config("policy.k_fraction must lie in (0, 1]"));
        }
        if self.k == Some(0) {
            return Err(Error::config("policy.k must be positive"));
        }
        if let (PolicyKind::Streaming, Some(k)) = (self.kind, self.k) {
            if k < self.n_sink {
                return Err(Error::config(format!(
                    "streaming budget {k} is smaller than n_sink {}",
                    self.n_sink
                )));
            }
        }
        Ok(())
    }

    pub fn evict_on_append(&self) -> bool {
        self.evict_on_append
            .unwrap_or(self.kind != PolicyKind::Snapkv)
    }

    /// Cache budget for a prompt of `prompt_len` tokens.
    ///
    /// Selection-based policies cannot keep more than the prompt, so their
    /// budget is capped at `prompt_len`; streaming and h2o budgets also bound
    /// the generated tokens and stay uncapped.
    pub fn resolve_k(&self, prompt_len: usize) -> Result<usize> {
        let k = match self.k {
            Some(k) if self.kind.selects_from_prefill() => k.min(prompt_len),
            Some(k) => k,
            None => (self.k_fraction * prompt_len as f64).floor() as usize,
        };
        if k == 0 {
            return Err(Error::config(format!(
                "cache budget resolves to zero for a prompt of {prompt_len} tokens"
            )));
        }
        Ok(k)
    }
}

/// Combine the attention rows of one query-head group elementwise.
pub fn aggregate_group_scores(rows: &[&[f64]], mode: Aggregation) -> Result<Vec<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::contract("empty query-head group"))?;
    if rows.iter().any(|r| r.len() != first.len()) {
        return Err(Error::contract("ragged attention rows within a group"));
    }
    Ok(match mode {
        Aggregation::First => first.to_vec(),
        Aggregation::Max => (0..first.len())
            .map(|i| rows.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        Aggregation::Mean => (0..first.len())
            .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
            .collect(),
    })
}

/// Rows of one layer grouped by kv-head.
fn grouped<'a>(rows: &'a [Vec<f64>], model: &ModelConfig) -> Vec<Vec<&'a [f64]>> {
    rows.chunks(model.group_size())
        .map(|g| g.iter().map(Vec::as_slice).collect())
        .collect()
}

/// Selection scores of one layer, one vector per kv-head: the group's rows
/// are aggregated first, then max-pooled over positions.
pub fn selection_scores(
    rows: &[Vec<f64>],
    model: &ModelConfig,
    policy: &PolicyConfig,
) -> Result<Vec<Vec<f64>>> {
    if rows.len() != model.n_query_heads {
        return Err(Error::contract("one attention row per query head is required"));
    }
    let mut per_head = grouped(rows, model)
        .iter()
        .map(|g| {
            let agg = aggregate_group_scores(g, policy.gqa_aggregation)?;
            max_pool_1d(&agg, policy.kernel_size)
        })
        .collect::<Result<Vec<_>>>()?;
    if policy.shared_selection {
        let refs: Vec<&[f64]> = per_head.iter().map(Vec::as_slice).collect();
        let shared = aggregate_group_scores(&refs, Aggregation::Max)?;
        per_head = vec![shared; model.n_kv_heads];
    }
    Ok(per_head)
}

/// Mean attention row of each kv-head group: a probability distribution
/// over that head's attended entries.
pub(crate) fn group_mean_rows(rows: &[Vec<f64>], model: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    grouped(rows, model)
        .iter()
        .map(|g| aggregate_group_scores(g, Aggregation::Mean))
        .collect()
}

/// Full or partial attention for one layer at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    Full,
    Partial,
}

/// Retained attention mass of the partial cache just before and just after
/// a refresh, measured against the same full-attention row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefreshMass {
    pub before: f64,
    pub after: f64,
}

/// What a policy did for one layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    pub mode: LayerMode,
    /// Attended positions per kv-head, including the current token.
    pub attended: Vec<Vec<usize>>,
    pub similarity: Option<f64>,
    pub refresh: Option<RefreshMass>,
    pub overhead_flops: u64,
}

/// A cache policy bound to one decode session.
pub trait CachePolicy: AttentionProvider {
    fn kind(&self) -> PolicyKind;

    /// Take ownership of the prefill caches.
    fn prefill(&mut self, model: &ModelConfig, prefill: PrefillOutput) -> Result<()>;

    /// Announce the 1-based index of the step about to be decoded.
    fn begin_step(&mut self, step_index: usize);

    /// Per-layer records of the step just decoded.
    fn take_layer_steps(&mut self) -> Vec<LayerStep>;
}

/// Instantiate the policy described by `policy`.
pub fn build_policy(
    policy: &PolicyConfig,
    schedule: &ScheduleConfig,
) -> Result<Box<dyn CachePolicy>> {
    policy.validate()?;
    schedule.validate()?;
    Ok(match policy.kind {
        PolicyKind::Vanilla => Box::new(VanillaPolicy::new()),
        PolicyKind::Streaming => Box::new(StreamingPolicy::new(policy.clone())),
        PolicyKind::H2o => Box::new(H2oPolicy::new(policy.clone())),
        PolicyKind::Snapkv => Box::new(SnapKvPolicy::new(policy.clone())),
        PolicyKind::Refreshkv => Box::new(RefreshPolicy::new(
            policy.clone(),
            schedule.clone(),
            RefreshVariant::Refresh,
        )),
        PolicyKind::RefreshkvNoRefresh => Box::new(RefreshPolicy::new(
            policy.clone(),
            schedule.clone(),
            RefreshVariant::NoRefresh,
        )),
        PolicyKind::RefreshkvNoFull => Box::new(RefreshPolicy::new(
            policy.clone(),
            schedule.clone(),
            RefreshVariant::NoFull,
        )),
    })
}

/// Overhead of turning one layer's rows into selection scores over `n`
/// positions: aggregation, pooling and the top-K pass.
pub(crate) fn selection_overhead(model: &ModelConfig, policy: &PolicyConfig, n: usize) -> u64 {
    let per_head = model.group_size() + policy.kernel_size + 1;
    (model.n_kv_heads * per_head * n) as u64
}
