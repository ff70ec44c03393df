use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::max_relative_diff;
use crate::policies::{PolicyConfig, PolicyKind};
use crate::scheduler::ScheduleConfig;

use super::{greedy_run, task_prompt, GreedyRun, RunConfig};

/// Relative logit tolerance for policies that must coincide.
pub const LADDER_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderCheck {
    pub name: String,
    pub passed: bool,
    pub max_relative_diff: f64,
    pub tokens_equal: bool,
    pub attended_equal: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub prompt_len: usize,
    pub steps: usize,
    pub checks: Vec<LadderCheck>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Error listing every failed check, if any.
    pub fn into_result(self) -> Result<Self> {
        let failed: Vec<&str> = self
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        if failed.is_empty() {
            Ok(self)
        } else {
            Err(Error::contract(format!(
                "equivalence ladder failed: {}",
                failed.join(", ")
            )))
        }
    }
}

fn logit_diff(a: &GreedyRun, b: &GreedyRun) -> f64 {
    if a.logits.len() != b.logits.len() {
        return f64::INFINITY;
    }
    a.logits
        .iter()
        .zip(&b.logits)
        .map(|(x, y)| {
            if x.len() != y.len() {
                f64::INFINITY
            } else {
                max_relative_diff(x, y)
            }
        })
        .fold(0.0, f64::max)
}

fn check(name: &str, a: &GreedyRun, b: &GreedyRun, attended: bool) -> LadderCheck {
    let diff = logit_diff(a, b);
    let tokens_equal = a.tokens == b.tokens;
    let attended_equal = attended.then(|| {
        a.trace.len() == b.trace.len()
            && a.trace
                .iter()
                .zip(&b.trace)
                .all(|(x, y)| x.attended_positions == y.attended_positions)
    });
    LadderCheck {
        name: name.to_string(),
        passed: diff <= LADDER_TOLERANCE && tokens_equal && attended_equal.unwrap_or(true),
        max_relative_diff: diff,
        tokens_equal,
        attended_equal,
    }
}

/// Run the policy equivalence ladder on the config's model and prompt.
///
/// Pairs that must agree: vanilla and refreshkv with K = L under always-full
/// scheduling; snapkv and never-refreshed refreshkv without append eviction
/// (including attended sets); streaming and h2o with a budget covering the
/// whole run, against vanilla; and vanilla against a from-scratch causal
/// forward pass over the generated sequence.
pub fn self_check(config: &RunConfig) -> Result<SelfCheckReport> {
    config.model.validate()?;
    config.policy.validate()?;
    let model = Model::new(config.model.clone())?;
    let prompt = task_prompt(config)?;
    let l = prompt.len();
    let n = config.n_generate;
    if l + n > config.model.max_position {
        return Err(Error::config("self-check run exceeds max_position"));
    }
    let with = |kind: PolicyKind, k: Option<usize>| PolicyConfig {
        kind,
        k: k.or(config.policy.k),
        ..config.policy.clone()
    };
    let any = ScheduleConfig::default();

    let vanilla = greedy_run(&model, &with(PolicyKind::Vanilla, None), &any, &prompt, n)?;
    let mut checks = Vec::new();

    let full = greedy_run(
        &model,
        &with(PolicyKind::Refreshkv, Some(l)),
        &ScheduleConfig::always_full(),
        &prompt,
        n,
    )?;
    checks.push(check("refreshkv(K=L, always_full) = vanilla", &full, &vanilla, false));

    let snap_cfg = PolicyConfig {
        evict_on_append: Some(false),
        ..with(PolicyKind::Snapkv, None)
    };
    let snap = greedy_run(&model, &snap_cfg, &any, &prompt, n)?;
    let never = greedy_run(
        &model,
        &PolicyConfig {
            kind: PolicyKind::Refreshkv,
            ..snap_cfg.clone()
        },
        &ScheduleConfig::never_full(),
        &prompt,
        n,
    )?;
    checks.push(check(
        "refreshkv(never_full, no append eviction) = snapkv",
        &never,
        &snap,
        true,
    ));

    for kind in [PolicyKind::Streaming, PolicyKind::H2o] {
        let r = greedy_run(&model, &with(kind, Some(l + n)), &any, &prompt, n)?;
        checks.push(check(
            &format!("{}(K >= L+N) = vanilla", kind.name()),
            &r,
            &vanilla,
            false,
        ));
    }

    let mut seq = prompt.clone();
    seq.extend_from_slice(&vanilla.tokens);
    let reference = model.forward_full(&seq)?;
    let diff = vanilla
        .logits
        .iter()
        .zip(&reference[l - 1..])
        .map(|(a, b)| max_relative_diff(a, b))
        .fold(0.0, f64::max);
    checks.push(LadderCheck {
        name: "vanilla = causal forward pass".into(),
        passed: diff <= LADDER_TOLERANCE,
        max_relative_diff: diff,
        tokens_equal: true,
        attended_equal: None,
    });

    Ok(SelfCheckReport {
        prompt_len: l,
        steps: n,
        checks,
    })
}
