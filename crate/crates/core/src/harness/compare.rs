use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::policies::PolicyKind;

use super::Report;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub quality: Option<f64>,
    pub attention_flops: u64,
    pub kv_bytes_moved: u64,
    pub overhead_flops: u64,
    pub quality_ratio: Option<f64>,
    pub flops_ratio: f64,
    pub bytes_ratio: f64,
}

/// Side-by-side view of several reports over one task instance. Ratios are
/// taken against the first vanilla report, or the first report when none
/// is vanilla.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: String,
    /// `perplexity`, `chain_score`, or `quality` when the task has neither.
    pub quality_metric: String,
    pub rows: Vec<ComparisonRow>,
}

fn labels(reports: &[Report]) -> Vec<String> {
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let name = r.policy.name();
            let dup = reports.iter().filter(|o| o.policy == r.policy).count() > 1;
            if dup {
                format!("{name}#{i}")
            } else {
                name.to_string()
            }
        })
        .collect()
}

fn baseline_index(reports: &[Report]) -> usize {
    reports
        .iter()
        .position(|r| r.policy == PolicyKind::Vanilla)
        .unwrap_or(0)
}

fn check_comparable(reports: &[Report]) -> Result<()> {
    if reports.len() < 2 {
        return Err(Error::config("compare needs at least two reports"));
    }
    let first = &reports[0];
    for r in &reports[1..] {
        if r.task_seed != first.task_seed {
            return Err(Error::config(format!(
                "reports use different task seeds ({} vs {}); their inputs differ, so the \
                 numbers are not comparable",
                first.task_seed, r.task_seed
            )));
        }
        if r.config.task != first.config.task || r.config.model != first.config.model {
            return Err(Error::config(
                "reports were produced for different tasks or models",
            ));
        }
    }
    Ok(())
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

pub fn compare(reports: &[Report]) -> Result<Comparison> {
    check_comparable(reports)?;
    let labels = labels(reports);
    let base = &reports[baseline_index(reports)];
    let quality = |r: &Report| r.perplexity.or(r.chain_score.map(|s| s.score));
    let rows = reports
        .iter()
        .zip(&labels)
        .map(|(r, label)| ComparisonRow {
            label: label.clone(),
            quality: quality(r),
            attention_flops: r.totals.attention_flops,
            kv_bytes_moved: r.totals.kv_bytes_moved,
            overhead_flops: r.totals.overhead_flops,
            quality_ratio: quality(r).zip(quality(base)).map(|(a, b)| ratio(a, b)),
            flops_ratio: ratio(
                r.totals.attention_flops as f64,
                base.totals.attention_flops as f64,
            ),
            bytes_ratio: ratio(
                r.totals.kv_bytes_moved as f64,
                base.totals.kv_bytes_moved as f64,
            ),
        })
        .collect();
    Ok(Comparison {
        baseline: labels[baseline_index(reports)].clone(),
        quality_metric: if base.perplexity.is_some() {
            "perplexity"
        } else if base.chain_score.is_some() {
            "chain_score"
        } else {
            "quality"
        }
        .to_string(),
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "policy,{q},attention_flops,kv_bytes_moved,overhead_flops,{q}_ratio,flops_ratio,bytes_ratio\n",
            q = self.quality_metric
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.label,
                opt(r.quality),
                r.attention_flops,
                r.kv_bytes_moved,
                r.overhead_flops,
                opt(r.quality_ratio),
                r.flops_ratio,
                r.bytes_ratio
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>12} {:>14} {:>14} {:>10} {:>10} {:>10}\n",
            "policy", self.quality_metric, "attn_flops", "kv_bytes", "q_ratio", "flops_r", "bytes_r"
        );
        for r in &self.rows {
            let q = r.quality.map_or("-".into(), |v| format!("{v:.4}"));
            let qr = r.quality_ratio.map_or("-".into(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{:<24} {:>12} {:>14} {:>14} {:>10} {:>10.4} {:>10.4}",
                r.label, q, r.attention_flops, r.kv_bytes_moved, qr, r.flops_ratio, r.bytes_ratio
            );
        }
        out
    }
}

/// Per-token NLL of every report divided by the baseline's, one row per
/// scored token.
pub fn nll_ratio_csv(reports: &[Report]) -> Result<String> {
    check_comparable(reports)?;
    let labels = labels(reports);
    let base = reports[baseline_index(reports)]
        .nll
        .as_ref()
        .ok_or_else(|| Error::config("NLL ratios need perplexity reports"))?;
    let series: Vec<&Vec<f64>> = reports
        .iter()
        .map(|r| {
            r.nll
                .as_ref()
                .ok_or_else(|| Error::config("NLL ratios need perplexity reports"))
        })
        .collect::<Result<_>>()?;
    let mut out = format!("token,{}\n", labels.join(","));
    for (i, b) in base.iter().enumerate() {
        let cells: Vec<String> = series
            .iter()
            .map(|s| ratio(s[i], *b).to_string())
            .collect();
        let _ = writeln!(out, "{i},{}", cells.join(","));
    }
    Ok(out)
}
