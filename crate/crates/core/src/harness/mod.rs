//! Experiment runner: a [`RunConfig`] fully determines a run, which writes a
//! JSON-lines step trace and a JSON report.

mod compare;
mod overrides;
mod self_check;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{perplexity, CostTotals, StepTrace, COST_MODEL};
use crate::model::{greedy, Model, ModelConfig};
use crate::policies::{PolicyConfig, PolicyKind};
use crate::scheduler::{effective_strides, ScheduleConfig};
use crate::session::Session;
use crate::tasks::{
    decode_bytes, encode_bytes, evaluate_chain, generate_chain_instance, oracle_output,
    synthetic_lm_stream, ChainScore, StreamStructure,
};

pub use compare::{compare, nll_ratio_csv, Comparison, ComparisonRow};
pub use overrides::{apply_overrides, parse_run_config};
pub use self_check::{self_check, LadderCheck, SelfCheckReport};

/// Token stream layout for the synthetic tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Uniform,
    RepeatedMotif,
}

fn default_period() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Teacher-forced perplexity of the last `tail` tokens of a stream.
    Lm {
        length: usize,
        tail: usize,
        structure: Structure,
        #[serde(default = "default_period")]
        motif_period: usize,
    },
    /// Greedy generation of `n_generate` tokens after a synthetic prompt.
    Generate {
        prompt_len: usize,
        structure: Structure,
        #[serde(default = "default_period")]
        motif_period: usize,
    },
    /// Chain-of-key over a byte-tokenized prompt. With `oracle`, the gold
    /// chain is fed through the cache instead of greedy model output.
    Chainkey {
        n_keys: usize,
        #[serde(rename = "T")]
        t: usize,
        #[serde(rename = "W")]
        w: usize,
        #[serde(default)]
        oracle: bool,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Generate {
            prompt_len: 128,
            structure: Structure::RepeatedMotif,
            motif_period: default_period(),
        }
    }
}

fn stream_structure(s: Structure, period: usize) -> StreamStructure {
    match s {
        Structure::Uniform => StreamStructure::Uniform,
        Structure::RepeatedMotif => StreamStructure::RepeatedMotif { period },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub policy: PolicyConfig,
    pub schedule: ScheduleConfig,
    pub task: TaskConfig,
    pub n_generate: usize,
    /// Task seed; the model seed lives in `model`.
    pub seed: u64,
    /// Directory receiving `trace.jsonl` and `report.json`.
    pub output: Option<PathBuf>,
    /// Add a wall-clock column to the report. Off by default so that
    /// reports are reproducible byte for byte.
    pub record_wall_clock: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::canonical(),
            policy: PolicyConfig::default(),
            schedule: ScheduleConfig::default(),
            task: TaskConfig::default(),
            n_generate: 64,
            seed: 0,
            output: None,
            record_wall_clock: false,
        }
    }
}

impl RunConfig {
    /// Check everything that can be checked without running the model.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.policy.validate()?;
        self.schedule.validate()?;
        let (prompt_len, steps) = match &self.task {
            TaskConfig::Lm {
                length,
                tail,
                structure,
                motif_period,
            } => {
                if *tail == 0 || tail >= length {
                    return Err(Error::config(format!(
                        "task.tail must lie in [1, length), got tail {tail}, length {length}"
                    )));
                }
                check_period(*structure, *motif_period)?;
                (length - tail, tail - 1)
            }
            TaskConfig::Generate {
                prompt_len,
                structure,
                motif_period,
            } => {
                if *prompt_len == 0 {
                    return Err(Error::config("task.prompt_len must be positive"));
                }
                check_period(*structure, *motif_period)?;
                (*prompt_len, self.n_generate)
            }
            TaskConfig::Chainkey { .. } => {
                if self.model.vocab_size < 256 {
                    return Err(Error::config(
                        "chainkey prompts are byte tokens and need vocab_size >= 256",
                    ));
                }
                // the prompt length is only known once the instance exists
                (0, self.n_generate)
            }
        };
        if prompt_len > 0 {
            self.policy.resolve_k(prompt_len)?;
        }
        if prompt_len + steps > self.model.max_position {
            return Err(Error::config(format!(
                "{prompt_len} prompt tokens plus {steps} steps exceed max_position {}",
                self.model.max_position
            )));
        }
        Ok(())
    }
}

fn check_period(s: Structure, period: usize) -> Result<()> {
    if s == Structure::RepeatedMotif && period == 0 {
        return Err(Error::config("task.motif_period must be positive"));
    }
    Ok(())
}

/// Summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cost_model: String,
    pub config: RunConfig,
    pub policy: PolicyKind,
    pub task_seed: u64,
    pub prompt_len: usize,
    /// Resolved cache budget, for policies that have one.
    pub budget: Option<usize>,
    pub totals: CostTotals,
    pub effective_strides: Vec<Option<f64>>,
    pub mean_effective_stride: Option<f64>,
    pub perplexity: Option<f64>,
    /// Per-token negative log-likelihood over the scored tail.
    pub nll: Option<Vec<f64>>,
    pub chain_score: Option<ChainScore>,
    pub output_text: Option<String>,
    /// Tokens fed at each decode step.
    pub tokens: Vec<u32>,
    pub wall_clock_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub trace: Vec<StepTrace>,
}

/// The prompt a task decodes from, and for chainkey the instance.
pub fn task_prompt(config: &RunConfig) -> Result<Vec<u32>> {
    let vocab = config.model.vocab_size;
    match &config.task {
        TaskConfig::Lm {
            length,
            tail,
            structure,
            motif_period,
        } => {
            let s = synthetic_lm_stream(
                *length,
                vocab,
                config.seed,
                stream_structure(*structure, *motif_period),
            )?;
            Ok(s[..length - tail].to_vec())
        }
        TaskConfig::Generate {
            prompt_len,
            structure,
            motif_period,
        } => synthetic_lm_stream(
            *prompt_len,
            vocab,
            config.seed,
            stream_structure(*structure, *motif_period),
        ),
        TaskConfig::Chainkey { n_keys, t, w, .. } => Ok(encode_bytes(
            &generate_chain_instance(*n_keys, *w, *t, config.seed)?.prompt,
        )),
    }
}

/// Greedy decoding that keeps every step's logits.
pub struct GreedyRun {
    pub tokens: Vec<u32>,
    /// Prefill logits first, then one entry per step.
    pub logits: Vec<Vec<f64>>,
    pub trace: Vec<StepTrace>,
}

pub fn greedy_run(
    model: &Model,
    policy: &PolicyConfig,
    schedule: &ScheduleConfig,
    prompt: &[u32],
    steps: usize,
) -> Result<GreedyRun> {
    let (mut session, first) = Session::start(model, policy, schedule, prompt)?;
    let mut logits = vec![first];
    let mut tokens = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = greedy(logits.last().expect("non-empty"));
        tokens.push(t);
        logits.push(session.step(t)?);
    }
    Ok(GreedyRun {
        tokens,
        logits,
        trace: session.into_trace(),
    })
}

pub fn run(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let started = Instant::now();
    let model = Model::new(config.model.clone())?;
    let mut ppl = None;
    let mut nll = None;
    let mut chain_score = None;
    let mut output_text = None;

    let (prompt_len, trace, tokens) = match &config.task {
        TaskConfig::Lm {
            length,
            tail,
            structure,
            motif_period,
        } => {
            let stream = synthetic_lm_stream(
                *length,
                config.model.vocab_size,
                config.seed,
                stream_structure(*structure, *motif_period),
            )?;
            let r = perplexity(&model, &config.policy, &config.schedule, &stream, *tail)?;
            ppl = Some(r.perplexity);
            nll = Some(r.nll);
            let tokens = r.trace.iter().map(|t| t.token).collect();
            (length - tail, r.trace, tokens)
        }
        TaskConfig::Generate { .. } => {
            let prompt = task_prompt(config)?;
            let r = greedy_run(
                &model,
                &config.policy,
                &config.schedule,
                &prompt,
                config.n_generate,
            )?;
            (prompt.len(), r.trace, r.tokens)
        }
        TaskConfig::Chainkey { n_keys, t, w, oracle } => {
            let instance = generate_chain_instance(*n_keys, *w, *t, config.seed)?;
            let prompt = encode_bytes(&instance.prompt);
            let (trace, tokens, text) = if *oracle {
                let text = format!(" {}", oracle_output(&instance)?);
                let fed = encode_bytes(&text);
                if prompt.len() + fed.len() > config.model.max_position {
                    return Err(Error::config("chainkey oracle output exceeds max_position"));
                }
                let (mut session, _) =
                    Session::start(&model, &config.policy, &config.schedule, &prompt)?;
                for &tok in &fed {
                    session.step(tok)?;
                }
                (session.into_trace(), fed, text)
            } else {
                if prompt.len() + config.n_generate > config.model.max_position {
                    return Err(Error::config("chainkey prompt plus n_generate exceeds max_position"));
                }
                let r = greedy_run(
                    &model,
                    &config.policy,
                    &config.schedule,
                    &prompt,
                    config.n_generate,
                )?;
                // the first fed token is the model's first output token
                let text = decode_bytes(&r.tokens);
                (r.trace, r.tokens, text)
            };
            chain_score = Some(evaluate_chain(&instance, &text));
            output_text = Some(text);
            (prompt.len(), trace, tokens)
        }
    };

    let (strides, mean) = effective_strides(&trace, config.model.n_layers);
    let budget = match config.policy.kind {
        PolicyKind::Vanilla => None,
        _ => Some(config.policy.resolve_k(prompt_len)?),
    };
    let report = Report {
        cost_model: COST_MODEL.to_string(),
        config: config.clone(),
        policy: config.policy.kind,
        task_seed: config.seed,
        prompt_len,
        budget,
        totals: CostTotals::from_trace(&trace),
        effective_strides: strides,
        mean_effective_stride: mean,
        perplexity: ppl,
        nll,
        chain_score,
        output_text,
        tokens,
        wall_clock_ms: config
            .record_wall_clock
            .then(|| started.elapsed().as_secs_f64() * 1e3),
    };
    Ok(RunOutput { report, trace })
}

pub fn trace_jsonl(trace: &[StepTrace]) -> Result<String> {
    let mut out = String::new();
    for t in trace {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

/// Write `trace.jsonl` and `report.json` into `dir`.
pub fn write_outputs(dir: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trace.jsonl"), trace_jsonl(&output.trace)?)?;
    let mut f = fs::File::create(dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut f, &output.report)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
