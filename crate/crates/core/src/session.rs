//! A decode session: one prompt, one cache policy, a stream of steps.

use crate::error::{Error, Result};
use crate::metrics::{layer_attention_cost, StepTrace};
use crate::model::{greedy, Model};
use crate::policies::{build_policy, CachePolicy, LayerMode, PolicyConfig};
use crate::scheduler::ScheduleConfig;

pub struct Session<'a> {
    model: &'a Model,
    policy: Box<dyn CachePolicy>,
    prompt_len: usize,
    step_index: usize,
    trace: Vec<StepTrace>,
}

impl<'a> Session<'a> {
    /// Prefill `prompt` and return the session with the logits predicting
    /// the first generated token.
    pub fn start(
        model: &'a Model,
        policy: &PolicyConfig,
        schedule: &ScheduleConfig,
        prompt: &[u32],
    ) -> Result<(Self, Vec<f64>)> {
        if prompt.is_empty() {
            return Err(Error::config("prompt must not be empty"));
        }
        let mut policy = build_policy(policy, schedule)?;
        let prefill = model.prefill(prompt, true)?;
        let logits = prefill.last.logits.clone();
        policy.prefill(model.config(), prefill)?;
        Ok((
            Self {
                model,
                policy,
                prompt_len: prompt.len(),
                step_index: 0,
                trace: Vec::new(),
            },
            logits,
        ))
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Number of decode steps taken so far.
    pub fn steps(&self) -> usize {
        self.step_index
    }

    pub fn policy(&self) -> &dyn CachePolicy {
        self.policy.as_ref()
    }

    pub fn trace(&self) -> &[StepTrace] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<StepTrace> {
        self.trace
    }

    /// Feed `token` at the next position and return the next-token logits.
    pub fn step(&mut self, token: u32) -> Result<Vec<f64>> {
        let step = self.step_index + 1;
        let at = |e: Error| match e {
            Error::Contract(_) => Error::AtStep {
                step,
                source: Box::new(e),
            },
            e => e,
        };
        let position = self.prompt_len + self.step_index;
        self.policy.begin_step(step);
        let logits = self
            .model
            .decode(token, position, self.policy.as_mut())
            .map_err(at)?;
        let record = self.record(step, token).map_err(at)?;
        self.trace.push(record);
        self.step_index = step;
        Ok(logits)
    }

    /// Greedy generation for `n` steps; returns the tokens fed at each step.
    pub fn generate_greedy(&mut self, first_logits: &[f64], n: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(n);
        let mut logits = first_logits.to_vec();
        for _ in 0..n {
            let t = greedy(&logits);
            out.push(t);
            logits = self.step(t)?;
        }
        Ok(out)
    }

    fn record(&mut self, step: usize, token: u32) -> Result<StepTrace> {
        let c = self.model.config();
        let layers = self.policy.take_layer_steps();
        if layers.len() != c.n_layers {
            return Err(Error::contract(format!(
                "policy reported {} layers, model has {}",
                layers.len(),
                c.n_layers
            )));
        }
        let mut trace = StepTrace {
            step_index: step,
            token,
            modes: Vec::with_capacity(c.n_layers),
            attended: Vec::with_capacity(c.n_layers),
            attention_flops: 0,
            kv_bytes_moved: 0,
            overhead_flops: 0,
            similarity: Vec::with_capacity(c.n_layers),
            refresh: Vec::with_capacity(c.n_layers),
            retained_mass: None,
            attended_positions: Vec::with_capacity(c.n_layers),
        };
        let current = self.prompt_len + step - 1;
        for (layer, s) in layers.into_iter().enumerate() {
            let n = s.attended.first().map_or(0, Vec::len);
            if s.attended.len() != c.n_kv_heads || s.attended.iter().any(|h| h.len() != n) {
                return Err(Error::contract(format!(
                    "layer {layer} attended sets differ in size across kv-heads"
                )));
            }
            if s.attended.iter().any(|h| !h.contains(&current)) {
                return Err(Error::contract(format!(
                    "layer {layer} did not attend to the current token"
                )));
            }
            if s.mode == LayerMode::Full && n > self.prompt_len + step {
                return Err(Error::contract(format!("layer {layer} attended past the stream")));
            }
            let cost = layer_attention_cost(n, c);
            trace.attention_flops += cost.flops;
            trace.kv_bytes_moved += cost.bytes;
            trace.overhead_flops += s.overhead_flops;
            trace.modes.push(s.mode);
            trace.attended.push(n);
            trace.similarity.push(s.similarity);
            trace.refresh.push(s.refresh);
            trace.attended_positions.push(s.attended);
        }
        let after: Vec<f64> = trace.refresh.iter().flatten().map(|r| r.after).collect();
        if !after.is_empty() {
            trace.retained_mass = Some(after.iter().sum::<f64>() / after.len() as f64);
        }
        Ok(trace)
    }
}
