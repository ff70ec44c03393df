//! A small decoder-only transformer: pre-norm blocks with grouped-query
//! attention, rotary position encoding and a gated feed-forward layer.
//!
//! Weights come from a seeded Gaussian draw, so a [`ModelConfig`] fully
//! determines the model. Two forward paths exist:
//!
//! * [`Model::prefill`] processes a whole prompt with causal attention and
//!   returns the per-layer key/value cache.
//! * [`Model::decode`] processes one token and delegates attention for every
//!   layer to an [`AttentionProvider`], which owns the caches and decides
//!   which entries the token attends to. Cache policies plug in here.

mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_store::{FullCache, KvEntry};
use crate::numerics::{dot, softmax_finite};

pub use io::{read_weights, write_weights, TensorInfo, WeightsHeader};

const ROPE_BASE: f64 = 10_000.0;
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    /// Feed-forward hidden width as a multiple of the model width.
    pub ffn_mult: f64,
    pub vocab_size: usize,
    pub max_position: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

impl ModelConfig {
    /// The reference configuration used throughout the tests.
    pub fn canonical() -> Self {
        Self {
            n_layers: 2,
            n_query_heads: 4,
            n_kv_heads: 2,
            head_dim: 16,
            ffn_mult: 2.0,
            vocab_size: 256,
            max_position: 4096,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_query_heads", self.n_query_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_position", self.max_position),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if !self.n_query_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::config(format!(
                "n_kv_heads ({}) must divide n_query_heads ({})",
                self.n_kv_heads, self.n_query_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::config("head_dim must be even for rotary encoding"));
        }
        if !(self.ffn_mult.is_finite() && self.ffn_mult > 0.0) {
            return Err(Error::config("ffn_mult must be a positive real"));
        }
        // keep tensor sizes addressable and the hidden width non-zero
        let dim = self
            .n_query_heads
            .checked_mul(self.head_dim)
            .filter(|d| *d <= 1 << 16)
            .ok_or_else(|| Error::config("model width too large"))?;
        if self.vocab_size > 1 << 20 || self.n_layers > 1 << 10 {
            return Err(Error::config("model too large"));
        }
        let hidden = self.ffn_mult * dim as f64;
        if !(1.0..=f64::from(1u32 << 20)).contains(&hidden.round()) {
            return Err(Error::config("ffn hidden width out of range"));
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        self.n_query_heads * self.head_dim
    }

    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.ffn_mult * self.model_dim() as f64).round() as usize
    }

    /// Kv-head serving the given query head.
    pub fn kv_head_of(&self, query_head: usize) -> usize {
        query_head / self.group_size()
    }
}

/// Row-major matrix used as `y = x · W` with `W` of shape `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x · W`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xv * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub lm_head: Matrix,
}

/// Seeded Gaussian initialisation scaled by `1/sqrt(model_dim)`; norm gains
/// start at one.
pub fn init_model(config: &ModelConfig) -> Result<ModelWeights> {
    config.validate()?;
    let d = config.model_dim();
    let q = config.n_query_heads * config.head_dim;
    let kv = config.n_kv_heads * config.head_dim;
    let h = config.ffn_hidden();
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let embed = Matrix::gaussian(config.vocab_size, d, scale, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![1.0; d],
            wq: Matrix::gaussian(d, q, scale, &mut rng),
            wk: Matrix::gaussian(d, kv, scale, &mut rng),
            wv: Matrix::gaussian(d, kv, scale, &mut rng),
            wo: Matrix::gaussian(q, d, scale, &mut rng),
            ffn_norm: vec![1.0; d],
            w_gate: Matrix::gaussian(d, h, scale, &mut rng),
            w_up: Matrix::gaussian(d, h, scale, &mut rng),
            w_down: Matrix::gaussian(h, d, scale, &mut rng),
        })
        .collect();
    let lm_head = Matrix::gaussian(d, config.vocab_size, scale, &mut rng);
    Ok(ModelWeights {
        embed,
        layers,
        final_norm: vec![1.0; d],
        lm_head,
    })
}

/// What one layer hands to the attention provider for the current token.
#[derive(Debug, Clone)]
pub struct LayerProjection {
    pub position: usize,
    /// Rotated query per query head.
    pub queries: Vec<Vec<f64>>,
    /// Pre-rotation query averaged over every query head of the layer.
    pub mean_query: Vec<f64>,
    /// The token's own rotated key and value, one entry per kv-head.
    pub entries: Vec<KvEntry>,
}

/// Result of attending one token's queries over a cache view.
#[derive(Debug, Clone)]
pub struct Attention {
    /// Mixed value vector per query head.
    pub outputs: Vec<Vec<f64>>,
    /// Probability row per query head, aligned with the view of its kv-head.
    pub rows: Option<Vec<Vec<f64>>>,
}

/// Supplies attention for each layer of a single-token forward pass.
pub trait AttentionProvider {
    fn attend_layer(
        &mut self,
        model: &Model,
        layer: usize,
        projection: LayerProjection,
    ) -> Result<Vec<Vec<f64>>>;
}

/// Output of a single decode step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// Averaged pre-rotation query per layer.
    pub per_layer_queries: Vec<Vec<f64>>,
    /// Per layer, per query head: the probability row over the attended
    /// entries of that head's kv-group. Present when observation was asked for.
    pub attention_rows: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub caches: Vec<FullCache>,
    pub last: StepOutput,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let weights = init_model(&config)?;
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        io::check_shapes(&config, &weights)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::contract(format!(
                "token {token} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_position(&self, position: usize) -> Result<()> {
        if position >= self.config.max_position {
            return Err(Error::contract(format!(
                "position {position} exceeds max_position {}",
                self.config.max_position
            )));
        }
        Ok(())
    }

    fn project(&self, layer: usize, x: &[f64], position: usize) -> LayerProjection {
        let c = &self.config;
        let w = &self.weights.layers[layer];
        let normed = rms_norm(x, &w.attn_norm);
        let q = w.wq.apply(&normed);
        let k = w.wk.apply(&normed);
        let v = w.wv.apply(&normed);
        let hd = c.head_dim;

        let mut mean_query = vec![0.0; hd];
        for head in q.chunks(hd) {
            for (m, x) in mean_query.iter_mut().zip(head) {
                *m += x;
            }
        }
        for m in &mut mean_query {
            *m /= c.n_query_heads as f64;
        }

        let queries = q.chunks(hd).map(|h| rope(h, position)).collect();
        let entries = k
            .chunks(hd)
            .zip(v.chunks(hd))
            .map(|(kh, vh)| KvEntry {
                position,
                key: rope(kh, position),
                value: vh.to_vec(),
            })
            .collect();
        LayerProjection {
            position,
            queries,
            mean_query,
            entries,
        }
    }

    /// Attend each query head over the entries of its kv-head's view.
    pub fn attend(
        &self,
        queries: &[Vec<f64>],
        view: &[Vec<&KvEntry>],
        observe: bool,
    ) -> Result<Attention> {
        let c = &self.config;
        if view.len() != c.n_kv_heads {
            return Err(Error::contract("attention view must cover every kv-head"));
        }
        let scale = 1.0 / (c.head_dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(queries.len());
        let mut rows = observe.then(|| Vec::with_capacity(queries.len()));
        for (h, q) in queries.iter().enumerate() {
            let entries = &view[c.kv_head_of(h)];
            if entries.is_empty() {
                return Err(Error::contract("attention over an empty cache view"));
            }
            let logits: Vec<f64> = entries.iter().map(|e| dot(q, &e.key) * scale).collect();
            let probs = softmax_finite(&logits);
            let mut out = vec![0.0; c.head_dim];
            for (p, e) in probs.iter().zip(entries) {
                for (o, v) in out.iter_mut().zip(&e.value) {
                    *o += p * v;
                }
            }
            outputs.push(out);
            if let Some(r) = rows.as_mut() {
                r.push(probs);
            }
        }
        Ok(Attention { outputs, rows })
    }

    fn finish_block(&self, layer: usize, x: &mut [f64], heads: &[Vec<f64>]) {
        let w = &self.weights.layers[layer];
        let concat: Vec<f64> = heads.iter().flatten().copied().collect();
        let attn = w.wo.apply(&concat);
        for (xi, a) in x.iter_mut().zip(&attn) {
            *xi += a;
        }
        let normed = rms_norm(x, &w.ffn_norm);
        let gate = w.w_gate.apply(&normed);
        let up = w.w_up.apply(&normed);
        let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let down = w.w_down.apply(&act);
        for (xi, d) in x.iter_mut().zip(&down) {
            *xi += d;
        }
    }

    fn head(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .lm_head
            .apply(&rms_norm(x, &self.weights.final_norm))
    }

    /// One-token forward pass; attention is delegated to `provider`.
    pub fn decode<P: AttentionProvider + ?Sized>(
        &self,
        token: u32,
        position: usize,
        provider: &mut P,
    ) -> Result<Vec<f64>> {
        self.check_token(token)?;
        self.check_position(position)?;
        let mut x = self.weights.embed.row(token as usize).to_vec();
        for layer in 0..self.config.n_layers {
            let projection = self.project(layer, &x, position);
            let heads = provider.attend_layer(self, layer, projection)?;
            if heads.len() != self.config.n_query_heads {
                return Err(Error::contract("provider returned wrong head count"));
            }
            self.finish_block(layer, &mut x, &heads);
        }
        Ok(self.head(&x))
    }

    /// Decode one token over explicit per-layer cache views.
    ///
    /// `views[layer][kv_head]` lists the cached entries (with their original
    /// positions) the token may attend to; its own key/value is appended.
    pub fn decode_step(
        &self,
        token: u32,
        position: usize,
        views: &[Vec<Vec<KvEntry>>],
        observe: bool,
    ) -> Result<StepOutput> {
        if views.len() != self.config.n_layers {
            return Err(Error::contract("one cache view per layer is required"));
        }
        for (layer, heads) in views.iter().enumerate() {
            if heads.len() != self.config.n_kv_heads {
                return Err(Error::contract(format!(
                    "layer {layer} view must cover every kv-head"
                )));
            }
            for e in heads.iter().flatten() {
                if e.position >= position {
                    return Err(Error::contract(format!(
                        "cached position {} not before decode position {position}",
                        e.position
                    )));
                }
            }
        }
        let mut provider = StaticViews {
            views,
            observe,
            queries: Vec::new(),
            rows: Vec::new(),
        };
        let logits = self.decode(token, position, &mut provider)?;
        Ok(StepOutput {
            logits,
            per_layer_queries: provider.queries,
            attention_rows: observe.then_some(provider.rows),
        })
    }

    /// Causal forward pass over a whole prompt, returning the cache of every
    /// layer and the last position's output.
    pub fn prefill(&self, tokens: &[u32], observe: bool) -> Result<PrefillOutput> {
        let (caches, mut logits, last_queries, last_rows) = self.forward_batch(tokens, true)?;
        let last = StepOutput {
            logits: logits.pop().unwrap_or_default(),
            per_layer_queries: last_queries,
            attention_rows: observe.then_some(last_rows),
        };
        Ok(PrefillOutput { caches, last })
    }

    /// Teacher-forced logits for every position of `tokens`.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_batch(tokens, false)?.1)
    }

    #[allow(clippy::type_complexity)]
    fn forward_batch(
        &self,
        tokens: &[u32],
        keep_last: bool,
    ) -> Result<(Vec<FullCache>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::contract("prompt must contain at least one token"));
        }
        if tokens.len() > c.max_position {
            return Err(Error::contract(format!(
                "prompt of {} tokens exceeds max_position {}",
                tokens.len(),
                c.max_position
            )));
        }
        for &t in tokens {
            self.check_token(t)?;
        }
        let n = tokens.len();
        let scale = 1.0 / (c.head_dim as f64).sqrt();
        let mut xs: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.weights.embed.row(t as usize).to_vec())
            .collect();
        let mut caches = Vec::with_capacity(c.n_layers);
        let mut last_queries = Vec::new();
        let mut last_rows = Vec::new();
        for layer in 0..c.n_layers {
            let projections: Vec<LayerProjection> = xs
                .iter()
                .enumerate()
                .map(|(pos, x)| self.project(layer, x, pos))
                .collect();
            for (i, x) in xs.iter_mut().enumerate() {
                let q = &projections[i].queries;
                let mut heads = Vec::with_capacity(c.n_query_heads);
                for (h, qh) in q.iter().enumerate() {
                    let g = c.kv_head_of(h);
                    let logits: Vec<f64> = projections[..=i]
                        .iter()
                        .map(|p| dot(qh, &p.entries[g].key) * scale)
                        .collect();
                    let probs = softmax_finite(&logits);
                    let mut out = vec![0.0; c.head_dim];
                    for (p, proj) in probs.iter().zip(&projections[..=i]) {
                        for (o, v) in out.iter_mut().zip(&proj.entries[g].value) {
                            *o += p * v;
                        }
                    }
                    heads.push(out);
                    if keep_last && i == n - 1 {
                        last_rows.push(probs);
                    }
                }
                self.finish_block(layer, x, &heads);
            }
            if keep_last {
                last_queries.push(projections[n - 1].mean_query.clone());
            }
            let mut cache = FullCache::new(c.n_kv_heads);
            for p in projections {
                cache.push_token(p.entries)?;
            }
            caches.push(cache);
        }
        // regroup rows as [layer][query head]
        let rows = last_rows
            .chunks(c.n_query_heads)
            .map(<[Vec<f64>]>::to_vec)
            .collect();
        let logits = xs.iter().map(|x| self.head(x)).collect();
        Ok((caches, logits, last_queries, rows))
    }
}

struct StaticViews<'a> {
    views: &'a [Vec<Vec<KvEntry>>],
    observe: bool,
    queries: Vec<Vec<f64>>,
    rows: Vec<Vec<Vec<f64>>>,
}

impl AttentionProvider for StaticViews<'_> {
    fn attend_layer(
        &mut self,
        model: &Model,
        layer: usize,
        projection: LayerProjection,
    ) -> Result<Vec<Vec<f64>>> {
        let view: Vec<Vec<&KvEntry>> = self.views[layer]
            .iter()
            .zip(&projection.entries)
            .map(|(cached, own)| cached.iter().chain(std::iter::once(own)).collect())
            .collect();
        let att = model.attend(&projection.queries, &view, self.observe)?;
        self.queries.push(projection.mean_query);
        if let Some(rows) = att.rows {
            self.rows.push(rows);
        }
        Ok(att.outputs)
    }
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotate-half rotary encoding at an absolute position.
fn rope(x: &[f64], position: usize) -> Vec<f64> {
    let half = x.len() / 2;
    let mut out = vec![0.0; x.len()];
    for i in 0..half {
        let freq = ROPE_BASE.powf(-2.0 * i as f64 / x.len() as f64);
        let (sin, cos) = (position as f64 * freq).sin_cos();
        out[i] = x[i] * cos - x[i + half] * sin;
        out[i + half] = x[i + half] * cos + x[i] * sin;
    }
    out
}

/// Greedy choice: highest logit, lowest token id on ties.
pub fn greedy(logits: &[f64]) -> u32 {
    crate::numerics::argmax(logits) as u32
}
