//! A scripted layer-0 attention that matches tokens by content shows that
//! the motif stream rewards attending one period back, which is what the
//! perplexity runs rely on.

use kvrefresh::metrics::{perplexity, reference_perplexity};
use kvrefresh::model::{Matrix, Model, ModelConfig};
use kvrefresh::policies::{PolicyConfig, PolicyKind};
use kvrefresh::scheduler::ScheduleConfig;
use kvrefresh::tasks::{synthetic_lm_stream, StreamStructure};

/// Head dimensions whose rotary frequency is low enough that a 64-token
/// offset barely rotates them.
const SLOW_DIMS: [usize; 6] = [5, 6, 7, 13, 14, 15];

fn copy_model(gain: f64) -> Model {
    let config = ModelConfig::canonical();
    let mut model = Model::new(config.clone()).unwrap();
    let d = config.model_dim();
    let hd = config.head_dim;
    // equal-norm content vectors, so a token matches itself best
    let embed = &mut model.weights_mut().embed;
    for t in 0..config.vocab_size {
        let row = &mut embed.data[t * d..t * d + SLOW_DIMS.len()];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = (SLOW_DIMS.len() as f64 / d as f64).sqrt();
        row.iter_mut().for_each(|x| *x *= target / norm);
    }
    let layer = &mut model.weights_mut().layers[0];
    let mut wq = Matrix::zeros(d, config.n_query_heads * hd);
    let mut wk = Matrix::zeros(d, config.n_kv_heads * hd);
    for (src, &dim) in SLOW_DIMS.iter().enumerate() {
        for h in 0..config.n_query_heads {
            wq.data[src * wq.cols + h * hd + dim] = gain;
        }
        for h in 0..config.n_kv_heads {
            wk.data[src * wk.cols + h * hd + dim] = gain;
        }
    }
    layer.wq = wq;
    layer.wk = wk;
    model
}

/// Mean layer-0 attention probability at offsets that are positive
/// multiples of `period`, relative to a uniform row.
fn periodic_lift(model: &Model, tokens: &[u32], period: usize) -> f64 {
    let rows = model.prefill(tokens, true).unwrap().last.attention_rows.unwrap();
    let last = tokens.len() - 1;
    let mut lift = 0.0;
    for row in &rows[0] {
        let hits: Vec<f64> = (period..=last)
            .step_by(period)
            .map(|off| row[last - off])
            .collect();
        lift += hits.iter().sum::<f64>() / hits.len() as f64 * row.len() as f64;
    }
    lift / rows[0].len() as f64
}

#[test]
fn content_matching_attention_looks_one_period_back() {
    let model = copy_model(4.0);
    let mut motif_lift = Vec::new();
    let mut uniform_lift = Vec::new();
    for seed in 0..8 {
        let motif = synthetic_lm_stream(321, 256, seed, StreamStructure::RepeatedMotif { period: 64 })
            .unwrap();
        let uniform = synthetic_lm_stream(321, 256, seed, StreamStructure::Uniform).unwrap();
        motif_lift.push(periodic_lift(&model, &motif, 64));
        uniform_lift.push(periodic_lift(&model, &uniform, 64));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&motif_lift) > 5.0, "{motif_lift:?}");
    assert!(mean(&motif_lift) > 5.0 * mean(&uniform_lift), "{uniform_lift:?}");
}

#[test]
fn scripted_model_perplexities_are_sane() {
    let model = copy_model(4.0);
    let s = synthetic_lm_stream(256, 256, 3, StreamStructure::RepeatedMotif { period: 64 }).unwrap();
    let v = perplexity(&model, &PolicyConfig::new(PolicyKind::Vanilla), &ScheduleConfig::default(), &s, 64)
        .unwrap();
    let r = reference_perplexity(&model, &s, 64).unwrap();
    assert!((v.perplexity - r).abs() <= 1e-9 * r);
    for kind in [PolicyKind::Streaming, PolicyKind::H2o, PolicyKind::Snapkv, PolicyKind::Refreshkv] {
        let p = perplexity(&model, &PolicyConfig::new(kind).with_k(24), &ScheduleConfig::fixed(8), &s, 64)
            .unwrap();
        assert!(p.perplexity >= 1.0 && p.perplexity.is_finite(), "{kind:?}");
        assert_eq!(p.nll.len(), 64);
    }
}
