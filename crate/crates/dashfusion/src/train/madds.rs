//! Fusion-stage compute cost: analytic multiply-accumulate counts per
//! fusion variant, checked exactly against an instrumented forward pass.
//!
//! Convention: a matmul `(a x b)(b x c)` costs `a * b * c` MAdds; softmax,
//! layer norms, residual adds, pooling, and slicing cost zero. The counted
//! scope is the prediction path between the encoder outputs and the head
//! input.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{
    bottleneck_count, ForwardMode, FusionVariant, Model, ModelConfig,
};
use crate::synth::{generate_sample, sample_rng, SynthConfig};
use crate::tensor::Tape;

#[derive(Clone, Debug, Serialize)]
pub struct MAddsReport {
    pub variant: FusionVariant,
    /// Analytic count over the fusion stage for one video.
    pub analytic: u64,
    /// Count observed by the instrumented forward pass.
    pub instrumented: u64,
}

/// Multi-head cross-attention cost for `t_q` query tokens over `t_s`
/// source tokens at width `d` (head count cancels when it divides `d`).
fn mhca(t_q: u64, t_s: u64, d: u64) -> u64 {
    // Q and output projection on the query side, K and V on the source
    // side, plus scores and the attention-weighted sum per head.
    2 * d * d * (t_q + t_s) + 2 * t_q * t_s * d
}

/// Two-linear FFN cost at hidden width `h`.
fn ffn_cost(t: u64, d: u64, h: u64) -> u64 {
    2 * t * d * h
}

/// Full transformer layer (self-attention + 4x-wide FFN).
fn transformer_cost(t: u64, d: u64) -> u64 {
    mhca(t, t, d) + ffn_cost(t, d, 4 * d)
}

fn fuse_layer_cost(cfg: &ModelConfig, k: u64, h_prev_len: u64) -> u64 {
    let d = cfg.d as u64;
    let t_m = [
        cfg.seq_lens.text as u64,
        cfg.seq_lens.audio as u64,
        cfg.seq_lens.vision as u64,
    ];
    let mut total = transformer_cost(h_prev_len, d); // bottleneck seeding
    for t in t_m {
        total += mhca(k, t, d); // multi-CA, bottleneck as query
    }
    total += ffn_cost(k, d, d); // multimodal FFN
    for t in t_m {
        total += mhca(t, k, d); // per-modality update onto the bottleneck
        total += ffn_cost(t, d, d);
    }
    total
}

/// Analytic fusion-stage MAdds for one sample under `variant` (temporal
/// alignment active where the variant consumes it).
pub fn count_madds(variant: FusionVariant, cfg: &ModelConfig) -> Result<u64> {
    cfg.validate()?;
    let d = cfg.d as u64;
    let (t_t, t_a, t_v) = (
        cfg.seq_lens.text as u64,
        cfg.seq_lens.audio as u64,
        cfg.seq_lens.vision as u64,
    );
    let temporal = mhca(t_t, t_a, d) + mhca(t_t, t_v, d);
    let total = match variant {
        FusionVariant::Concat => 0,
        FusionVariant::Ca => temporal,
        FusionVariant::ConcatSa => {
            cfg.fusion_layers as u64 * transformer_cost(t_t + t_a + t_v, d)
        }
        FusionVariant::Hbf => {
            let mut sum = temporal;
            let mut h_len = t_t;
            for l in 1..=cfg.fusion_layers {
                let k = bottleneck_count(cfg.bottleneck_tokens, l)? as u64;
                sum += fuse_layer_cost(cfg, k, h_len);
                h_len = k;
            }
            sum
        }
        FusionVariant::Bf => {
            let mut sum = temporal;
            let mut h_len = t_t;
            let k = cfg.bottleneck_tokens as u64;
            for _ in 1..=cfg.fusion_layers {
                sum += fuse_layer_cost(cfg, k, h_len);
                h_len = k;
            }
            sum
        }
    };
    Ok(total)
}

/// Run one synthetic sample through the real forward pass and read the
/// tape's matmul counter over the fusion stage.
pub fn instrumented_madds(variant: FusionVariant, cfg: &ModelConfig, seed: u64) -> Result<u64> {
    let mode = ForwardMode {
        variant,
        ..ForwardMode::default()
    };
    let model = Model::new(cfg.clone(), mode)?;
    let params = model.init_params(seed)?;

    let synth = SynthConfig {
        seq_lens: cfg.seq_lens,
        dims: cfg.raw_dims,
        vocab_size: cfg.vocab_size,
        ..SynthConfig::default()
    };
    let mut rng = sample_rng(seed, 0);
    let y = rng.random::<f64>() * 2.0 * synth.label_scale - synth.label_scale;
    let sample = generate_sample(y, &synth, &mut rng)?;

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, &params)?;
    let audio = crate::tensor::Tensor::from_vec(
        vec![cfg.seq_lens.audio, cfg.raw_dims.audio],
        sample.audio.iter().map(|&v| v as f64).collect(),
    )?;
    let vision = crate::tensor::Tensor::from_vec(
        vec![cfg.seq_lens.vision, cfg.raw_dims.vision],
        sample.vision.iter().map(|&v| v as f64).collect(),
    )?;
    let fwd = model.forward_sample(&mut tape, &vars, &sample.text, &audio, &vision, false)?;
    Ok(fwd.fusion_madds)
}

/// Analytic count paired with the instrumented verification.
pub fn madds_report(variant: FusionVariant, cfg: &ModelConfig) -> Result<MAddsReport> {
    Ok(MAddsReport {
        variant,
        analytic: count_madds(variant, cfg)?,
        instrumented: instrumented_madds(variant, cfg, 0)?,
    })
}

/// Median wall-clock milliseconds of one forward pass: 5 warmups, then the
/// median of 30 timed runs.
pub fn wallclock_forward_ms(variant: FusionVariant, cfg: &ModelConfig) -> Result<f64> {
    let mode = ForwardMode {
        variant,
        ..ForwardMode::default()
    };
    let model = Model::new(cfg.clone(), mode)?;
    let params = model.init_params(0)?;
    let synth = SynthConfig {
        seq_lens: cfg.seq_lens,
        dims: cfg.raw_dims,
        vocab_size: cfg.vocab_size,
        ..SynthConfig::default()
    };
    let mut rng = sample_rng(0, 0);
    let y = rng.random::<f64>() * 2.0 * synth.label_scale - synth.label_scale;
    let sample = generate_sample(y, &synth, &mut rng)?;
    let audio = crate::tensor::Tensor::from_vec(
        vec![cfg.seq_lens.audio, cfg.raw_dims.audio],
        sample.audio.iter().map(|&v| v as f64).collect(),
    )?;
    let vision = crate::tensor::Tensor::from_vec(
        vec![cfg.seq_lens.vision, cfg.raw_dims.vision],
        sample.vision.iter().map(|&v| v as f64).collect(),
    )?;

    let run = || -> Result<f64> {
        let start = std::time::Instant::now();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, &params)?;
        model.forward_sample(&mut tape, &vars, &sample.text, &audio, &vision, false)?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..5 {
        run()?;
    }
    let mut times = Vec::with_capacity(30);
    for _ in 0..30 {
        times.push(run()?);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[times.len() / 2])
}

pub const ALL_VARIANTS: [FusionVariant; 5] = [
    FusionVariant::Concat,
    FusionVariant::ConcatSa,
    FusionVariant::Ca,
    FusionVariant::Bf,
    FusionVariant::Hbf,
];
