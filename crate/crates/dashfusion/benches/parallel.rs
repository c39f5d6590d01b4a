//! Rayon vs sequential on the two data-parallel hot paths: sample
//! generation and read-only evaluation fan-out.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use dashfusion::model::{ForwardMode, Model, ModelConfig, RawDims, SeqLens};
use dashfusion::par;
use dashfusion::synth::{generate_sample, sample_rng, SynthConfig};
use dashfusion::tensor::ParamSet;

fn bench_generation(c: &mut Criterion) {
    let cfg = SynthConfig::default();
    let gen_one = |i: usize| {
        let mut rng = sample_rng(cfg.seed, i as u64);
        let y = rng.random::<f64>() * 2.0 * cfg.label_scale - cfg.label_scale;
        generate_sample(y, &cfg, &mut rng).unwrap()
    };

    let mut group = c.benchmark_group("dataset_generation");
    for n in [64usize, 256] {
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| par::map_indexed_seq(n, gen_one))
        });
        group.bench_with_input(BenchmarkId::new("rayon", n), &n, |b, &n| {
            b.iter(|| par::map_indexed_par(n, gen_one))
        });
    }
    group.finish();
}

fn bench_eval_fanout(c: &mut Criterion) {
    let synth = SynthConfig {
        n_samples: 64,
        ..SynthConfig::default()
    };
    let model_cfg = ModelConfig {
        d: 32,
        heads: 4,
        seq_lens: synth.seq_lens,
        raw_dims: synth.dims,
        vocab_size: synth.vocab_size,
        ..ModelConfig::default()
    };
    let model = Model::new(model_cfg, ForwardMode::default()).unwrap();
    let params: ParamSet = model.init_params(0).unwrap();
    let ds = dashfusion::synth::generate_dataset(&synth).unwrap();
    let split = &ds.train;

    let predict = |i: usize| {
        model
            .predict_one(
                &params,
                split.text_of(i, &synth),
                &split.audio_tensor(i, &synth),
                &split.vision_tensor(i, &synth),
            )
            .unwrap()
    };

    let mut group = c.benchmark_group("eval_fanout");
    group.sample_size(10);
    let n = split.n;
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_indexed_seq(n, predict))
    });
    group.bench_function("rayon", |b| b.iter(|| par::map_indexed_par(n, predict)));
    group.finish();
}

criterion_group!(benches, bench_generation, bench_eval_fanout);
criterion_main!(benches);
