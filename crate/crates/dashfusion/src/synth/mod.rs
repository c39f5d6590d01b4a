//! Synthetic multimodal dataset generator.
//!
//! Stands in for the real feature-extraction pipelines: every sample carries
//! a continuous sentiment label `y` and three modality streams whose
//! statistics shift monotonically with `y`. Payload values are `f32` (the
//! on-disk precision); all derivations run in `f64` first.
//!
//! Per-sample RNG streams are derived from `(seed, index)`, so generation is
//! order-independent and embarrassingly parallel with bitwise-stable output.

pub mod format;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModalityBatch, RawDims, SeqLens};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct NoiseLevels {
    /// Probability of replacing a drawn token with a uniform one.
    pub text: f64,
    pub audio: f64,
    pub vision: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModalityWeights {
    pub text: f64,
    pub audio: f64,
    pub vision: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seq_lens: SeqLens,
    pub dims: RawDims,
    pub vocab_size: usize,
    pub label_scale: f64,
    pub noise: NoiseLevels,
    /// Global strength of the label signal in every modality (0 erases it).
    pub informativeness: f64,
    /// Relative apportionment of the signal across modalities; sums to 1.
    pub weights: ModalityWeights,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seq_lens: SeqLens {
                text: 24,
                audio: 96,
                vision: 48,
            },
            dims: RawDims {
                audio: 20,
                vision: 35,
            },
            vocab_size: 256,
            label_scale: 3.0,
            noise: NoiseLevels {
                text: 0.1,
                audio: 0.5,
                vision: 0.5,
            },
            informativeness: 1.0,
            weights: ModalityWeights {
                text: 1.0 / 3.0,
                audio: 1.0 / 3.0,
                vision: 1.0 / 3.0,
            },
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0
            || self.vocab_size < 8
            || self.label_scale <= 0.0
            || self.seq_lens.text == 0
            || self.seq_lens.audio == 0
            || self.seq_lens.vision == 0
            || self.dims.audio == 0
            || self.dims.vision == 0
        {
            return Err(Error::Config("synth config: all sizes must be positive".into()));
        }
        let w = &self.weights;
        if w.text <= 0.0 || w.audio <= 0.0 || w.vision <= 0.0 {
            return Err(Error::Config("modality weights must be positive".into()));
        }
        if (w.text + w.audio + w.vision - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "modality weights must sum to 1, got {}",
                w.text + w.audio + w.vision
            )));
        }
        Ok(())
    }

    /// Signal strength for one modality: a modality at the default equal
    /// weight carries `informativeness`; heavier weights carry more.
    fn strength(&self, weight: f64) -> f64 {
        self.informativeness * 3.0 * weight
    }

    /// Designated signal dimensions: the first quarter (at least one).
    pub fn signal_dims(d: usize) -> usize {
        (d / 4).max(1)
    }
}

/// One generated sample; payload values at storage precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub text: Vec<u32>,
    /// Row-major `[T_a, d_a]`.
    pub audio: Vec<f32>,
    /// Row-major `[T_v, d_v]`.
    pub vision: Vec<f32>,
    pub label: f32,
}

/// RNG stream for sample `index` of dataset `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Smooth zero-sum base track: an odd-frequency sinusoid materialized by
/// half-period pairing `c[t + T/2] = -c[t]`, so the stored values cancel
/// exactly; any unpaired trailing slot (odd `T`) is zero.
fn smooth_track(rng: &mut ChaCha8Rng, t_len: usize, odd_freqs: &[u32]) -> Vec<f64> {
    let freq = odd_freqs[rng.random_range(0..odd_freqs.len())] as f64;
    let amp = 0.5 + 0.5 * rng.random::<f64>();
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let half = t_len / 2;
    let mut out = vec![0.0; t_len];
    for t in 0..half {
        let v = amp * (std::f64::consts::TAU * freq * t as f64 / t_len as f64 + phase).sin();
        out[t] = v;
        out[t + half] = -v;
    }
    out
}

fn continuous_stream(
    rng: &mut ChaCha8Rng,
    t_len: usize,
    d: usize,
    shift: f64,
    noise: f64,
    odd_freqs: &[u32],
) -> Vec<f32> {
    let n_sig = SynthConfig::signal_dims(d);
    let mut out = vec![0.0f32; t_len * d];
    for j in 0..d {
        let base = smooth_track(rng, t_len, odd_freqs);
        let dim_shift = if j < n_sig { shift } else { 0.0 };
        for t in 0..t_len {
            let eps: f64 = if noise > 0.0 {
                StandardNormal.sample(rng)
            } else {
                0.0
            };
            out[t * d + j] = (dim_shift + base[t] + noise * eps) as f32;
        }
    }
    out
}

/// Generate one sample for label `y`.
///
/// Text: positive-band token probability grows linearly with `y` while the
/// total sentiment-token rate stays at 1/2 (so `y = 0` matches the neutral
/// baseline). Audio/vision: smooth zero-mean tracks at modality-specific
/// temporal rates, with the signal dimensions mean-shifted by
/// `strength * y / label_scale`, plus Gaussian noise.
pub fn generate_sample(y: f64, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if y.abs() > cfg.label_scale {
        return Err(Error::Config(format!(
            "label {y} outside +-{}",
            cfg.label_scale
        )));
    }
    let s = y / cfg.label_scale;

    // token bands: negative [0, V/4), positive [V/4, V/2), neutral [V/2, V)
    let v = cfg.vocab_size;
    let band = v / 4;
    let s_text = (cfg.strength(cfg.weights.text) * s).clamp(-1.0, 1.0);
    let p_pos = (1.0 + s_text) / 4.0;
    let p_neg = (1.0 - s_text) / 4.0;
    let mut text = Vec::with_capacity(cfg.seq_lens.text);
    for _ in 0..cfg.seq_lens.text {
        let u: f64 = rng.random();
        let tok = if u < p_pos {
            band as u32 + rng.random_range(0..band as u32)
        } else if u < p_pos + p_neg {
            rng.random_range(0..band as u32)
        } else {
            (2 * band) as u32 + rng.random_range(0..(v - 2 * band) as u32)
        };
        let flip: f64 = rng.random();
        text.push(if flip < cfg.noise.text {
            rng.random_range(0..v as u32)
        } else {
            tok
        });
    }

    // different temporal rates per modality
    let audio = continuous_stream(
        rng,
        cfg.seq_lens.audio,
        cfg.dims.audio,
        cfg.strength(cfg.weights.audio) * s,
        cfg.noise.audio,
        &[3, 5, 7],
    );
    let vision = continuous_stream(
        rng,
        cfg.seq_lens.vision,
        cfg.dims.vision,
        cfg.strength(cfg.weights.vision) * s,
        cfg.noise.vision,
        &[1, 3],
    );

    Ok(Sample {
        text,
        audio,
        vision,
        label: y as f32,
    })
}

/// One dataset split, stored structure-of-arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub n: usize,
    pub text: Vec<u32>,
    pub audio: Vec<f32>,
    pub vision: Vec<f32>,
    pub labels: Vec<f32>,
}

impl Split {
    fn with_capacity(n: usize, cfg: &SynthConfig) -> Self {
        Self {
            n: 0,
            text: Vec::with_capacity(n * cfg.seq_lens.text),
            audio: Vec::with_capacity(n * cfg.seq_lens.audio * cfg.dims.audio),
            vision: Vec::with_capacity(n * cfg.seq_lens.vision * cfg.dims.vision),
            labels: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, s: &Sample) {
        self.n += 1;
        self.text.extend_from_slice(&s.text);
        self.audio.extend_from_slice(&s.audio);
        self.vision.extend_from_slice(&s.vision);
        self.labels.push(s.label);
    }

    pub fn text_of(&self, i: usize, cfg: &SynthConfig) -> &[u32] {
        let t = cfg.seq_lens.text;
        &self.text[i * t..(i + 1) * t]
    }

    pub fn label_of(&self, i: usize) -> f64 {
        self.labels[i] as f64
    }

    pub fn audio_tensor(&self, i: usize, cfg: &SynthConfig) -> Tensor {
        let (t, d) = (cfg.seq_lens.audio, cfg.dims.audio);
        let data = self.audio[i * t * d..(i + 1) * t * d]
            .iter()
            .map(|&v| v as f64)
            .collect();
        Tensor::from_vec(vec![t, d], data).expect("split layout")
    }

    pub fn vision_tensor(&self, i: usize, cfg: &SynthConfig) -> Tensor {
        let (t, d) = (cfg.seq_lens.vision, cfg.dims.vision);
        let data = self.vision[i * t * d..(i + 1) * t * d]
            .iter()
            .map(|&v| v as f64)
            .collect();
        Tensor::from_vec(vec![t, d], data).expect("split layout")
    }

    /// Assemble a model batch from split-local indices.
    pub fn batch(&self, indices: &[usize], cfg: &SynthConfig) -> ModalityBatch {
        ModalityBatch {
            text: indices
                .iter()
                .map(|&i| self.text_of(i, cfg).to_vec())
                .collect(),
            audio: indices.iter().map(|&i| self.audio_tensor(i, cfg)).collect(),
            vision: indices
                .iter()
                .map(|&i| self.vision_tensor(i, cfg))
                .collect(),
            labels: indices.iter().map(|&i| self.label_of(i)).collect(),
            indices: indices.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub train: Split,
    pub valid: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub fn key(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

pub const SPLITS: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// 60/20/20 split sizes with integer truncation; the test split absorbs the
/// remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 6 / 10;
    let valid = n * 2 / 10;
    (train, valid, n - train - valid)
}

/// Generate the full dataset: labels uniform in `[-scale, scale]`, one RNG
/// stream per index, split by a deterministic hash of `(seed, index)`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_samples;
    let samples: Vec<Result<Sample>> = par::map_indexed(n, |i| {
        let mut rng = sample_rng(cfg.seed, i as u64);
        let y = rng.random::<f64>() * 2.0 * cfg.label_scale - cfg.label_scale;
        generate_sample(y, cfg, &mut rng)
    });

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (splitmix64(cfg.seed ^ splitmix64(i as u64)), i));
    let (n_train, n_valid, n_test) = split_sizes(n);

    let mut train = Split::with_capacity(n_train, cfg);
    let mut valid = Split::with_capacity(n_valid, cfg);
    let mut test = Split::with_capacity(n_test, cfg);
    let samples: Vec<Sample> = samples.into_iter().collect::<Result<_>>()?;
    for (pos, &i) in order.iter().enumerate() {
        if pos < n_train {
            train.push(&samples[i]);
        } else if pos < n_train + n_valid {
            valid.push(&samples[i]);
        } else {
            test.push(&samples[i]);
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        train,
        valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            n_samples: 50,
            seq_lens: SeqLens {
                text: 8,
                audio: 16,
                vision: 10,
            },
            dims: RawDims {
                audio: 6,
                vision: 9,
            },
            vocab_size: 32,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_signal_mean_equals_label_ratio() {
        let mut cfg = tiny_cfg();
        cfg.noise = NoiseLevels {
            text: 0.0,
            audio: 0.0,
            vision: 0.0,
        };
        let y = 1.8;
        let mut rng = sample_rng(3, 0);
        let s = generate_sample(y, &cfg, &mut rng).unwrap();
        let (t, d) = (cfg.seq_lens.audio, cfg.dims.audio);
        let n_sig = SynthConfig::signal_dims(d);
        for j in 0..n_sig {
            let mean: f64 = (0..t).map(|r| s.audio[r * d + j] as f64).sum::<f64>() / t as f64;
            // the smooth track cancels pairwise; only f32 storage rounding remains
            assert!(
                (mean - y / cfg.label_scale).abs() < 1e-6,
                "dim {j}: mean {mean} vs {}",
                y / cfg.label_scale
            );
        }
        // nuisance dims are centered at zero
        let j = d - 1;
        let mean: f64 = (0..t).map(|r| s.audio[r * d + j] as f64).sum::<f64>() / t as f64;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn neutral_label_keeps_sentiment_token_rate_at_baseline() {
        let cfg = tiny_cfg();
        // sentiment tokens occupy the first half of the vocabulary and are
        // drawn with total probability 1/2 regardless of y.
        let mut count = 0usize;
        let mut total = 0usize;
        let mut pos = 0usize;
        for i in 0..400 {
            let mut rng = sample_rng(11, i);
            let s = generate_sample(0.0, &cfg, &mut rng).unwrap();
            for &tok in &s.text {
                total += 1;
                if (tok as usize) < cfg.vocab_size / 2 {
                    count += 1;
                    if tok as usize >= cfg.vocab_size / 4 {
                        pos += 1;
                    }
                }
            }
        }
        let rate = count as f64 / total as f64;
        assert!((rate - 0.5).abs() < 0.03, "sentiment-token rate {rate}");
        // symmetric vocabulary at y = 0: positive and negative bands equal
        let pos_share = pos as f64 / count as f64;
        assert!((pos_share - 0.5).abs() < 0.04, "positive share {pos_share}");
    }

    #[test]
    fn fixed_seed_is_bitwise_identical() {
        let cfg = tiny_cfg();
        let mut a = sample_rng(5, 7);
        let mut b = sample_rng(5, 7);
        let sa = generate_sample(-2.2, &cfg, &mut a).unwrap();
        let sb = generate_sample(-2.2, &cfg, &mut b).unwrap();
        assert_eq!(sa, sb);

        let d1 = generate_dataset(&cfg).unwrap();
        let d2 = generate_dataset(&cfg).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn split_sizes_are_exact() {
        assert_eq!(split_sizes(100), (60, 20, 20));
        assert_eq!(split_sizes(2000), (1200, 400, 400));
        // the benchmark-scale case
        assert_eq!(split_sizes(2281), (1368, 456, 457));
    }

    #[test]
    fn label_histogram_is_uniform_by_chi_square() {
        let cfg = SynthConfig {
            n_samples: 10_000,
            ..tiny_cfg()
        };
        let scale = cfg.label_scale;
        let mut bins = [0usize; 20];
        for i in 0..cfg.n_samples {
            let mut rng = sample_rng(cfg.seed, i as u64);
            let y = rng.random::<f64>() * 2.0 * scale - scale;
            let b = (((y + scale) / (2.0 * scale)) * 20.0).floor() as usize;
            bins[b.min(19)] += 1;
        }
        let expected = cfg.n_samples as f64 / 20.0;
        let chi2: f64 = bins
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        // chi-square upper 0.99 quantile at 19 dof
        assert!(chi2 < 36.1909, "chi2 = {chi2}");
    }

    #[test]
    fn signal_mean_correlates_with_label() {
        let cfg = SynthConfig {
            n_samples: 1000,
            ..tiny_cfg()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let split = &ds.train;
        let (t, d) = (cfg.seq_lens.audio, cfg.dims.audio);
        let n_sig = SynthConfig::signal_dims(d);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..split.n {
            let base = i * t * d;
            let mut m = 0.0;
            for r in 0..t {
                for j in 0..n_sig {
                    m += split.audio[base + r * d + j] as f64;
                }
            }
            xs.push(m / (t * n_sig) as f64);
            ys.push(split.label_of(i));
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = ys.iter().map(|b| (b - my) * (b - my)).sum();
        let corr = cov / (vx * vy).sqrt();
        assert!(corr > 0.9, "corr = {corr}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut cfg = tiny_cfg();
        cfg.weights = ModalityWeights {
            text: 0.5,
            audio: 0.5,
            vision: 0.5,
        };
        assert!(cfg.validate().is_err());
    }
}
