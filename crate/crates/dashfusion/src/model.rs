//! The full model graph: modality encoders, temporal alignment, the
//! hierarchical bottleneck fusion stack, alternative fusion mechanisms, and
//! the prediction head.

use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    bind_attn, bind_ffn, bind_layer, bind_ln, ffn, init_attn, init_ffn, init_layer, init_ln,
    layer_norm, multi_head, transformer_layer, AttnVars, FfnVars, LayerVars, LnVars,
};
use crate::error::{Error, Result};
use crate::tensor::{init_projection, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalityId {
    Text,
    Audio,
    Vision,
}

pub const MODALITIES: [ModalityId; 3] = [ModalityId::Text, ModalityId::Audio, ModalityId::Vision];

impl ModalityId {
    pub fn key(self) -> &'static str {
        match self {
            ModalityId::Text => "text",
            ModalityId::Audio => "audio",
            ModalityId::Vision => "vision",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeqLens {
    pub text: usize,
    pub audio: usize,
    pub vision: usize,
}

impl SeqLens {
    pub fn get(&self, m: ModalityId) -> usize {
        match m {
            ModalityId::Text => self.text,
            ModalityId::Audio => self.audio,
            ModalityId::Vision => self.vision,
        }
    }

    pub fn total(&self) -> usize {
        self.text + self.audio + self.vision
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct RawDims {
    pub audio: usize,
    pub vision: usize,
}

/// Fusion mechanism used by the prediction path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    /// Pooled unimodal features concatenated; no fusion compute.
    Concat,
    /// Self-attention layers over the concatenated token sequences, pooled.
    ConcatSa,
    /// Prediction from the temporal-alignment output only.
    Ca,
    /// Bottleneck fusion with a constant token count at every layer.
    Bf,
    /// Hierarchical bottleneck fusion with per-layer token halving.
    Hbf,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub fusion_layers: usize,
    pub bottleneck_tokens: usize,
    pub vocab_size: usize,
    pub raw_dims: RawDims,
    pub seq_lens: SeqLens,
    pub lambda: f64,
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 4,
            enc_layers: 1,
            fusion_layers: 2,
            bottleneck_tokens: 8,
            vocab_size: 256,
            raw_dims: RawDims {
                audio: 20,
                vision: 35,
            },
            seq_lens: SeqLens {
                text: 24,
                audio: 96,
                vision: 48,
            },
            lambda: 0.2,
            tau: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide model width ({})",
                self.heads, self.d
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        let k_last = bottleneck_count(self.bottleneck_tokens, self.fusion_layers)?;
        if k_last < 1 {
            return Err(Error::Config(format!(
                "fusion depth {} exhausts {} bottleneck tokens",
                self.fusion_layers, self.bottleneck_tokens
            )));
        }
        if self.bottleneck_tokens > self.seq_lens.text {
            return Err(Error::Config(format!(
                "bottleneck tokens ({}) exceed the text sequence length ({})",
                self.bottleneck_tokens, self.seq_lens.text
            )));
        }
        Ok(())
    }
}

/// Bottleneck token count at fusion layer `l` (1-based): `floor(p / 2^(l-1))`.
/// A count of zero is a configuration error (too many layers for `p`).
pub fn bottleneck_count(p: usize, l: usize) -> Result<usize> {
    if l == 0 {
        return Err(Error::Config("fusion layer index is 1-based".into()));
    }
    let k = if l - 1 >= usize::BITS as usize {
        0
    } else {
        p >> (l - 1)
    };
    if k == 0 {
        return Err(Error::Config(format!(
            "bottleneck exhausted: floor({p} / 2^{}) < 1",
            l - 1
        )));
    }
    Ok(k)
}

/// Which subgraphs the forward pass builds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardMode {
    pub variant: FusionVariant,
    /// Temporal alignment on/off; off means `H = X_t`.
    pub temporal_align: bool,
    /// Bottleneck fusion on/off; off predicts from pooled `H` plus pooled
    /// unimodal features.
    pub hbf: bool,
    /// Replace the first layer's bottleneck seed with learned
    /// randomly-initialized tokens (used by the no-alignment ablation).
    pub random_bottleneck: bool,
}

impl Default for ForwardMode {
    fn default() -> Self {
        Self {
            variant: FusionVariant::Hbf,
            temporal_align: true,
            hbf: true,
            random_bottleneck: false,
        }
    }
}

/// One minibatch of raw modality inputs.
#[derive(Clone, Debug)]
pub struct ModalityBatch {
    pub text: Vec<Vec<u32>>,
    /// Each `[T_a, d_a]`.
    pub audio: Vec<Tensor>,
    /// Each `[T_v, d_v]`.
    pub vision: Vec<Tensor>,
    pub labels: Vec<f64>,
    /// Dataset indices of the batch samples (for pair retrieval).
    pub indices: Vec<usize>,
}

impl ModalityBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---------------------------------------------------------------------------
// bound parameter bundles

pub struct EncoderVars {
    /// Linear input projection (continuous modalities only).
    proj: Option<(Var, Var)>,
    /// Token embedding table (text only).
    embed: Option<Var>,
    pos: Var,
    layers: Vec<LayerVars>,
}

pub struct ModVars {
    ca: AttnVars,
    ln1: LnVars,
    ffn: FfnVars,
    ln2: LnVars,
}

pub struct FusionLayerVars {
    seed: LayerVars,
    multica: Vec<AttnVars>,
    mm_ln1: LnVars,
    mm_ffn: FfnVars,
    mm_ln2: LnVars,
    mods: Vec<ModVars>,
}

pub struct ModelVars {
    text: EncoderVars,
    audio: EncoderVars,
    vision: EncoderVars,
    align_audio: Option<AttnVars>,
    align_vision: Option<AttnVars>,
    fusion: Vec<FusionLayerVars>,
    concat_sa: Vec<LayerVars>,
    seed_tokens: Option<Var>,
    head: FfnVars,
}

/// Per-layer fusion state: unimodal features, the multimodal feature, and
/// the bottleneck. `layer` counts completed fusion layers; the initial state
/// (after temporal alignment) is layer 0 with no bottleneck.
pub struct FusionState {
    /// Unimodal features in `MODALITIES` order.
    pub x: [Var; 3],
    pub h: Var,
    pub b: Option<Var>,
    pub layer: usize,
}

/// Time-pooled per-sample features feeding the contrastive objective.
#[derive(Clone, Copy)]
pub struct GlobalVars {
    pub xt: Var,
    pub xa: Var,
    pub xv: Var,
    pub h: Var,
}

pub struct SampleForward {
    pub pred: Var,
    pub globals: Option<GlobalVars>,
    /// Multiply-accumulates spent between the encoder outputs and the head
    /// input (the fusion stage).
    pub fusion_madds: u64,
}

// ---------------------------------------------------------------------------

pub struct Model {
    pub config: ModelConfig,
    pub mode: ForwardMode,
}

impl Model {
    pub fn new(config: ModelConfig, mode: ForwardMode) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, mode })
    }

    fn uses_fusion_stack(&self) -> bool {
        self.mode.hbf
            && matches!(self.mode.variant, FusionVariant::Hbf | FusionVariant::Bf)
    }

    fn uses_concat_sa(&self) -> bool {
        self.mode.hbf && self.mode.variant == FusionVariant::ConcatSa
    }

    /// Prediction-head input width for the active mode.
    pub fn head_in_width(&self) -> usize {
        let d = self.config.d;
        if !self.mode.hbf {
            return 4 * d;
        }
        match self.mode.variant {
            FusionVariant::Hbf | FusionVariant::Bf => 4 * d,
            FusionVariant::Concat => 3 * d,
            FusionVariant::Ca | FusionVariant::ConcatSa => d,
        }
    }

    /// Create all parameters for this config/mode with fan-based uniform
    /// init for projections, zeros for biases, identity layer-norm affines.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let d = cfg.d;

        // text encoder
        set.insert(
            "encoder.text.embed",
            init_projection(&mut rng, cfg.vocab_size, d),
            true,
        )?;
        set.insert(
            "encoder.text.pos",
            init_projection(&mut rng, cfg.seq_lens.text, d),
            true,
        )?;
        for i in 0..cfg.enc_layers {
            init_layer(&mut set, &mut rng, &format!("encoder.text.layer{i}"), d, cfg.heads)?;
        }

        // continuous encoders
        for (m, raw) in [
            (ModalityId::Audio, cfg.raw_dims.audio),
            (ModalityId::Vision, cfg.raw_dims.vision),
        ] {
            let key = m.key();
            set.insert(
                &format!("encoder.{key}.proj.weight"),
                init_projection(&mut rng, raw, d),
                true,
            )?;
            set.insert(&format!("encoder.{key}.proj.bias"), Tensor::zeros(&[d]), true)?;
            set.insert(
                &format!("encoder.{key}.pos"),
                init_projection(&mut rng, cfg.seq_lens.get(m), d),
                true,
            )?;
            for i in 0..cfg.enc_layers {
                init_layer(&mut set, &mut rng, &format!("encoder.{key}.layer{i}"), d, cfg.heads)?;
            }
        }

        if self.mode.temporal_align {
            init_attn(&mut set, &mut rng, "align.audio", d, cfg.heads)?;
            init_attn(&mut set, &mut rng, "align.vision", d, cfg.heads)?;
        }

        if self.uses_fusion_stack() {
            for l in 1..=cfg.fusion_layers {
                let p = format!("fusion.layer{l}");
                init_layer(&mut set, &mut rng, &format!("{p}.seed"), d, cfg.heads)?;
                for m in MODALITIES {
                    init_attn(&mut set, &mut rng, &format!("{p}.multica.{}", m.key()), d, cfg.heads)?;
                }
                init_ln(&mut set, &format!("{p}.mm.ln1"), d)?;
                init_ffn(&mut set, &mut rng, &format!("{p}.mm.ffn"), d, d, d)?;
                init_ln(&mut set, &format!("{p}.mm.ln2"), d)?;
                for m in MODALITIES {
                    let mp = format!("{p}.{}", m.key());
                    init_attn(&mut set, &mut rng, &format!("{mp}.ca"), d, cfg.heads)?;
                    init_ln(&mut set, &format!("{mp}.ln1"), d)?;
                    init_ffn(&mut set, &mut rng, &format!("{mp}.ffn"), d, d, d)?;
                    init_ln(&mut set, &format!("{mp}.ln2"), d)?;
                }
            }
            if self.mode.random_bottleneck {
                set.insert(
                    "fusion.seed_tokens",
                    init_projection(&mut rng, cfg.bottleneck_tokens, d),
                    true,
                )?;
            }
        }

        if self.uses_concat_sa() {
            for l in 0..cfg.fusion_layers {
                init_layer(&mut set, &mut rng, &format!("fusion.concat_sa.layer{l}"), d, cfg.heads)?;
            }
        }

        init_ffn(&mut set, &mut rng, "head", self.head_in_width(), d, 1)?;
        Ok(set)
    }

    /// Bind every parameter onto a fresh tape. Done once per tape; the
    /// returned bundles are reused across the samples of a batch so
    /// gradients accumulate on shared leaves.
    pub fn bind(&self, tape: &mut Tape, set: &ParamSet) -> Result<ModelVars> {
        let cfg = &self.config;
        let heads = cfg.heads;

        let bind_encoder = |tape: &mut Tape, m: ModalityId| -> Result<EncoderVars> {
            let key = m.key();
            let (proj, embed) = if m == ModalityId::Text {
                (None, Some(tape.param(set.get("encoder.text.embed")?)))
            } else {
                (
                    Some((
                        tape.param(set.get(&format!("encoder.{key}.proj.weight"))?),
                        tape.param(set.get(&format!("encoder.{key}.proj.bias"))?),
                    )),
                    None,
                )
            };
            let pos = tape.param(set.get(&format!("encoder.{key}.pos"))?);
            let mut layers = Vec::with_capacity(cfg.enc_layers);
            for i in 0..cfg.enc_layers {
                layers.push(bind_layer(tape, set, &format!("encoder.{key}.layer{i}"), heads)?);
            }
            Ok(EncoderVars {
                proj,
                embed,
                pos,
                layers,
            })
        };

        let text = bind_encoder(tape, ModalityId::Text)?;
        let audio = bind_encoder(tape, ModalityId::Audio)?;
        let vision = bind_encoder(tape, ModalityId::Vision)?;

        let (align_audio, align_vision) = if self.mode.temporal_align {
            (
                Some(bind_attn(tape, set, "align.audio", heads)?),
                Some(bind_attn(tape, set, "align.vision", heads)?),
            )
        } else {
            (None, None)
        };

        let mut fusion = Vec::new();
        let mut seed_tokens = None;
        if self.uses_fusion_stack() {
            for l in 1..=cfg.fusion_layers {
                let p = format!("fusion.layer{l}");
                let mut multica = Vec::with_capacity(3);
                let mut mods = Vec::with_capacity(3);
                for m in MODALITIES {
                    multica.push(bind_attn(tape, set, &format!("{p}.multica.{}", m.key()), heads)?);
                    let mp = format!("{p}.{}", m.key());
                    mods.push(ModVars {
                        ca: bind_attn(tape, set, &format!("{mp}.ca"), heads)?,
                        ln1: bind_ln(tape, set, &format!("{mp}.ln1"))?,
                        ffn: bind_ffn(tape, set, &format!("{mp}.ffn"))?,
                        ln2: bind_ln(tape, set, &format!("{mp}.ln2"))?,
                    });
                }
                fusion.push(FusionLayerVars {
                    seed: bind_layer(tape, set, &format!("{p}.seed"), heads)?,
                    multica,
                    mm_ln1: bind_ln(tape, set, &format!("{p}.mm.ln1"))?,
                    mm_ffn: bind_ffn(tape, set, &format!("{p}.mm.ffn"))?,
                    mm_ln2: bind_ln(tape, set, &format!("{p}.mm.ln2"))?,
                    mods,
                });
            }
            if self.mode.random_bottleneck {
                seed_tokens = Some(tape.param(set.get("fusion.seed_tokens")?));
            }
        }

        let mut concat_sa = Vec::new();
        if self.uses_concat_sa() {
            for l in 0..cfg.fusion_layers {
                concat_sa.push(bind_layer(tape, set, &format!("fusion.concat_sa.layer{l}"), heads)?);
            }
        }

        Ok(ModelVars {
            text,
            audio,
            vision,
            align_audio,
            align_vision,
            fusion,
            concat_sa,
            seed_tokens,
            head: bind_ffn(tape, set, "head")?,
        })
    }

    /// Text encoder: trainable token embedding + learned positions +
    /// `enc_layers` transformer layers.
    pub fn encode_text(&self, tape: &mut Tape, vars: &ModelVars, tokens: &[u32]) -> Result<Var> {
        if tokens.len() != self.config.seq_lens.text {
            return Err(Error::Config(format!(
                "text length {} != configured {}",
                tokens.len(),
                self.config.seq_lens.text
            )));
        }
        let embed = vars.text.embed.expect("text encoder has an embedding table");
        let mut x = tape.embed_lookup(embed, tokens)?;
        x = tape.add(x, vars.text.pos)?;
        for layer in &vars.text.layers {
            x = transformer_layer(tape, x, layer)?;
        }
        Ok(x)
    }

    /// Continuous encoder: linear projection to width `d`, learned
    /// positions, `enc_layers` transformer layers.
    pub fn encode_continuous(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        frames: &Tensor,
        m: ModalityId,
    ) -> Result<Var> {
        let (enc, raw) = match m {
            ModalityId::Audio => (&vars.audio, self.config.raw_dims.audio),
            ModalityId::Vision => (&vars.vision, self.config.raw_dims.vision),
            ModalityId::Text => {
                return Err(Error::Config("encode_continuous: text is token-based".into()))
            }
        };
        let t_m = self.config.seq_lens.get(m);
        if frames.shape() != [t_m, raw] {
            return Err(Error::Shape {
                op: "encode_continuous",
                lhs: frames.shape().to_vec(),
                rhs: vec![t_m, raw],
            });
        }
        let (w, b) = enc.proj.expect("continuous encoder has a projection");
        let xin = tape.leaf(frames.clone());
        let mut x = tape.matmul(xin, w)?;
        x = tape.add_bias(x, b)?;
        x = tape.add(x, enc.pos)?;
        for layer in &enc.layers {
            x = transformer_layer(tape, x, layer)?;
        }
        Ok(x)
    }

    /// Temporal alignment onto the text timeline:
    /// `H = X_t + MHCA(X_t, X_a) + MHCA(X_t, X_v)`.
    pub fn temporal_align(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        x_t: Var,
        x_a: Var,
        x_v: Var,
    ) -> Result<Var> {
        let aa = vars.align_audio.as_ref().expect("alignment params bound");
        let av = vars.align_vision.as_ref().expect("alignment params bound");
        let from_audio = multi_head(tape, x_t, x_a, aa)?;
        let from_vision = multi_head(tape, x_t, x_v, av)?;
        let s = tape.add(x_t, from_audio)?;
        tape.add(s, from_vision)
    }

    /// Bottleneck seeding: transformer layer over the previous multimodal
    /// feature, then the first `k` tokens.
    pub fn init_bottleneck(
        &self,
        tape: &mut Tape,
        seed_layer: &LayerVars,
        h_prev: Var,
        k: usize,
    ) -> Result<Var> {
        let seeded = transformer_layer(tape, h_prev, seed_layer)?;
        let t = tape.value(seeded).shape()[0];
        if k > t {
            return Err(Error::Config(format!(
                "bottleneck wants {k} tokens but the multimodal feature has {t}"
            )));
        }
        tape.slice_tokens(seeded, k)
    }

    /// Bottleneck-side aggregation: `b + sum_m CA(b, x_m)`.
    pub fn multi_ca(
        &self,
        tape: &mut Tape,
        b: Var,
        x: &[Var; 3],
        attns: &[AttnVars],
    ) -> Result<Var> {
        let mut acc = b;
        for (xm, attn) in x.iter().zip(attns) {
            let ca = multi_head(tape, b, *xm, attn)?;
            acc = tape.add(acc, ca)?;
        }
        Ok(acc)
    }

    /// One fusion layer: seed the bottleneck, refine the multimodal feature
    /// through Multi-CA + FFN, then update every unimodal stream through
    /// cross-attention onto the bottleneck.
    pub fn fuse_layer(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        state: &FusionState,
    ) -> Result<FusionState> {
        let l = state.layer + 1;
        if l > self.config.fusion_layers {
            return Err(Error::Config(format!(
                "fuse_layer past configured depth {}",
                self.config.fusion_layers
            )));
        }
        let lv = &vars.fusion[l - 1];
        let k = match self.mode.variant {
            FusionVariant::Bf => self.config.bottleneck_tokens,
            _ => bottleneck_count(self.config.bottleneck_tokens, l)?,
        };
        let b = match (l, vars.seed_tokens) {
            (1, Some(tokens)) => tokens,
            _ => self.init_bottleneck(tape, &lv.seed, state.h, k)?,
        };

        let mca = self.multi_ca(tape, b, &state.x, &lv.multica)?;
        let res = tape.add(b, mca)?;
        let h = layer_norm(tape, res, &lv.mm_ln1)?;
        let f = ffn(tape, h, &lv.mm_ffn)?;
        let res2 = tape.add(h, f)?;
        let h = layer_norm(tape, res2, &lv.mm_ln2)?;

        let mut new_x = state.x;
        for (i, mv) in lv.mods.iter().enumerate() {
            let ca = multi_head(tape, state.x[i], b, &mv.ca)?;
            let res = tape.add(state.x[i], ca)?;
            let z = layer_norm(tape, res, &mv.ln1)?;
            let f = ffn(tape, z, &mv.ffn)?;
            let res2 = tape.add(z, f)?;
            new_x[i] = layer_norm(tape, res2, &mv.ln2)?;
        }

        Ok(FusionState {
            x: new_x,
            h,
            b: Some(b),
            layer: l,
        })
    }

    /// Forward one sample. `need_globals` additionally produces the pooled
    /// features for the contrastive objective (skipped during plain
    /// prediction). `fusion_madds` covers exactly the prediction path
    /// between the encoder outputs and the head input.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[u32],
        audio: &Tensor,
        vision: &Tensor,
        need_globals: bool,
    ) -> Result<SampleForward> {
        let x_t = self.encode_text(tape, vars, tokens)?;
        let x_a = self.encode_continuous(tape, vars, audio, ModalityId::Audio)?;
        let x_v = self.encode_continuous(tape, vars, vision, ModalityId::Vision)?;

        let enc_mark = tape.madds();
        let mut h0 = None;
        let align = |tape: &mut Tape, h0: &mut Option<Var>| -> Result<Var> {
            if let Some(h) = *h0 {
                return Ok(h);
            }
            let h = if self.mode.temporal_align {
                self.temporal_align(tape, vars, x_t, x_a, x_v)?
            } else {
                x_t
            };
            *h0 = Some(h);
            Ok(h)
        };

        let head_in = if !self.mode.hbf {
            let h = align(tape, &mut h0)?;
            let hp = tape.mean_pool_time(h)?;
            let pt = tape.mean_pool_time(x_t)?;
            let pa = tape.mean_pool_time(x_a)?;
            let pv = tape.mean_pool_time(x_v)?;
            tape.concat_last_dim(&[hp, pt, pa, pv])?
        } else {
            match self.mode.variant {
                FusionVariant::Hbf | FusionVariant::Bf => {
                    let h = align(tape, &mut h0)?;
                    let mut state = FusionState {
                        x: [x_t, x_a, x_v],
                        h,
                        b: None,
                        layer: 0,
                    };
                    for _ in 0..self.config.fusion_layers {
                        state = self.fuse_layer(tape, vars, &state)?;
                    }
                    let ft = tape.row(state.x[0], 0)?;
                    let fa = tape.row(state.x[1], 0)?;
                    let fv = tape.row(state.x[2], 0)?;
                    let fb = tape.row(state.b.expect("fused state has a bottleneck"), 0)?;
                    tape.concat_last_dim(&[ft, fa, fv, fb])?
                }
                FusionVariant::Ca => {
                    let h = align(tape, &mut h0)?;
                    tape.mean_pool_time(h)?
                }
                FusionVariant::Concat => {
                    let pt = tape.mean_pool_time(x_t)?;
                    let pa = tape.mean_pool_time(x_a)?;
                    let pv = tape.mean_pool_time(x_v)?;
                    tape.concat_last_dim(&[pt, pa, pv])?
                }
                FusionVariant::ConcatSa => {
                    let mut cat = tape.concat_rows(&[x_t, x_a, x_v])?;
                    for layer in &vars.concat_sa {
                        cat = transformer_layer(tape, cat, layer)?;
                    }
                    tape.mean_pool_time(cat)?
                }
            }
        };
        let fusion_madds = tape.madds() - enc_mark;

        let out = ffn(tape, head_in, &vars.head)?;
        let pred = tape.sum(out)?;

        let globals = if need_globals {
            let h = align(tape, &mut h0)?;
            Some(GlobalVars {
                xt: tape.mean_pool_time(x_t)?,
                xa: tape.mean_pool_time(x_a)?,
                xv: tape.mean_pool_time(x_v)?,
                h: tape.mean_pool_time(h)?,
            })
        } else {
            None
        };

        Ok(SampleForward {
            pred,
            globals,
            fusion_madds,
        })
    }

    /// Forward a whole batch on one tape.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &ModalityBatch,
        need_globals: bool,
    ) -> Result<Vec<SampleForward>> {
        let mut out = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            out.push(self.forward_sample(
                tape,
                vars,
                &batch.text[i],
                &batch.audio[i],
                &batch.vision[i],
                need_globals,
            )?);
        }
        Ok(out)
    }

    /// Pooled contrastive features only (encoders + temporal alignment),
    /// skipping the fusion stack and head. Used to build the per-epoch
    /// feature bank.
    pub fn global_features(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[u32],
        audio: &Tensor,
        vision: &Tensor,
    ) -> Result<GlobalVars> {
        let x_t = self.encode_text(tape, vars, tokens)?;
        let x_a = self.encode_continuous(tape, vars, audio, ModalityId::Audio)?;
        let x_v = self.encode_continuous(tape, vars, vision, ModalityId::Vision)?;
        let h = if self.mode.temporal_align {
            self.temporal_align(tape, vars, x_t, x_a, x_v)?
        } else {
            x_t
        };
        Ok(GlobalVars {
            xt: tape.mean_pool_time(x_t)?,
            xa: tape.mean_pool_time(x_a)?,
            xv: tape.mean_pool_time(x_v)?,
            h: tape.mean_pool_time(h)?,
        })
    }

    /// Prediction on a fresh tape (evaluation path).
    pub fn predict_one(
        &self,
        params: &ParamSet,
        tokens: &[u32],
        audio: &Tensor,
        vision: &Tensor,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, params)?;
        let fwd = self.forward_sample(&mut tape, &vars, tokens, audio, vision, false)?;
        Ok(tape.value(fwd.pred).item())
    }
}
