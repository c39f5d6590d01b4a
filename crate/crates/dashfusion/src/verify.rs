//! End-to-end gradient verification: reverse-mode gradients of the full
//! training objective (prediction + weighted contrastive loss) against
//! central finite differences at random parameter coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::contrastive::{
    build_similarity_index, contrastive_batch_loss, sample_pairs, ContrastiveCfg, PairSet,
};
use crate::error::Result;
use crate::model::{Model, ModelConfig, RawDims, SeqLens};
use crate::synth::{generate_dataset, SynthConfig};
use crate::tensor::{grad_check_params, random_coords, GradCheckReport, ParamSet, Tape, Tensor};
use crate::train::{build_feature_bank, TrainConfig};

#[derive(Clone, Debug)]
pub struct FullLossCheck {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub synth_cfg: SynthConfig,
    pub batch_size: usize,
    pub coords: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for FullLossCheck {
    fn default() -> Self {
        let seq_lens = SeqLens {
            text: 5,
            audio: 9,
            vision: 7,
        };
        let raw_dims = RawDims { audio: 4, vision: 6 };
        Self {
            model_cfg: ModelConfig {
                d: 8,
                heads: 2,
                enc_layers: 1,
                fusion_layers: 2,
                bottleneck_tokens: 4,
                vocab_size: 24,
                raw_dims,
                seq_lens,
                ..ModelConfig::default()
            },
            train_cfg: TrainConfig::default(),
            synth_cfg: SynthConfig {
                n_samples: 12,
                seq_lens,
                dims: raw_dims,
                vocab_size: 24,
                ..SynthConfig::default()
            },
            batch_size: 4,
            coords: 24,
            step: 1e-5,
            seed: 0,
        }
    }
}

/// Check the full objective (`L_pred + lambda * L_con` with the configured
/// switches) at `coords` random parameter coordinates on a small synthetic
/// batch. The feature bank and pair sets are frozen before the check, so
/// the objective is a pure function of the parameters.
pub fn gradcheck_full_loss(opts: &FullLossCheck) -> Result<GradCheckReport> {
    let ds = generate_dataset(&opts.synth_cfg)?;
    let tcfg = &opts.train_cfg;
    let model = Model::new(opts.model_cfg.clone(), tcfg.forward_mode())?;
    let params = model.init_params(opts.seed)?;

    let scl_on = tcfg.lambda > 0.0 && tcfg.switches.scl;
    let (bank, index) = if scl_on {
        let bank = build_feature_bank(&model, &params, &ds.train, &ds.config)?;
        let refs: Vec<Tensor> = bank.features.iter().map(|g| g.xt.clone()).collect();
        let labels: Vec<f64> = ds.train.labels.iter().map(|&v| v as f64).collect();
        let index = build_similarity_index(&refs, &labels, ds.config.label_scale)?;
        (Some(bank), Some(index))
    } else {
        (None, None)
    };

    let batch_indices: Vec<usize> = (0..opts.batch_size.min(ds.train.n)).collect();
    let batch = ds.train.batch(&batch_indices, &ds.config);
    let mut sampler = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let pair_sets: Vec<Option<PairSet>> = batch
        .indices
        .iter()
        .map(|&i| {
            index
                .as_ref()
                .and_then(|idx| sample_pairs(idx, i, &mut sampler))
        })
        .collect();
    let con_cfg = ContrastiveCfg {
        tau: tcfg.tau,
        semantic: tcfg.switches.semantic_align,
        scl: tcfg.switches.scl,
        semantic_weight: tcfg.semantic_weight,
        scl_weight: tcfg.scl_weight,
    };
    let contrastive_on = tcfg.lambda > 0.0
        && (tcfg.switches.semantic_align || tcfg.switches.scl);

    let loss_fn = |tape: &mut Tape, set: &ParamSet| {
        let vars = model.bind(tape, set)?;
        let fwds = model.forward_batch(tape, &vars, &batch, contrastive_on)?;
        let preds: Vec<_> = fwds.iter().map(|f| f.pred).collect();
        let pred_vec = tape.stack_scalars(&preds)?;
        let labels = tape.leaf(Tensor::from_vec(vec![batch.len()], batch.labels.clone())?);
        let diff = tape.sub(pred_vec, labels)?;
        let sq = tape.mul(diff, diff)?;
        let l_pred = tape.mean_all(sq)?;
        if !contrastive_on {
            return Ok(l_pred);
        }
        let globals: Vec<_> = fwds.iter().map(|f| f.globals.expect("globals")).collect();
        let l_con = contrastive_batch_loss(tape, &globals, &pair_sets, bank.as_ref(), &con_cfg)?;
        let scaled = tape.scale(l_con, tcfg.lambda)?;
        tape.add(l_pred, scaled)
    };

    let mut coord_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc0de);
    let coords = random_coords(&params, opts.coords, &mut coord_rng);
    grad_check_params(&loss_fn, &params, &coords, opts.step)
}
