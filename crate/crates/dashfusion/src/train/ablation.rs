//! Component ablations, fusion-mechanism comparison, and the bottleneck
//! token sweep. Every row trains from scratch under the same seed protocol
//! and reports test-split metrics.

use serde::Serialize;

use crate::error::Result;
use crate::model::{FusionVariant, Model, ModelConfig};
use crate::synth::Dataset;
use crate::train::{evaluate_split, train, MetricsReport, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationRow {
    Full,
    /// Bottleneck seeded from randomly initialized tokens; both alignment
    /// streams disabled.
    WithoutDualStream,
    WithoutTemporal,
    WithoutSemantic,
    WithoutScl,
    WithoutHbf,
    Fusion(FusionVariant),
    BottleneckTokens(usize),
}

impl AblationRow {
    pub fn label(&self) -> String {
        match self {
            AblationRow::Full => "full".into(),
            AblationRow::WithoutDualStream => "wo_dual_stream".into(),
            AblationRow::WithoutTemporal => "wo_temporal".into(),
            AblationRow::WithoutSemantic => "wo_semantic".into(),
            AblationRow::WithoutScl => "wo_scl".into(),
            AblationRow::WithoutHbf => "wo_hbf".into(),
            AblationRow::Fusion(v) => format!("fusion_{v:?}").to_lowercase(),
            AblationRow::BottleneckTokens(p) => format!("p_{p}"),
        }
    }

    /// Specialize base configs for this row.
    pub fn configure(&self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        match self {
            AblationRow::Full => {}
            AblationRow::WithoutDualStream => {
                t.switches.temporal_align = false;
                t.switches.semantic_align = false;
                t.random_bottleneck = true;
            }
            AblationRow::WithoutTemporal => t.switches.temporal_align = false,
            AblationRow::WithoutSemantic => t.switches.semantic_align = false,
            AblationRow::WithoutScl => t.switches.scl = false,
            AblationRow::WithoutHbf => t.switches.hbf = false,
            AblationRow::Fusion(v) => t.fusion = *v,
            AblationRow::BottleneckTokens(p) => m.bottleneck_tokens = *p,
        }
        (m, t)
    }
}

/// The component-ablation row set.
pub fn component_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::Full,
        AblationRow::WithoutDualStream,
        AblationRow::WithoutTemporal,
        AblationRow::WithoutSemantic,
        AblationRow::WithoutScl,
        AblationRow::WithoutHbf,
    ]
}

/// The fusion-mechanism comparison row set.
pub fn fusion_rows() -> Vec<AblationRow> {
    vec![
        AblationRow::Fusion(FusionVariant::Concat),
        AblationRow::Fusion(FusionVariant::ConcatSa),
        AblationRow::Fusion(FusionVariant::Ca),
        AblationRow::Fusion(FusionVariant::Bf),
        AblationRow::Fusion(FusionVariant::Hbf),
    ]
}

/// The bottleneck token sweep.
pub fn bottleneck_sweep_rows() -> Vec<AblationRow> {
    [4, 8, 16, 32, 64]
        .into_iter()
        .map(AblationRow::BottleneckTokens)
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationResult {
    pub row: String,
    pub seed: u64,
    pub metrics: MetricsReport,
}

/// Train + evaluate a single row on the test split.
pub fn run_row(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    row: AblationRow,
) -> Result<AblationResult> {
    let (m, t) = row.configure(model_cfg, train_cfg);
    let out = train(ds, &m, &t)?;
    let model = Model::new(m, t.forward_mode())?;
    let metrics = evaluate_split(&model, &out.params, &ds.test, &ds.config)?;
    Ok(AblationResult {
        row: row.label(),
        seed: t.seed,
        metrics,
    })
}

/// Run every row under the same seed protocol.
pub fn run_ablation(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    rows: &[AblationRow],
) -> Result<Vec<AblationResult>> {
    rows.iter()
        .map(|&row| run_row(ds, model_cfg, train_cfg, row))
        .collect()
}

/// Seed-averaged mean of one metric; `None`-valued correlations are
/// excluded from their aggregate.
pub fn mean_over_seeds<F>(results: &[AblationResult], f: F) -> f64
where
    F: Fn(&MetricsReport) -> f64,
{
    results.iter().map(|r| f(&r.metrics)).sum::<f64>() / results.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_labels_are_distinct() {
        let mut rows = component_rows();
        rows.extend(fusion_rows());
        rows.extend(bottleneck_sweep_rows());
        let labels: Vec<String> = rows.iter().map(|r| r.label()).collect();
        let mut dedup = labels.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(labels.len(), dedup.len());
    }

    #[test]
    fn without_dual_stream_disables_both_alignment_streams() {
        let (_, t) = AblationRow::WithoutDualStream
            .configure(&ModelConfig::default(), &TrainConfig::default());
        assert!(!t.switches.temporal_align);
        assert!(!t.switches.semantic_align);
        assert!(t.random_bottleneck);
        assert!(t.switches.scl, "supervised terms stay on");
    }
}
