//! Command-line interface: dataset generation, training, evaluation,
//! ablations, compute-cost reports, and gradient checks. All report output
//! is line-delimited JSON on stdout; diagnostics go to stderr.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::model::{FusionVariant, Model, ModelConfig};
use crate::report::{Emitter, Report};
use crate::synth::{self, format, SplitName, SynthConfig};
use crate::train::{
    self,
    ablation::{self, AblationRow},
    madds, TrainConfig,
};
use crate::verify::{gradcheck_full_loss, FullLossCheck};

const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "dashfusion", version, about = "multimodal sentiment regression testbed")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multimodal dataset directory.
    Gen(GenArgs),
    /// Train a model and report per-epoch losses plus test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run ablation rows (component switches, fusion variants, token sweep).
    Ablate(AblateArgs),
    /// Report fusion-stage multiply-accumulate counts.
    Madds(MaddsArgs),
    /// Gradient-check the full training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Default)]
struct Common {
    /// JSON config file mirroring the synth/model/train field names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (reports copy, checkpoints, datasets).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct TrainFlags {
    /// Dataset directory (overrides `data_dir` from the config file).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    fusion: Option<FusionVariant>,
    /// Fusion stack depth.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long = "bottleneck-tokens")]
    bottleneck_tokens: Option<usize>,
    /// Disable temporal alignment.
    #[arg(long = "no-temporal")]
    no_temporal: bool,
    /// Disable semantic alignment.
    #[arg(long = "no-semantic")]
    no_semantic: bool,
    /// Disable supervised contrastive learning.
    #[arg(long = "no-scl")]
    no_scl: bool,
    /// Disable bottleneck fusion.
    #[arg(long = "no-hbf")]
    no_hbf: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// Number of samples (overrides the config file).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: TrainFlags,
    /// Checkpoint stem (the path without the .json/.dfts extension).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum RowSet {
    Components,
    Fusion,
    PSweep,
    All,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, value_enum, default_value = "components")]
    rows: RowSet,
    /// Seeds per row (seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Args)]
struct MaddsArgs {
    #[command(flatten)]
    common: Common,
    /// Report a single fusion variant (all five when omitted).
    #[arg(long, value_enum)]
    fusion: Option<FusionVariant>,
    /// Also measure forward wall-clock (median of 30 after 5 warmups;
    /// printed to stderr to keep report bytes deterministic).
    #[arg(long)]
    bench: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Number of random parameter coordinates.
    #[arg(long, default_value_t = 24)]
    coords: usize,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
}

/// Optional config file: any subset of the sections may appear.
#[derive(Deserialize, Default)]
#[serde(default)]
struct FileConfig {
    synth: Option<SynthConfig>,
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
    data_dir: Option<PathBuf>,
}

struct Resolved {
    synth: SynthConfig,
    model: ModelConfig,
    train: TrainConfig,
    data_dir: Option<PathBuf>,
}

fn resolve(common: &Common, flags: Option<&TrainFlags>) -> Result<Resolved> {
    let file: FileConfig = match &common.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => FileConfig::default(),
    };
    let mut synth = file.synth.unwrap_or_default();
    let mut model = file.model.unwrap_or_default();
    let mut train = file.train.unwrap_or_default();
    let mut data_dir = file.data_dir;

    if let Some(seed) = common.seed {
        synth.seed = seed;
        train.seed = seed;
    }
    if let Some(flags) = flags {
        if let Some(d) = &flags.data {
            data_dir = Some(d.clone());
        }
        if let Some(v) = flags.epochs {
            train.epochs = v;
        }
        if let Some(v) = flags.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = flags.lr {
            train.lr = v;
        }
        if let Some(v) = flags.lambda {
            train.lambda = v;
            model.lambda = v;
        }
        if let Some(v) = flags.tau {
            train.tau = v;
            model.tau = v;
        }
        if let Some(v) = flags.fusion {
            train.fusion = v;
        }
        if let Some(v) = flags.layers {
            model.fusion_layers = v;
        }
        if let Some(v) = flags.bottleneck_tokens {
            model.bottleneck_tokens = v;
        }
        train.switches.temporal_align &= !flags.no_temporal;
        train.switches.semantic_align &= !flags.no_semantic;
        train.switches.scl &= !flags.no_scl;
        train.switches.hbf &= !flags.no_hbf;
    }
    Ok(Resolved {
        synth,
        model,
        train,
        data_dir,
    })
}

/// Align the model's input geometry with the dataset it will consume.
fn fit_model_to_data(model: &mut ModelConfig, synth: &SynthConfig) {
    model.seq_lens = synth.seq_lens;
    model.raw_dims = synth.dims;
    model.vocab_size = synth.vocab_size;
}

fn load_data(data_dir: Option<&PathBuf>) -> Result<synth::Dataset> {
    let dir = data_dir.ok_or_else(|| {
        Error::Config("no dataset: pass --data DIR or set data_dir in the config file".into())
    })?;
    format::load_dataset(dir)
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut resolved = resolve(&args.common, None)?;
    if let Some(n) = args.samples {
        resolved.synth.n_samples = n;
    }
    let out = args
        .common
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("gen requires --out DIR".into()))?;
    let ds = synth::generate_dataset(&resolved.synth)?;
    format::save_dataset(&ds, out)?;
    eprintln!(
        "wrote {} samples ({}/{}/{}) to {}",
        resolved.synth.n_samples,
        ds.train.n,
        ds.valid.n,
        ds.test.n,
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut resolved = resolve(&args.common, Some(&args.flags))?;
    let ds = load_data(resolved.data_dir.as_ref())?;
    fit_model_to_data(&mut resolved.model, &ds.config);

    let mut emitter = Emitter::new(args.common.out.as_deref())?;
    let out = train::train(&ds, &resolved.model, &resolved.train)?;
    for entry in &out.log {
        emitter.emit(&Report::Losslog {
            entry: entry.clone(),
        })?;
    }
    let model = Model::new(resolved.model.clone(), resolved.train.forward_mode())?;
    let metrics = train::evaluate_split(&model, &out.params, &ds.test, &ds.config)?;
    emitter.emit(&Report::Metrics {
        split: "test".into(),
        row: None,
        seed: resolved.train.seed,
        metrics,
    })?;
    if let Some(dir) = &args.common.out {
        format::save_params(&out.params, &dir.join("checkpoint"))?;
        eprintln!(
            "best epoch {} (valid MAE {:.4}); checkpoint under {}",
            out.best_epoch,
            out.best_valid_mae,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut resolved = resolve(&args.common, Some(&args.flags))?;
    let ds = load_data(resolved.data_dir.as_ref())?;
    fit_model_to_data(&mut resolved.model, &ds.config);
    let params = format::load_params(&args.checkpoint)?;
    let model = Model::new(resolved.model.clone(), resolved.train.forward_mode())?;
    let metrics =
        train::evaluate_split(&model, &params, ds.split(args.split), &ds.config)?;
    let mut emitter = Emitter::new(args.common.out.as_deref())?;
    emitter.emit(&Report::Metrics {
        split: args.split.key().into(),
        row: None,
        seed: resolved.train.seed,
        metrics,
    })?;
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut resolved = resolve(&args.common, Some(&args.flags))?;
    let ds = load_data(resolved.data_dir.as_ref())?;
    fit_model_to_data(&mut resolved.model, &ds.config);

    let mut rows = Vec::new();
    if matches!(args.rows, RowSet::Components | RowSet::All) {
        rows.extend(ablation::component_rows());
    }
    if matches!(args.rows, RowSet::Fusion | RowSet::All) {
        rows.extend(ablation::fusion_rows());
    }
    if matches!(args.rows, RowSet::PSweep | RowSet::All) {
        rows.extend(ablation::bottleneck_sweep_rows());
    }

    let mut emitter = Emitter::new(args.common.out.as_deref())?;
    for row in rows {
        // sweep points that cannot fit the dataset geometry are reported on
        // stderr and skipped
        if let AblationRow::BottleneckTokens(p) = row {
            let mut probe = resolved.model.clone();
            probe.bottleneck_tokens = p;
            if let Err(e) = probe.validate() {
                eprintln!("skipping {}: {e}", row.label());
                continue;
            }
        }
        for s in 0..args.seeds {
            let mut tcfg = resolved.train.clone();
            tcfg.seed = resolved.train.seed + s;
            let result = ablation::run_row(&ds, &resolved.model, &tcfg, row)?;
            emitter.emit(&Report::Metrics {
                split: "test".into(),
                row: Some(result.row.clone()),
                seed: result.seed,
                metrics: result.metrics,
            })?;
        }
    }
    Ok(())
}

fn cmd_madds(args: &MaddsArgs) -> Result<()> {
    let resolved = resolve(&args.common, None)?;
    let variants: Vec<FusionVariant> = match args.fusion {
        Some(v) => vec![v],
        None => madds::ALL_VARIANTS.to_vec(),
    };
    let mut emitter = Emitter::new(args.common.out.as_deref())?;
    for v in variants {
        let report = madds::madds_report(v, &resolved.model)?;
        emitter.emit(&Report::Madds {
            variant: report.variant,
            analytic: report.analytic,
            instrumented: report.instrumented,
        })?;
        if args.bench {
            let ms = madds::wallclock_forward_ms(v, &resolved.model)?;
            eprintln!("{v:?}: forward median {ms:.3} ms (30 runs after 5 warmups)");
        }
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let mut opts = FullLossCheck {
        coords: args.coords,
        step: args.h,
        ..FullLossCheck::default()
    };
    if let Some(seed) = args.common.seed {
        opts.seed = seed;
    }
    let report = gradcheck_full_loss(&opts)?;
    let mut emitter = Emitter::new(args.common.out.as_deref())?;
    emitter.emit(&Report::Gradcheck {
        max_rel_err: report.max_rel_err,
        checked: report.checked,
        step: report.step,
        threshold: GRADCHECK_THRESHOLD,
        pass: report.max_rel_err < GRADCHECK_THRESHOLD,
    })?;
    Ok(())
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with exit 0, usage errors
            // on stderr with exit 2
            return e.exit_code_with_print();
        }
    };
    let result = match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Madds(a) => cmd_madds(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

trait ClapErrorExt {
    fn exit_code_with_print(self) -> i32;
}

impl ClapErrorExt for clap::Error {
    fn exit_code_with_print(self) -> i32 {
        let code = self.exit_code();
        let _ = self.print();
        code
    }
}
