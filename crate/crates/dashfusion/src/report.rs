//! Line-delimited JSON reports: one object per line on stdout, with an
//! optional copy under the output directory. Report lines carry no
//! timestamps or timings, so identical runs produce identical bytes.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::model::FusionVariant;
use crate::train::{EpochLog, MetricsReport};

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Report {
    Metrics {
        split: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        row: Option<String>,
        seed: u64,
        metrics: MetricsReport,
    },
    Madds {
        variant: FusionVariant,
        analytic: u64,
        instrumented: u64,
    },
    Losslog {
        #[serde(flatten)]
        entry: EpochLog,
    },
    Gradcheck {
        max_rel_err: f64,
        checked: usize,
        step: f64,
        threshold: f64,
        pass: bool,
    },
}

pub struct Emitter {
    copy: Option<File>,
}

impl Emitter {
    /// Reports go to stdout; with an output directory, a copy accumulates
    /// in `<out>/reports.jsonl`.
    pub fn new(out_dir: Option<&Path>) -> Result<Self> {
        let copy = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(File::create(dir.join("reports.jsonl"))?)
            }
            None => None,
        };
        Ok(Self { copy })
    }

    pub fn emit(&mut self, report: &Report) -> Result<()> {
        let line = serde_json::to_string(report)?;
        println!("{line}");
        if let Some(f) = &mut self.copy {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}
