//! Leave-one-domain-out training and evaluation, the A-distance probe, the
//! r-sweep and ablation drivers, output files and the command line.

mod adist;
mod cli;
mod config;
mod output;
mod suite;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use adist::{a_distance, block_features, frequency_a_distance, FrequencyADistance};
pub use cli::{dataset_for, main_with_args};
pub use config::{parse_pairs, TrainConfig};
pub use output::{accuracy_table, fmt_sig, losses_table, read_feature_csv, write_atomic, write_run_outputs, CsvTable};
pub use suite::{ablation_configs, ablation_suite, ablation_table, export_features, sweep_r, sweep_table, AblationRow, SweepRow};
pub use train::{confusion, evaluate, perturb_pixels, train_lodo, train_lodo_with, Confusion, LossRow, RunReport, TrainOutcome};

use crate::data::DataError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    /// 1 for usage errors, 2 for everything data-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            _ => 2,
        }
    }
}
