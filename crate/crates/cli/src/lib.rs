//! Configuration, dataset ingestion and the staged experiment pipeline
//! behind the `reidpatch` command.

pub mod config;
pub mod error;
pub mod ingest;
pub mod pipeline;

pub use config::{AdversarySection, DatasetSource, ExperimentConfig, FolderSource, ModelSection, Overrides};
pub use error::{CliError, CliResult, Stage};
pub use ingest::{default_torso_quad, ingest_dataset, ingest_folder};
pub use pipeline::{load_genset, read_manifest, run_experiment, Manifest, RunSummary, StageRecord, MANIFEST};
