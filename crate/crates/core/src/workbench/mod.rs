//! Experiment files, dataset ingestion and run orchestration.

mod config;
mod ingest;
mod results;
mod run;

pub use config::{
    parse_config, validate_config, DataConfig, ExperimentConfig, ExperimentKind, ModelChoice,
    SweepConfig,
};
pub use ingest::{ingest_detection_manifest, ingest_face_dataset, IngestReport};
pub use results::{append_results, read_results, ResultsRow, RESULTS_COLUMNS};
pub use run::{run_experiment, RunManifest, RunSummary};
