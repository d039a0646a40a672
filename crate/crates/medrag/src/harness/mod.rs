//! Synthetic benchmark generation, poisoning experiment orchestration,
//! metric computation, and report emission.

pub mod bench;
pub mod config;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod poison;
pub mod report;

pub use bench::{
    instance_query, retrieve_context, synth_benchmark, synth_benchmark_with, Benchmark,
    PipelineConfig, VQAInstance, DEFAULT_STEALTH_EPS, NEGATIVE_ANSWER, POSITIVE_ANSWER,
};
pub use config::{apply_config_text, load_config};
pub use experiment::{
    ablation_diagnostic, apply_poisoning, attacker_query_sample, evaluate, run_experiment,
    run_suite, run_with_benchmark, AblationDiagnostic, AttackKind, ExperimentConfig,
    ExperimentOutcome, Intensity, TargetComponent, DEFAULT_SEEDS,
};
pub use io::{export_embeddings, read_grid, write_grid};
pub use metrics::{f1_from_precision_recall, metrics, MetricsReport};
pub use poison::{
    craft_injection, poison_kb, AttackSettings, AttackerContext, CraftKind, InjectionSummary,
};
pub use report::{emit_report, ReportFormat};
