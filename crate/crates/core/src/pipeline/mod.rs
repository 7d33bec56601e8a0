//! Stage wiring: configuration, training drivers, generation and ablations.

pub mod ablation;
pub mod config;
pub mod generate;
pub mod train;

pub use ablation::{run_ablation, AblationName, AblationReport};
pub use config::PipelineConfig;
pub use generate::{Generation, Models, Provenance};
