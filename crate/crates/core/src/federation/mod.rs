//! Experiment orchestration: tasks, client shards, the round loop, bound
//! diagnostics, traffic accounting and persistence.

pub mod checkpoint;
pub mod comm;
pub mod config;
pub mod diagnostics;
pub mod metrics;
pub mod partition;
pub mod round;
pub mod task;

pub use checkpoint::Checkpoint;
pub use config::{parse_config_str, ExperimentConfig, TaskKind, TaskSpec, Weighting};
pub use diagnostics::{bound_diagnostics, BoundRecord, RoundObservation};
pub use metrics::{MetricsWriter, RoundMetrics};
pub use partition::{dirichlet_partition, ClientShard};
pub use round::{run_experiment, run_experiment_with, GlobalState, RunOutcome, Simulation};
pub use task::{generate_task, Task};
