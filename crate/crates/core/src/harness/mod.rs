//! Desk-scale experiment pipeline: configuration, training, grid sweeps and
//! CSV output.

mod config;
mod io;
mod sweep;
mod train;

pub use config::{
    ExperimentConfig, GcConfig, PowerSweepConfig, SimulateConfig, SimulationMode,
    DEFAULT_ALPHA_GRID, DEFAULT_MU_GRID, DEFAULT_REPEATS, DEFAULT_TARGETS,
};
pub use io::{config_hash, write_aggregate_csv, write_records, write_sweep_csv, Manifest};
pub use sweep::{
    aggregate, baseline_stats, evaluate_target, measured_power_params, repeat_seed, row_values,
    run_sweep, run_sweep_on, train_baseline, train_partitioned, AggregateRow, PointEval,
    SweepResult, SweepRow,
};
pub use train::{train, LossParts, TemperatureSchedule, TrainLogEntry, Trainable, TrainingConfig};
