//! Early-stopping inference around a gated compression layer: the
//! partitioned model, threshold calibration, the runtime, and evaluation
//! metrics.

mod calibrate;
mod metrics;
mod model;
mod runtime;

pub use calibrate::{calibrate, Calibration, GatingThreshold, NEVER_STOP};
pub use metrics::{
    decision_log, roc_curve, stop_rate, Counts, DecisionRecord, GatingStats, RocPoint, RunStats,
    Summary, METRIC_NAMES,
};
pub use model::{
    argmax_rows, split_for, BaselineModel, GcSettings, PartitionedModel, TrainForward,
};
pub use runtime::{gate_scores, split_scores, Cascade, InferenceDecision, Outcome};

use crate::data::Dataset;
use crate::error::Result;

/// Result of running a cascade over one dataset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub decisions: Vec<InferenceDecision>,
    pub counts: Counts,
    pub stats: RunStats,
}

pub fn evaluate(
    model: &PartitionedModel,
    threshold: GatingThreshold,
    data: &Dataset,
) -> Result<Evaluation> {
    let cascade = Cascade::new(model, threshold);
    let decisions = cascade.run(data)?;
    let counts = Counts::from_decisions(&decisions, &data.classes);
    Ok(Evaluation {
        stats: counts.stats(),
        decisions,
        counts,
    })
}

/// Evaluates on `repeats` independent test draws, produced by `draw(r)` for
/// repeat index `r`, and summarizes the runs.
pub fn evaluate_repeated(
    model: &PartitionedModel,
    threshold: GatingThreshold,
    repeats: usize,
    draw: impl Fn(usize) -> Dataset,
) -> Result<GatingStats> {
    let runs = (0..repeats)
        .map(|r| evaluate(model, threshold, &draw(r)).map(|e| e.stats))
        .collect::<Result<Vec<_>>>()?;
    Ok(GatingStats::from_runs(runs))
}
