use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::train::{train, TrainLogEntry};
use crate::cascade::{
    calibrate, evaluate, gate_scores, split_scores, BaselineModel, Calibration, Counts, GcSettings,
    PartitionedModel, RunStats, Summary,
};
use crate::data::{generate_dataset, Dataset, Splits};
use crate::error::Result;
use crate::gc::GcLoss;
use crate::power::{report, GcPowerParams, PowerReport, SystemConfig};
use crate::rng::derive_seed;

/// Seed of repeat `r`; model initialization and batch order derive from it.
pub fn repeat_seed(root: u64, r: usize) -> u64 {
    derive_seed(root, r as u64)
}

fn shuffle_seed(seed: u64) -> u64 {
    derive_seed(seed, 1)
}

pub fn train_partitioned(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    mu: f64,
    alpha: f64,
    seed: u64,
) -> Result<(PartitionedModel, Vec<TrainLogEntry>)> {
    let settings = GcSettings {
        mu,
        alpha,
        lambda_gc: cfg.gc.lambda_gc,
        mask_init: cfg.gc.mask_init,
    };
    let mut model = PartitionedModel::new(&cfg.backbone, cfg.dataset.class_map(), &settings, seed)?;
    let log = train(&mut model, &cfg.training, train_set, shuffle_seed(seed))?;
    Ok((model, log))
}

pub fn train_baseline(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    seed: u64,
) -> Result<(BaselineModel, Vec<TrainLogEntry>)> {
    let mut model = BaselineModel::new(&cfg.backbone, cfg.dataset.class_map(), seed)?;
    let log = train(&mut model, &cfg.training, train_set, shuffle_seed(seed))?;
    Ok((model, log))
}

pub fn baseline_stats(model: &BaselineModel, data: &Dataset) -> Result<RunStats> {
    let predicted = model.predict(&data.inputs)?;
    Ok(Counts::from_predictions(&predicted, &data.classes).stats())
}

/// Calibration on `val` and evaluation on `test` for one target rate.
#[derive(Clone, Debug)]
pub struct PointEval {
    pub calibration: Calibration,
    pub counts: Counts,
    pub stats: RunStats,
}

pub fn evaluate_target(
    model: &PartitionedModel,
    val_scores: &[f64],
    test: &Dataset,
    target: f64,
) -> Result<PointEval> {
    let calibration = calibrate(val_scores, target)?;
    let eval = evaluate(model, calibration.threshold, test)?;
    Ok(PointEval {
        calibration,
        counts: eval.counts,
        stats: eval.stats,
    })
}

/// Rates measured on a test run, in the form the power model takes.
pub fn measured_power_params(counts: &Counts, mu: f64) -> GcPowerParams {
    let n = (counts.positives + counts.negatives) as f64;
    let stats = counts.stats();
    GcPowerParams {
        rho: counts.positives as f64 / n,
        mu,
        nu: stats.sparsity.unwrap_or(0.0),
        gamma: stats.correct_gating_rate.unwrap_or(0.0),
    }
}

/// One grid point of one repeat.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub grid_index: usize,
    pub requested_mu: f64,
    /// Realized prefix share after rounding to whole units.
    pub mu: f64,
    pub alpha: f64,
    pub target: f64,
    pub repeat: usize,
    pub seed: u64,
    pub tau: Option<f64>,
    pub calibrated_incorrect_rate: Option<f64>,
    pub stats: RunStats,
    pub baseline: RunStats,
    pub final_loss: Option<GcLoss>,
    pub power_params: Option<GcPowerParams>,
    /// One report per configured regime, at the measured rates.
    pub power: Vec<PowerReport>,
    pub error: Option<String>,
}

/// Mean and sample variance of every numeric column over the repeats of one
/// grid point.
#[derive(Clone, Debug)]
pub struct AggregateRow {
    pub grid_index: usize,
    pub mu: f64,
    pub alpha: f64,
    pub target: f64,
    pub runs: usize,
    pub failures: usize,
    pub columns: Vec<(String, Summary)>,
}

impl AggregateRow {
    pub fn column(&self, name: &str) -> Option<&Summary> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub regimes: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<AggregateRow>,
}

impl SweepResult {
    pub fn aggregate(&self, mu: f64, alpha: f64, target: f64) -> Option<&AggregateRow> {
        self.aggregates
            .iter()
            .find(|a| a.mu == mu && a.alpha == alpha && a.target == target)
    }
}

/// Numeric columns of a row, by name, in output order.
pub fn row_values(row: &SweepRow, regimes: &[f64]) -> Vec<(String, Option<f64>)> {
    let mut out: Vec<(String, Option<f64>)> = crate::cascade::METRIC_NAMES
        .iter()
        .zip(row.stats.values())
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    out.push(("baseline_precision".into(), row.baseline.precision));
    out.push(("baseline_recall".into(), row.baseline.recall));
    for (i, a) in regimes.iter().enumerate() {
        let r = row.power.get(i);
        out.push((format!("gc_cost_a{a}"), r.map(|r| r.gc_cost)));
        out.push((format!("reduction_a{a}"), r.map(|r| r.reduction_factor)));
    }
    out
}

struct Unit {
    mu_index: usize,
    alpha_index: usize,
    repeat: usize,
}

/// Generates the configured dataset and runs the full grid.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let splits = generate_dataset(&cfg.dataset)?;
    Ok(run_sweep_on(cfg, &splits))
}

/// For every `(mu, alpha, repeat)` trains one model, then calibrates it on
/// the validation split and evaluates on the test split for every target.
/// Grid points run in parallel; a failing point yields rows carrying the
/// error instead of aborting the sweep.
pub fn run_sweep_on(cfg: &ExperimentConfig, splits: &Splits) -> SweepResult {
    let baselines: Vec<Result<RunStats>> = (0..cfg.repeats)
        .into_par_iter()
        .map(|r| {
            let (model, _) = train_baseline(cfg, &splits.train, repeat_seed(cfg.seed, r))?;
            baseline_stats(&model, &splits.test)
        })
        .collect();
    let baselines: Vec<RunStats> = baselines
        .into_iter()
        .map(|b| {
            b.unwrap_or_else(|e| {
                log::warn!("baseline training failed: {e}");
                RunStats::default()
            })
        })
        .collect();

    let units: Vec<Unit> = (0..cfg.mu.len())
        .flat_map(|m| {
            (0..cfg.alpha.len()).flat_map(move |a| {
                (0..cfg.repeats).map(move |repeat| Unit {
                    mu_index: m,
                    alpha_index: a,
                    repeat,
                })
            })
        })
        .collect();
    let nested: Vec<Vec<SweepRow>> = units
        .par_iter()
        .map(|u| run_unit(cfg, splits, u, &baselines[u.repeat]))
        .collect();
    let mut rows: Vec<SweepRow> = nested.into_iter().flatten().collect();
    rows.sort_by_key(|r| (r.grid_index, r.repeat));
    let aggregates = aggregate(&rows, &cfg.regimes);
    SweepResult {
        regimes: cfg.regimes.clone(),
        rows,
        aggregates,
    }
}

fn run_unit(
    cfg: &ExperimentConfig,
    splits: &Splits,
    u: &Unit,
    baseline: &RunStats,
) -> Vec<SweepRow> {
    let seed = repeat_seed(cfg.seed, u.repeat);
    let requested_mu = cfg.mu[u.mu_index];
    let alpha = cfg.alpha[u.alpha_index];
    let grid_index =
        |t: usize| (u.mu_index * cfg.alpha.len() + u.alpha_index) * cfg.targets.len() + t;
    let blank = |t: usize, mu: f64, error: Option<String>| SweepRow {
        grid_index: grid_index(t),
        requested_mu,
        mu,
        alpha,
        target: cfg.targets[t],
        repeat: u.repeat,
        seed,
        tau: None,
        calibrated_incorrect_rate: None,
        stats: RunStats::default(),
        baseline: *baseline,
        final_loss: None,
        power_params: None,
        power: Vec::new(),
        error,
    };

    let trained = train_partitioned(cfg, &splits.train, requested_mu, alpha, seed).and_then(
        |(model, log)| {
            let scores = gate_scores(&model, &splits.val)?;
            Ok((model, log, scores))
        },
    );
    let (model, log, val_scores) = match trained {
        Ok(t) => t,
        Err(e) => {
            log::warn!(
                "grid point mu={requested_mu} alpha={alpha} repeat={} failed: {e}",
                u.repeat
            );
            return (0..cfg.targets.len())
                .map(|t| blank(t, requested_mu, Some(e.to_string())))
                .collect();
        }
    };
    let (val_pos, _) = split_scores(&val_scores, &splits.val);
    let final_loss = log.last().map(|l| GcLoss {
        task: l.task,
        gate: l.gate,
        sparsity: l.sparsity,
        total: l.total,
    });
    let mu = model.mu();
    (0..cfg.targets.len())
        .map(|t| {
            let outcome =
                evaluate_target(&model, &val_pos, &splits.test, cfg.targets[t]).and_then(|p| {
                    let params = measured_power_params(&p.counts, mu);
                    let power = cfg
                        .regimes
                        .iter()
                        .map(|&a| report(&params, &SystemConfig::from_compute_share(a)?))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((p, params, power))
                });
            match outcome {
                Ok((p, params, power)) => SweepRow {
                    tau: Some(p.calibration.threshold.tau),
                    calibrated_incorrect_rate: Some(p.calibration.calibrated_incorrect_rate),
                    stats: p.stats,
                    final_loss,
                    power_params: Some(params),
                    power,
                    ..blank(t, mu, None)
                },
                Err(e) => SweepRow {
                    final_loss,
                    ..blank(t, mu, Some(e.to_string()))
                },
            }
        })
        .collect()
}

/// Groups rows by grid index and summarizes every numeric column over the
/// successful repeats.
pub fn aggregate(rows: &[SweepRow], regimes: &[f64]) -> Vec<AggregateRow> {
    let mut out: Vec<AggregateRow> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let gi = rows[start].grid_index;
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| r.grid_index == gi)
                .count();
        let group = &rows[start..end];
        let ok: Vec<&SweepRow> = group.iter().filter(|r| r.error.is_none()).collect();
        let names: Vec<String> = row_values(&group[0], regimes)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let per_row: Vec<Vec<Option<f64>>> = ok
            .iter()
            .map(|r| row_values(r, regimes).into_iter().map(|(_, v)| v).collect())
            .collect();
        let columns = names
            .into_iter()
            .enumerate()
            .map(|(c, name)| (name, Summary::of(per_row.iter().map(|v| v[c]))))
            .collect();
        out.push(AggregateRow {
            grid_index: gi,
            mu: ok.first().map_or(group[0].mu, |r| r.mu),
            alpha: group[0].alpha,
            target: group[0].target,
            runs: ok.len(),
            failures: group.len() - ok.len(),
            columns,
        });
        start = end;
    }
    out
}
