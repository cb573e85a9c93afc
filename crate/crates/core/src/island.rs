//! Sample-by-sample energy simulation of a two-island deployment: an
//! always-on island runs the prefix and gate, a link carries the masked
//! features, and an on-demand island wakes up to run the suffix.
//!
//! Per sample the prefix island pays `mu * a`. A stopped sample costs
//! nothing else. Otherwise the link pays `(1 - nu) * b` for the sparse
//! features and the suffix island pays `(1 - mu) * a`. There is no idle,
//! leakage, or wake-up transition cost.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{Cascade, InferenceDecision};
use crate::data::{Class, Dataset, BACKGROUND};
use crate::error::{check_range, Result};
use crate::power::{GcPowerParams, SystemConfig};
use crate::rng::child_rng;

/// Samples per parallel work item; each chunk owns its RNG stream.
const CHUNK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeIsland {
    pub name: String,
    /// Energy for executing the whole network depth on this island.
    pub compute_cost_per_depth_unit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// Energy for sending the dense prefix output once.
    pub transmission_cost_per_unit_data: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub prefix_island: ComputeIsland,
    pub suffix_island: ComputeIsland,
    pub link: Link,
}

impl Deployment {
    /// Both islands pay `a` per unit depth; the link pays `b`.
    pub fn from_config(config: &SystemConfig) -> Result<Self> {
        config.validate()?;
        Ok(Deployment {
            prefix_island: ComputeIsland {
                name: "always-on".into(),
                compute_cost_per_depth_unit: config.a,
            },
            suffix_island: ComputeIsland {
                name: "on-demand".into(),
                compute_cost_per_depth_unit: config.a,
            },
            link: Link {
                transmission_cost_per_unit_data: config.b,
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_range(
            "prefix compute cost",
            self.prefix_island.compute_cost_per_depth_unit,
            0.0,
            f64::MAX,
        )?;
        check_range(
            "suffix compute cost",
            self.suffix_island.compute_cost_per_depth_unit,
            0.0,
            f64::MAX,
        )?;
        check_range(
            "link cost",
            self.link.transmission_cost_per_unit_data,
            0.0,
            f64::MAX,
        )
    }

    fn prefix_cost(&self, mu: f64) -> f64 {
        mu * self.prefix_island.compute_cost_per_depth_unit
    }

    fn suffix_cost(&self, mu: f64) -> f64 {
        (1.0 - mu) * self.suffix_island.compute_cost_per_depth_unit
    }

    fn link_cost(&self, nu: f64) -> f64 {
        (1.0 - nu) * self.link.transmission_cost_per_unit_data
    }

    /// Limiting mean energy per sample. With equal island costs this is the
    /// analytic gated cost formula.
    pub fn expected_energy(&self, params: &GcPowerParams) -> f64 {
        self.prefix_cost(params.mu)
            + params.survival() * (self.suffix_cost(params.mu) + self.link_cost(params.nu))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EnergyReport {
    pub samples: usize,
    pub positives: usize,
    pub negatives: usize,
    pub negatives_stopped: usize,
    pub positives_stopped: usize,
    /// Suffix island activations (non-stopped samples).
    pub wake_ups: usize,
    pub prefix_energy: f64,
    pub link_energy: f64,
    pub suffix_energy: f64,
    /// Sum of per-sample transmitted sparsity over woken samples.
    pub sparsity_sum: f64,
    pub seed: Option<u64>,
}

impl EnergyReport {
    pub fn total_energy(&self) -> f64 {
        self.prefix_energy + self.link_energy + self.suffix_energy
    }

    pub fn mean_energy(&self) -> f64 {
        self.total_energy() / self.samples as f64
    }

    /// `(rho, mu, nu, gamma)` measured from this run, such that the analytic
    /// gated cost at these rates equals the run's mean energy.
    ///
    /// Positives that were stopped by mistake behave like gated negatives, so
    /// `rho` counts surviving positives and `gamma` is the stop rate over
    /// everything else. Without incorrect stops these are the plain positive
    /// fraction and negative stop rate. Empty denominators give 0.
    pub fn measured_params(&self, mu: f64) -> GcPowerParams {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        GcPowerParams {
            rho: ratio(self.positives - self.positives_stopped, self.samples),
            mu,
            nu: if self.wake_ups == 0 {
                0.0
            } else {
                self.sparsity_sum / self.wake_ups as f64
            },
            gamma: ratio(
                self.negatives_stopped + self.positives_stopped,
                self.negatives + self.positives_stopped,
            ),
        }
    }

    fn add_sample(
        &mut self,
        dep: &Deployment,
        mu: f64,
        positive: bool,
        stopped: bool,
        nu: f64,
    ) -> TraceRecord {
        self.samples += 1;
        if positive {
            self.positives += 1;
            self.positives_stopped += stopped as usize;
        } else {
            self.negatives += 1;
            self.negatives_stopped += stopped as usize;
        }
        let prefix = dep.prefix_cost(mu);
        let (link, suffix) = if stopped {
            (0.0, 0.0)
        } else {
            self.wake_ups += 1;
            self.sparsity_sum += nu;
            (dep.link_cost(nu), dep.suffix_cost(mu))
        };
        self.prefix_energy += prefix;
        self.link_energy += link;
        self.suffix_energy += suffix;
        TraceRecord {
            sample: 0,
            positive,
            stopped,
            prefix_energy: prefix,
            link_energy: link,
            suffix_energy: suffix,
        }
    }

    fn merge(mut self, other: &EnergyReport) -> Self {
        self.samples += other.samples;
        self.positives += other.positives;
        self.negatives += other.negatives;
        self.negatives_stopped += other.negatives_stopped;
        self.positives_stopped += other.positives_stopped;
        self.wake_ups += other.wake_ups;
        self.prefix_energy += other.prefix_energy;
        self.link_energy += other.link_energy;
        self.suffix_energy += other.suffix_energy;
        self.sparsity_sum += other.sparsity_sum;
        self
    }
}

/// Per-sample energy record for trace files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub sample: usize,
    pub positive: bool,
    pub stopped: bool,
    pub prefix_energy: f64,
    pub link_energy: f64,
    pub suffix_energy: f64,
}

fn check_samples(n: usize) -> Result<()> {
    if n == 0 {
        return Err(crate::error::Error::Empty("sample stream"));
    }
    Ok(())
}

/// Monte Carlo run with Bernoulli draws: positive with probability `rho`,
/// negatives stopped with probability `gamma`.
pub fn simulate_analytic(
    dep: &Deployment,
    params: &GcPowerParams,
    n: usize,
    seed: u64,
) -> Result<EnergyReport> {
    simulate_analytic_inner(dep, params, n, seed, None)
}

/// As [`simulate_analytic`], also returning one trace record per sample.
pub fn simulate_analytic_traced(
    dep: &Deployment,
    params: &GcPowerParams,
    n: usize,
    seed: u64,
) -> Result<(EnergyReport, Vec<TraceRecord>)> {
    let mut trace = Vec::with_capacity(n);
    let report = simulate_analytic_inner(dep, params, n, seed, Some(&mut trace))?;
    Ok((report, trace))
}

fn simulate_analytic_inner(
    dep: &Deployment,
    params: &GcPowerParams,
    n: usize,
    seed: u64,
    trace: Option<&mut Vec<TraceRecord>>,
) -> Result<EnergyReport> {
    params.validate()?;
    dep.validate()?;
    check_samples(n)?;
    let chunks = n.div_ceil(CHUNK);
    let want_trace = trace.is_some();
    let parts: Vec<(EnergyReport, Vec<TraceRecord>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = child_rng(seed, c as u64);
            let len = CHUNK.min(n - c * CHUNK);
            let mut report = EnergyReport::default();
            let mut records = Vec::with_capacity(if want_trace { len } else { 0 });
            for i in 0..len {
                let positive = rng.gen_bool(params.rho);
                let stopped = !positive && rng.gen_bool(params.gamma);
                let mut rec = report.add_sample(dep, params.mu, positive, stopped, params.nu);
                if want_trace {
                    rec.sample = c * CHUNK + i;
                    records.push(rec);
                }
            }
            (report, records)
        })
        .collect();
    let mut total = EnergyReport {
        seed: Some(seed),
        ..Default::default()
    };
    let mut all = Vec::new();
    for (r, recs) in parts {
        total = total.merge(&r);
        all.extend(recs);
    }
    if let Some(t) = trace {
        *t = all;
    }
    Ok(total)
}

/// Energy accounting driven by actual cascade decisions.
pub fn energy_from_decisions(
    dep: &Deployment,
    mu: f64,
    decisions: &[InferenceDecision],
    labels: &[Class],
) -> Result<(EnergyReport, Vec<TraceRecord>)> {
    dep.validate()?;
    check_range("mu", mu, 0.0, 1.0)?;
    check_samples(decisions.len())?;
    let mut report = EnergyReport::default();
    let mut trace = Vec::with_capacity(decisions.len());
    for (i, (d, &label)) in decisions.iter().zip(labels).enumerate() {
        let nu = d.transmitted_sparsity.unwrap_or(0.0);
        let mut rec = report.add_sample(dep, mu, label != BACKGROUND, d.stopped(), nu);
        rec.sample = i;
        trace.push(rec);
    }
    Ok((report, trace))
}

/// Runs the cascade over `data` and accounts energy per sample.
pub fn simulate_empirical(
    dep: &Deployment,
    cascade: &Cascade,
    data: &Dataset,
) -> Result<(EnergyReport, Vec<TraceRecord>)> {
    check_samples(data.len())?;
    let decisions = cascade.run(data)?;
    energy_from_decisions(dep, cascade.model().mu(), &decisions, &data.classes)
}
