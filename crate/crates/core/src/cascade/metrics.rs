//! Gating rates, precision/recall, ROC curves, and their aggregation over
//! repeated runs.

use serde::Serialize;

use super::runtime::InferenceDecision;
use crate::data::{Class, BACKGROUND};
use crate::error::{Error, Result};

/// One row of the decision log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecisionRecord {
    pub sample_id: usize,
    pub label: Class,
    pub gate_score: f64,
    pub stopped: bool,
    pub predicted_class: Class,
    pub depth_fraction: f64,
}

pub fn decision_log(decisions: &[InferenceDecision], labels: &[Class]) -> Vec<DecisionRecord> {
    decisions
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (d, &label))| DecisionRecord {
            sample_id: i,
            label,
            gate_score: d.gate_score,
            stopped: d.stopped(),
            predicted_class: d.predicted_class(),
            depth_fraction: d.stopped_at_depth_fraction,
        })
        .collect()
}

/// Additive counters; merging is associative and commutative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Counts {
    pub positives: usize,
    pub negatives: usize,
    pub positives_stopped: usize,
    pub negatives_stopped: usize,
    /// Samples predicted as their own positive class.
    pub true_positive: usize,
    /// Samples predicted as any positive class.
    pub predicted_positive: usize,
    pub sparsity_sum: f64,
    pub sparsity_samples: usize,
}

impl Counts {
    pub fn record(&mut self, label: Class, predicted: Class, stopped: bool, sparsity: Option<f64>) {
        if label == BACKGROUND {
            self.negatives += 1;
            self.negatives_stopped += stopped as usize;
        } else {
            self.positives += 1;
            self.positives_stopped += stopped as usize;
        }
        if predicted != BACKGROUND {
            self.predicted_positive += 1;
            self.true_positive += (predicted == label) as usize;
        }
        if let Some(s) = sparsity {
            self.sparsity_sum += s;
            self.sparsity_samples += 1;
        }
    }

    pub fn merge(mut self, other: Counts) -> Counts {
        self.positives += other.positives;
        self.negatives += other.negatives;
        self.positives_stopped += other.positives_stopped;
        self.negatives_stopped += other.negatives_stopped;
        self.true_positive += other.true_positive;
        self.predicted_positive += other.predicted_positive;
        self.sparsity_sum += other.sparsity_sum;
        self.sparsity_samples += other.sparsity_samples;
        self
    }

    pub fn from_decisions(decisions: &[InferenceDecision], labels: &[Class]) -> Counts {
        let mut c = Counts::default();
        for (d, &label) in decisions.iter().zip(labels) {
            c.record(
                label,
                d.predicted_class(),
                d.stopped(),
                d.transmitted_sparsity,
            );
        }
        c
    }

    /// Counts for a classifier without gating.
    pub fn from_predictions(predicted: &[Class], labels: &[Class]) -> Counts {
        let mut c = Counts::default();
        for (&p, &label) in predicted.iter().zip(labels) {
            c.record(label, p, false, None);
        }
        c
    }

    pub fn stats(&self) -> RunStats {
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        RunStats {
            correct_gating_rate: ratio(self.negatives_stopped, self.negatives),
            incorrect_gating_rate: ratio(self.positives_stopped, self.positives),
            sparsity: (self.sparsity_samples > 0)
                .then(|| self.sparsity_sum / self.sparsity_samples as f64),
            precision: ratio(self.true_positive, self.predicted_positive),
            recall: ratio(self.true_positive, self.positives),
        }
    }
}

/// Per-run metrics. `None` marks a rate whose denominator is empty.
///
/// Precision and recall are micro-averaged over the positive classes:
/// precision is the share of positive-class predictions that name the right
/// class, recall the share of positive samples predicted as their class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub correct_gating_rate: Option<f64>,
    pub incorrect_gating_rate: Option<f64>,
    /// Mean transmitted sparsity over samples that reached the suffix.
    pub sparsity: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub const METRIC_NAMES: [&str; 5] = [
    "correct_gating_rate",
    "incorrect_gating_rate",
    "sparsity",
    "precision",
    "recall",
];

impl RunStats {
    pub fn values(&self) -> [Option<f64>; 5] {
        [
            self.correct_gating_rate,
            self.incorrect_gating_rate,
            self.sparsity,
            self.precision,
            self.recall,
        ]
    }
}

/// Mean and unbiased sample variance over the runs where a metric is
/// defined. Variance is 0 for a single run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub runs: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Summary {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return Summary {
                mean: None,
                variance: None,
                runs: 0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let variance = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Summary {
            mean: Some(mean),
            variance: Some(variance),
            runs: v.len(),
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> Option<f64> {
        match (self.variance, self.runs) {
            (Some(v), n) if n > 0 => Some((v / n as f64).sqrt()),
            _ => None,
        }
    }
}

/// Metrics of several independent runs with their summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingStats {
    pub runs: Vec<RunStats>,
    pub summaries: [Summary; 5],
}

impl GatingStats {
    pub fn from_runs(runs: Vec<RunStats>) -> Self {
        let summaries = std::array::from_fn(|m| Summary::of(runs.iter().map(|r| r.values()[m])));
        GatingStats { runs, summaries }
    }

    pub fn summary(&self, metric: &str) -> Option<&Summary> {
        METRIC_NAMES
            .iter()
            .position(|&n| n == metric)
            .map(|i| &self.summaries[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    /// Samples with score `>= threshold` are stopped.
    pub threshold: f64,
    /// Fraction of positives stopped.
    pub false_stop_rate: f64,
    /// Fraction of negatives stopped.
    pub correct_stop_rate: f64,
}

/// ROC of the stopping rule, sweeping the threshold from above every score
/// down through each distinct score. Both rates are non-decreasing along
/// the returned list.
pub fn roc_curve(positive_scores: &[f64], negative_scores: &[f64]) -> Result<Vec<RocPoint>> {
    if positive_scores.is_empty() {
        return Err(Error::Empty("positive score list"));
    }
    if negative_scores.is_empty() {
        return Err(Error::Empty("negative score list"));
    }
    let desc = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    };
    let (pos, neg) = (desc(positive_scores), desc(negative_scores));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        false_stop_rate: 0.0,
        correct_stop_rate: 0.0,
    }];
    let (mut i, mut j) = (0, 0);
    while i < pos.len() || j < neg.len() {
        let next = match (pos.get(i), neg.get(j)) {
            (Some(&p), Some(&q)) => p.max(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        while i < pos.len() && pos[i] >= next {
            i += 1;
        }
        while j < neg.len() && neg[j] >= next {
            j += 1;
        }
        points.push(RocPoint {
            threshold: next,
            false_stop_rate: i as f64 / np,
            correct_stop_rate: j as f64 / nn,
        });
    }
    Ok(points)
}

/// Fraction of `scores` at or above `tau`.
pub fn stop_rate(scores: &[f64], tau: f64) -> Option<f64> {
    (!scores.is_empty())
        .then(|| scores.iter().filter(|&&s| s >= tau).count() as f64 / scores.len() as f64)
}
