use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::Serialize;

use super::calibrate::GatingThreshold;
use super::model::{argmax_rows, PartitionedModel};
use crate::data::{Class, Dataset, BACKGROUND};
use crate::error::Result;
use crate::gc::{measure_sparsity, GcMode};
use crate::tensor::Tensor;

/// Samples per parallel work item.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Outcome {
    EarlyStopped,
    FullInference(Class),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceDecision {
    pub outcome: Outcome,
    pub gate_score: f64,
    /// `mu` when stopped, 1 otherwise.
    pub stopped_at_depth_fraction: f64,
    /// Zero fraction of the tensor sent to the suffix; `None` when stopped.
    pub transmitted_sparsity: Option<f64>,
}

impl InferenceDecision {
    pub fn stopped(&self) -> bool {
        self.outcome == Outcome::EarlyStopped
    }

    /// Stopped samples count as background predictions.
    pub fn predicted_class(&self) -> Class {
        match self.outcome {
            Outcome::EarlyStopped => BACKGROUND,
            Outcome::FullInference(c) => c,
        }
    }
}

/// Early-stopping inference over a partitioned model. The model is only
/// read; the suffix evaluation counter is the single piece of state.
#[derive(Debug)]
pub struct Cascade<'m> {
    model: &'m PartitionedModel,
    threshold: GatingThreshold,
    suffix_evaluations: AtomicUsize,
}

impl<'m> Cascade<'m> {
    pub fn new(model: &'m PartitionedModel, threshold: GatingThreshold) -> Self {
        Cascade {
            model,
            threshold,
            suffix_evaluations: AtomicUsize::new(0),
        }
    }

    pub fn threshold(&self) -> GatingThreshold {
        self.threshold
    }

    pub fn model(&self) -> &PartitionedModel {
        self.model
    }

    /// Number of samples that have been run through the suffix.
    pub fn suffix_evaluations(&self) -> usize {
        self.suffix_evaluations.load(Ordering::Relaxed)
    }

    pub fn infer(&self, sample: &Tensor) -> Result<InferenceDecision> {
        Ok(self.infer_batch(sample)?.remove(0))
    }

    /// Decisions for stacked samples.
    pub fn infer_batch(&self, x: &Tensor) -> Result<Vec<InferenceDecision>> {
        let t = self.model.rows_per_sample();
        let features = self.model.prefix_features(x)?;
        let gc = self
            .model
            .gc
            .eval(&self.model.store, &features, t, GcMode::Infer)?;
        let width = features.cols();
        let stride = t * width;

        let survivors: Vec<usize> = (0..gc.gate_scores.len())
            .filter(|&i| !self.threshold.stops(gc.gate_scores[i]))
            .collect();
        let mut classes = vec![BACKGROUND; gc.gate_scores.len()];
        let mut sparsity = vec![None; gc.gate_scores.len()];
        if !survivors.is_empty() {
            let mut data = Vec::with_capacity(survivors.len() * stride);
            for &i in &survivors {
                let rows = &gc.gated_features.data()[i * stride..(i + 1) * stride];
                sparsity[i] = Some(measure_sparsity(rows)?);
                data.extend_from_slice(rows);
            }
            let gated = Tensor::matrix(survivors.len() * t, width, data);
            let logits = self.model.suffix_logits(&gated)?;
            self.suffix_evaluations
                .fetch_add(survivors.len(), Ordering::Relaxed);
            for (&i, c) in survivors.iter().zip(argmax_rows(&logits)) {
                classes[i] = c;
            }
        }
        let mu = self.model.mu();
        Ok(gc
            .gate_scores
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                if self.threshold.stops(g) {
                    InferenceDecision {
                        outcome: Outcome::EarlyStopped,
                        gate_score: g,
                        stopped_at_depth_fraction: mu,
                        transmitted_sparsity: None,
                    }
                } else {
                    InferenceDecision {
                        outcome: Outcome::FullInference(classes[i]),
                        gate_score: g,
                        stopped_at_depth_fraction: 1.0,
                        transmitted_sparsity: sparsity[i],
                    }
                }
            })
            .collect())
    }

    /// Decisions for every sample of `data`, in order. Work is sharded in
    /// fixed-size chunks, so results do not depend on the thread count.
    pub fn run(&self, data: &Dataset) -> Result<Vec<InferenceDecision>> {
        let idx: Vec<usize> = (0..data.len()).collect();
        let parts: Vec<Result<Vec<InferenceDecision>>> = idx
            .par_chunks(CHUNK)
            .map(|chunk| self.infer_batch(&data.gather(chunk)))
            .collect();
        let mut out = Vec::with_capacity(data.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// Gate scores for every sample (prefix and gate only).
pub fn gate_scores(model: &PartitionedModel, data: &Dataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let t = model.rows_per_sample();
    let parts: Vec<Result<Vec<f64>>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let features = model.prefix_features(&data.gather(chunk))?;
            Ok(model
                .gc
                .eval(&model.store, &features, t, GcMode::Infer)?
                .gate_scores)
        })
        .collect();
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Gate scores split into (positives, negatives).
pub fn split_scores(scores: &[f64], data: &Dataset) -> (Vec<f64>, Vec<f64>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &s) in scores.iter().enumerate() {
        if data.is_positive(i) {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    (pos, neg)
}
