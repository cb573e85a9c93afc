use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cascade::{BaselineModel, PartitionedModel};
use crate::data::{Class, Dataset};
use crate::error::{Error, Result};
use crate::gc::GcLoss;
use crate::rng::child_rng;
use crate::tensor::{AdamConfig, AdamState, Graph, LrSchedule, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Anneals the soft mask temperature over the run; fixed at 1 when
    /// absent.
    #[serde(default)]
    pub mask_temperature: Option<TemperatureSchedule>,
}

/// Geometric interpolation from `initial` at the first step to `final`
/// after `anneal_fraction` of the run, then held.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    #[serde(default = "full_run")]
    pub anneal_fraction: f64,
}

fn full_run() -> f64 {
    1.0
}

impl TemperatureSchedule {
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        let anneal_steps = (self.anneal_fraction * total_steps as f64).ceil() as usize;
        if anneal_steps <= 1 {
            return self.last;
        }
        let t = step.min(anneal_steps - 1) as f64 / (anneal_steps - 1) as f64;
        self.initial * (self.last / self.initial).powf(t)
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if let Some(t) = &self.mask_temperature {
            if !(t.initial > 0.0 && t.last > 0.0 && t.initial.is_finite() && t.last.is_finite()) {
                return Err(Error::Config("mask temperatures must be positive".into()));
            }
            if !(t.anneal_fraction > 0.0 && t.anneal_fraction <= 1.0) {
                return Err(Error::Config(
                    "mask_temperature.anneal_fraction must lie in (0, 1]".into(),
                ));
            }
        }
        self.schedule.validate()
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Loss components after one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub learning_rate: f64,
    pub task: f64,
    pub gate: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// A model trainable by [`train`].
/// Reads the loss components back out of a finished forward pass.
pub type LossParts = Box<dyn Fn(&Graph) -> GcLoss>;

pub trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Builds the loss for one batch; returns the total and its components.
    fn batch_loss(&self, g: &mut Graph, x: Var, classes: &[Class]) -> Result<(Var, LossParts)>;
    fn set_mask_temperature(&mut self, _temperature: f64) -> Result<()> {
        Ok(())
    }
}

impl Trainable for PartitionedModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(&self, g: &mut Graph, x: Var, classes: &[Class]) -> Result<(Var, LossParts)> {
        let fwd = self.forward_train(g, x, classes)?;
        let vars = fwd.loss;
        Ok((vars.total, Box::new(move |g| GcLoss::read(g, &vars))))
    }

    fn set_mask_temperature(&mut self, temperature: f64) -> Result<()> {
        self.gc.set_temperature(temperature)
    }
}

impl Trainable for BaselineModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn batch_loss(&self, g: &mut Graph, x: Var, classes: &[Class]) -> Result<(Var, LossParts)> {
        let (_, loss) = self.forward_train(g, x, classes)?;
        Ok((
            loss,
            Box::new(move |g| {
                let v = g.value(loss).item();
                GcLoss {
                    task: v,
                    gate: 0.0,
                    sparsity: 0.0,
                    total: v,
                }
            }),
        ))
    }
}

/// Mini-batch Adam over `data`, reshuffled each epoch from `seed`. Returns
/// one log entry per step. A non-finite loss aborts with
/// [`Error::Divergence`].
pub fn train<M: Trainable>(
    model: &mut M,
    cfg: &TrainingConfig,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<TrainLogEntry>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut adam = AdamState::new(model.store(), cfg.adam.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = cfg.epochs * cfg.steps_per_epoch(data.len());
    let mut log = Vec::with_capacity(total_steps);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut child_rng(seed, epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            if let Some(t) = &cfg.mask_temperature {
                model.set_mask_temperature(t.at(adam.step(), total_steps))?;
            }
            let classes: Vec<Class> = batch.iter().map(|&i| data.classes[i]).collect();
            let (loss, grads) = {
                let mut g = Graph::new();
                let x = g.input(data.gather(batch));
                let (total, read) = model.batch_loss(&mut g, x, &classes)?;
                let loss = read(&g);
                if !loss.total.is_finite() {
                    return Err(Error::Divergence {
                        step: adam.step(),
                        loss: loss.total,
                    });
                }
                (loss, g.backward(total)?.for_store(model.store()))
            };
            let learning_rate = cfg.schedule.rate(adam.step());
            adam.update(model.store_mut(), &grads, &cfg.schedule)?;
            log.push(TrainLogEntry {
                step: adam.step(),
                epoch,
                learning_rate,
                task: loss.task,
                gate: loss.gate,
                sparsity: loss.sparsity,
                total: loss.total,
            });
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::GcSettings;
    use crate::data::generate_dataset;
    use crate::harness::config::tiny_task;
    use crate::tensor::write_checkpoint;

    fn model(seed: u64) -> PartitionedModel {
        let cfg = tiny_task();
        let settings = GcSettings {
            mu: 0.5,
            alpha: 0.5,
            lambda_gc: 1.0,
            mask_init: 0.5,
        };
        PartitionedModel::new(&cfg.backbone, cfg.dataset.class_map(), &settings, seed).unwrap()
    }

    fn bytes(m: &PartitionedModel) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(&m.to_checkpoint(), &mut out).unwrap();
        out
    }

    #[test]
    fn zero_epochs_leave_initialization() {
        let mut cfg = tiny_task();
        cfg.training.epochs = 0;
        let data = generate_dataset(&cfg.dataset).unwrap();
        let mut m = model(3);
        let log = train(&mut m, &cfg.training, &data.train, 1).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, model(3));
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let cfg = tiny_task();
        let data = generate_dataset(&cfg.dataset).unwrap();
        let run = |seed| {
            let mut m = model(3);
            let log = train(&mut m, &cfg.training, &data.train, seed).unwrap();
            (bytes(&m), log)
        };
        let (a, la) = run(5);
        let (b, lb) = run(5);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a, run(6).0);
        assert_eq!(
            la.len(),
            cfg.training.epochs * cfg.training.steps_per_epoch(data.train.len())
        );
    }

    #[test]
    fn temperature_follows_schedule() {
        let s = TemperatureSchedule {
            initial: 1.0,
            last: 0.01,
            anneal_fraction: 1.0,
        };
        assert_eq!(s.at(0, 101), 1.0);
        assert!((s.at(50, 101) - 0.1).abs() < 1e-12);
        assert!((s.at(100, 101) - 0.01).abs() < 1e-15);
        assert_eq!(s.at(500, 101), s.at(100, 101));
        let half = TemperatureSchedule {
            anneal_fraction: 0.5,
            ..s
        };
        // ceil(0.5 * 101) = 51 anneal steps, so step 25 is the geometric midpoint.
        assert!((half.at(25, 101) - 0.1).abs() < 1e-12);
        assert!((half.at(50, 101) - 0.01).abs() < 1e-15);
        assert_eq!(half.at(50, 101), half.at(100, 101));

        let mut cfg = tiny_task();
        cfg.training.mask_temperature = Some(s);
        let data = generate_dataset(&cfg.dataset).unwrap();
        let mut m = model(1);
        train(&mut m, &cfg.training, &data.train, 0).unwrap();
        assert!((m.gc.temperature() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_reported_as_divergence() {
        let mut cfg = tiny_task();
        cfg.training.schedule = LrSchedule::Constant { rate: 1e300 };
        let data = generate_dataset(&cfg.dataset).unwrap();
        let mut m = model(1);
        match train(&mut m, &cfg.training, &data.train, 0) {
            Err(Error::Divergence { step, .. }) => assert!(step > 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn logged_rate_is_the_scheduled_rate() {
        let mut cfg = tiny_task();
        cfg.training.schedule = LrSchedule::CosineDecay {
            initial: 1e-2,
            decay_steps: 10,
            final_fraction: 0.1,
        };
        let data = generate_dataset(&cfg.dataset).unwrap();
        let mut m = model(1);
        let log = train(&mut m, &cfg.training, &data.train, 0).unwrap();
        for (i, e) in log.iter().enumerate() {
            assert_eq!(e.step, i + 1);
            assert_eq!(e.learning_rate, cfg.training.schedule.rate(i));
        }
    }
}
