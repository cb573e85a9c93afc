use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{Class, ClassMap};
use crate::error::{Error, Result};
use crate::gc::{GcGraphOutput, GcLayer, GcLossVars, GcMode};
use crate::nn::{BackboneSpec, Network};
use crate::rng::child_rng;
use crate::tensor::{Checkpoint, Graph, ParamStore, Tensor, Var};

/// Settings for the gated compression layer of a new model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcSettings {
    /// Requested insertion depth fraction; rounded to the nearest unit.
    pub mu: f64,
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub lambda_gc: f64,
    #[serde(default = "default_mask_init")]
    pub mask_init: f64,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_mask_init() -> f64 {
    2.0
}

/// Number of prefix units for a requested depth fraction, kept in
/// `1..depth`.
pub fn split_for(mu: f64, depth: usize) -> Result<usize> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::OutOfRange {
            name: "mu",
            value: mu,
            reason: "insertion depth fraction must lie strictly between 0 and 1",
        });
    }
    Ok(((mu * depth as f64).round() as usize).clamp(1, depth - 1))
}

/// A backbone split into prefix and suffix around a gated compression
/// layer. Parameters of all three parts share one store.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedModel {
    pub network: Network,
    pub gc: GcLayer,
    /// Number of depth units in the prefix.
    pub split: usize,
    pub store: ParamStore,
    pub class_map: ClassMap,
}

/// Graph nodes of one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainForward {
    pub gc: GcGraphOutput,
    pub logits: Var,
    pub loss: GcLossVars,
}

impl PartitionedModel {
    pub fn new(
        spec: &BackboneSpec,
        class_map: ClassMap,
        settings: &GcSettings,
        seed: u64,
    ) -> Result<Self> {
        let split = split_for(settings.mu, spec.depth())?;
        let mut store = ParamStore::new();
        let mut rng = child_rng(seed, 0x6d6f64656c);
        let network = Network::new(spec, class_map.num_classes(), &mut store, &mut rng)?;
        let mu = split as f64 / spec.depth() as f64;
        let gc = GcLayer::new(
            &mut store,
            spec.width(),
            settings.alpha,
            settings.lambda_gc,
            mu,
            settings.mask_init,
            &mut rng,
        )?;
        Ok(PartitionedModel {
            network,
            gc,
            split,
            store,
            class_map,
        })
    }

    /// Prefix share of the depth, `split / depth`.
    pub fn mu(&self) -> f64 {
        self.split as f64 / self.network.depth() as f64
    }

    pub fn prefix_units(&self) -> Range<usize> {
        0..self.split
    }

    pub fn suffix_units(&self) -> Range<usize> {
        self.split..self.network.depth()
    }

    pub fn rows_per_sample(&self) -> usize {
        self.network.rows_per_sample()
    }

    /// Training forward pass over a batch: prefix, soft-masked GC, suffix and
    /// the combined loss.
    pub fn forward_train(&self, g: &mut Graph, x: Var, classes: &[Class]) -> Result<TrainForward> {
        let t = self.rows_per_sample();
        let features = self
            .network
            .forward_units(g, &self.store, x, self.prefix_units())?;
        let gc = self
            .gc
            .forward(g, &self.store, features, t, GcMode::Train)?;
        let h = self
            .network
            .forward_units(g, &self.store, gc.gated, self.suffix_units())?;
        let logits = self.network.forward_head(g, &self.store, h)?;
        let task = g.cross_entropy(logits, classes)?;
        let background: Vec<f64> = classes
            .iter()
            .map(|&c| if c == 0 { 1.0 } else { 0.0 })
            .collect();
        let loss = self.gc.loss(g, &gc, task, &background)?;
        Ok(TrainForward { gc, logits, loss })
    }

    /// Plain-route prefix output for stacked samples.
    pub fn prefix_features(&self, x: &Tensor) -> Result<Tensor> {
        self.network.eval_units(&self.store, x, self.prefix_units())
    }

    /// Suffix logits computed from gated features, skipping multiplications
    /// against masked-out entries.
    pub fn suffix_logits(&self, gated: &Tensor) -> Result<Tensor> {
        let h = self
            .network
            .eval_units(&self.store, gated, self.suffix_units())?;
        self.network.eval_head(&self.store, &h)
    }

    /// Suffix logits through the dense graph route.
    pub fn suffix_logits_dense(&self, gated: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(gated.clone());
        let h = self
            .network
            .forward_units(&mut g, &self.store, x, self.suffix_units())?;
        let logits = self.network.forward_head(&mut g, &self.store, h)?;
        Ok(g.value(logits).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        ckpt.set("kind", "partitioned");
        ckpt.set("backbone", self.network.spec.describe());
        ckpt.set("split", self.split);
        ckpt.set("classes.positive", self.class_map.describe());
        self.gc.write_meta(&mut ckpt);
        ckpt.tensors = self
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.get("kind")? != "partitioned" {
            return Err(Error::Checkpoint(
                "not a partitioned model checkpoint".into(),
            ));
        }
        let spec = BackboneSpec::parse(ckpt.get("backbone")?)?;
        let split = ckpt.get_usize("split")?;
        if split == 0 || split >= spec.depth() {
            return Err(Error::Checkpoint(format!(
                "split {split} outside 1..{}",
                spec.depth()
            )));
        }
        let class_map = ClassMap::parse(ckpt.get("classes.positive")?)?;
        let mut store = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            store.add(name.clone(), t.clone());
        }
        let network = Network::bind(&spec, &store)?;
        let gc = GcLayer::bind(&store, ckpt)?;
        let width = gc.width(&store);
        if width != spec.width() || network.classes != class_map.num_classes() {
            return Err(Error::Checkpoint(format!(
                "inconsistent checkpoint: mask width {width}, backbone width {}, {} classes",
                spec.width(),
                network.classes
            )));
        }
        if (gc.mu() - split as f64 / spec.depth() as f64).abs() > 1e-15 {
            return Err(Error::Checkpoint("recorded mu disagrees with split".into()));
        }
        Ok(PartitionedModel {
            network,
            gc,
            split,
            store,
            class_map,
        })
    }
}

/// The same backbone without a gated compression layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub network: Network,
    pub store: ParamStore,
    pub class_map: ClassMap,
}

impl BaselineModel {
    pub fn new(spec: &BackboneSpec, class_map: ClassMap, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = child_rng(seed, 0x6d6f64656c);
        let network = Network::new(spec, class_map.num_classes(), &mut store, &mut rng)?;
        Ok(BaselineModel {
            network,
            store,
            class_map,
        })
    }

    pub fn forward_train(&self, g: &mut Graph, x: Var, classes: &[Class]) -> Result<(Var, Var)> {
        let h = self
            .network
            .forward_units(g, &self.store, x, 0..self.network.depth())?;
        let logits = self.network.forward_head(g, &self.store, h)?;
        let loss = g.cross_entropy(logits, classes)?;
        Ok((logits, loss))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self
            .network
            .eval_units(&self.store, x, 0..self.network.depth())?;
        self.network.eval_head(&self.store, &h)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<Class>> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<Class> {
    (0..logits.rows())
        .map(|r| {
            logits
                .row_slice(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
