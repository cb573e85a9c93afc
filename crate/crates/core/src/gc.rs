//! The gated compression layer: a binary gate head that scores how likely a
//! sample is background, plus a per-feature mask that sparsifies the
//! features handed to the rest of the network.

use crate::error::{check_range, Error, Result};
use crate::nn::{mean_rows, Dense};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcMode {
    /// Features are scaled by the soft mask `sigmoid(mask_logits / T)`.
    Train,
    /// Features are multiplied by the binarized mask.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcLayer {
    pub gate: Dense,
    pub mask_logits: ParamId,
    alpha: f64,
    lambda_gc: f64,
    mu: f64,
    temperature: f64,
}

/// Plain-route result for a batch of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct GcForwardOutput {
    /// Masked features, same shape as the input features.
    pub gated_features: Tensor,
    /// One score per sample: probability that the sample is background.
    pub gate_scores: Vec<f64>,
    pub soft_mask: Vec<f64>,
    pub binary_mask: Vec<f64>,
}

/// Graph-route result.
#[derive(Clone, Copy, Debug)]
pub struct GcGraphOutput {
    pub gated: Var,
    /// `[samples, 1]` pre-sigmoid gate values.
    pub gate_logits: Var,
    pub gate_scores: Var,
    /// `[1, width]`
    pub soft_mask: Var,
}

/// Loss components recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GcLossVars {
    pub task: Var,
    pub gate: Var,
    pub sparsity: Var,
    pub total: Var,
}

/// Evaluated loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GcLoss {
    pub task: f64,
    pub gate: f64,
    pub sparsity: f64,
    pub total: f64,
}

impl GcLoss {
    /// `task + lambda_gc * (alpha * gate + (1 - alpha) * sparsity)`
    pub fn compose(task: f64, gate: f64, sparsity: f64, alpha: f64, lambda_gc: f64) -> Self {
        GcLoss {
            task,
            gate,
            sparsity,
            total: task + lambda_gc * (alpha * gate + (1.0 - alpha) * sparsity),
        }
    }

    pub fn read(g: &Graph, vars: &GcLossVars) -> Self {
        GcLoss {
            task: g.value(vars.task).item(),
            gate: g.value(vars.gate).item(),
            sparsity: g.value(vars.sparsity).item(),
            total: g.value(vars.total).item(),
        }
    }
}

/// Fraction of exactly-zero entries.
pub fn measure_sparsity(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("transmitted tensor"));
    }
    Ok(values.iter().filter(|&&v| v == 0.0).count() as f64 / values.len() as f64)
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::OutOfRange {
            name: "mu",
            value: mu,
            reason: "insertion depth fraction must lie strictly between 0 and 1",
        });
    }
    Ok(())
}

impl GcLayer {
    /// Registers gate and mask parameters under `gc.*`. Mask logits start
    /// at `mask_init` (positive means open).
    pub fn new(
        store: &mut ParamStore,
        width: usize,
        alpha: f64,
        lambda_gc: f64,
        mu: f64,
        mask_init: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_range("alpha", alpha, 0.0, 1.0)?;
        check_range("lambda_gc", lambda_gc, 0.0, f64::MAX)?;
        check_mu(mu)?;
        let gate = Dense::new(store, "gc.gate", width, 1, rng);
        let mask_logits = store.add("gc.mask", Tensor::full(&[1, width], mask_init));
        Ok(GcLayer {
            gate,
            mask_logits,
            alpha,
            lambda_gc,
            mu,
            temperature: 1.0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Always `1 - alpha`.
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn lambda_gc(&self) -> f64 {
        self.lambda_gc
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        check_range("alpha", alpha, 0.0, 1.0)?;
        self.alpha = alpha;
        Ok(())
    }

    pub fn set_lambda_gc(&mut self, lambda_gc: f64) -> Result<()> {
        check_range("lambda_gc", lambda_gc, 0.0, f64::MAX)?;
        self.lambda_gc = lambda_gc;
        Ok(())
    }

    /// Soft mask temperature `T`. Lower values make the training mask
    /// closer to the binary inference mask; the binarization is unaffected.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::OutOfRange {
                name: "temperature",
                value: temperature,
                reason: "mask temperature must be positive",
            });
        }
        self.temperature = temperature;
        Ok(())
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.get(self.mask_logits).numel()
    }

    fn check_width(&self, store: &ParamStore, cols: usize) -> Result<()> {
        let width = self.width(store);
        if cols != width {
            return Err(Error::shape(
                "gc_forward",
                format!("feature width {cols} does not match mask width {width}"),
            ));
        }
        Ok(())
    }

    pub fn soft_mask(&self, store: &ParamStore) -> Vec<f64> {
        let t = self.temperature;
        store
            .get(self.mask_logits)
            .data()
            .iter()
            .map(|&l| sigmoid(l / t))
            .collect()
    }

    /// `1[sigmoid(logit) >= 0.5]`, i.e. `1[logit >= 0]`.
    pub fn binary_mask(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(self.mask_logits)
            .data()
            .iter()
            .map(|&l| if sigmoid(l) >= 0.5 { 1.0 } else { 0.0 })
            .collect()
    }

    /// Graph route. `features` stacks `group` rows per sample; the gate reads
    /// the per-sample mean of the unmasked features.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        group: usize,
        mode: GcMode,
    ) -> Result<GcGraphOutput> {
        self.check_width(store, g.value(features).cols())?;
        let pooled = if group == 1 {
            features
        } else {
            g.mean_groups(features, group)?
        };
        let gate_logits = self.gate.forward(g, store, pooled)?;
        let gate_scores = g.sigmoid(gate_logits);
        let logits = g.param(store, self.mask_logits);
        let logits = if self.temperature == 1.0 {
            logits
        } else {
            g.scale(logits, 1.0 / self.temperature)
        };
        let soft_mask = g.sigmoid(logits);
        let gated = match mode {
            GcMode::Train => g.mul_row(features, soft_mask)?,
            GcMode::Infer => {
                let hard = g.input(Tensor::row(self.binary_mask(store)));
                g.mul_row(features, hard)?
            }
        };
        Ok(GcGraphOutput {
            gated,
            gate_logits,
            gate_scores,
            soft_mask,
        })
    }

    /// Plain route.
    pub fn eval(
        &self,
        store: &ParamStore,
        features: &Tensor,
        group: usize,
        mode: GcMode,
    ) -> Result<GcForwardOutput> {
        self.check_width(store, features.cols())?;
        let pooled = mean_rows(features, group)?;
        let gate_scores = self
            .gate
            .eval(store, &pooled)?
            .data()
            .iter()
            .map(|&z| sigmoid(z))
            .collect();
        let soft_mask = self.soft_mask(store);
        let binary_mask = self.binary_mask(store);
        let mask = match mode {
            GcMode::Train => &soft_mask,
            GcMode::Infer => &binary_mask,
        };
        let n = mask.len();
        let mut gated_features = features.clone();
        gated_features
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v *= mask[i % n]);
        Ok(GcForwardOutput {
            gated_features,
            gate_scores,
            soft_mask,
            binary_mask,
        })
    }

    /// Records `task + lambda_gc * (alpha * BCE(g, background) + beta * mean|soft_mask|)`.
    /// `background` holds 1.0 for background samples and 0.0 for positives.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &GcGraphOutput,
        task: Var,
        background: &[f64],
    ) -> Result<GcLossVars> {
        let gate = g.bce_with_logits(out.gate_logits, background)?;
        let l1 = g.l1(out.soft_mask);
        let width = g.value(out.soft_mask).numel();
        let sparsity = g.scale(l1, 1.0 / width as f64);
        let weighted_gate = g.scale(gate, self.lambda_gc * self.alpha);
        let weighted_sparsity = g.scale(sparsity, self.lambda_gc * self.beta());
        let reg = g.add(weighted_gate, weighted_sparsity)?;
        let total = g.add(task, reg)?;
        Ok(GcLossVars {
            task,
            gate,
            sparsity,
            total,
        })
    }

    pub fn write_meta(&self, ckpt: &mut Checkpoint) {
        ckpt.set_f64("gc.alpha", self.alpha);
        ckpt.set_f64("gc.lambda", self.lambda_gc);
        ckpt.set_f64("gc.mu", self.mu);
        ckpt.set_f64("gc.temperature", self.temperature);
    }

    pub fn bind(store: &ParamStore, ckpt: &Checkpoint) -> Result<Self> {
        let gate = Dense::bind(store, "gc.gate")?;
        let mask_logits = store
            .id("gc.mask")
            .ok_or_else(|| Error::Checkpoint("missing parameter `gc.mask`".into()))?;
        let alpha = ckpt.get_f64("gc.alpha")?;
        let lambda_gc = ckpt.get_f64("gc.lambda")?;
        let mu = ckpt.get_f64("gc.mu")?;
        check_range("alpha", alpha, 0.0, 1.0)?;
        check_mu(mu)?;
        let mut layer = GcLayer {
            gate,
            mask_logits,
            alpha,
            lambda_gc,
            mu,
            temperature: 1.0,
        };
        layer.set_temperature(ckpt.get_f64("gc.temperature")?)?;
        Ok(layer)
    }
}
