//! Synthetic always-on datasets.
//!
//! Each generator draws samples from a few positive classes plus a
//! background made of several sub-classes. Original labels are
//! `0..num_positive_classes` for positives and higher values for background
//! sub-classes; [`ClassMap`] folds every non-positive label into a single
//! background class.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_rng, Rng};
use crate::tensor::Tensor;

/// Remapped class index used by classifiers. Background is 0, positive
/// classes are `1..=K`.
pub type Class = usize;
pub const BACKGROUND: Class = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    /// Original labels treated as positive, in class order.
    pub positive_labels: Vec<u32>,
}

impl ClassMap {
    pub fn new(positive_labels: Vec<u32>) -> Self {
        ClassMap { positive_labels }
    }

    /// Positives `0..k` map to classes `1..=k`.
    pub fn first_k(k: usize) -> Self {
        ClassMap::new((0..k as u32).collect())
    }

    pub fn remap(&self, label: u32) -> Class {
        self.positive_labels
            .iter()
            .position(|&l| l == label)
            .map(|i| i + 1)
            .unwrap_or(BACKGROUND)
    }

    pub fn num_positive(&self) -> usize {
        self.positive_labels.len()
    }

    /// Classifier output width: positives plus background.
    pub fn num_classes(&self) -> usize {
        self.positive_labels.len() + 1
    }

    pub fn describe(&self) -> String {
        self.positive_labels
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad class label `{t}`")))
            })
            .collect::<Result<Vec<u32>>>()
            .map(ClassMap::new)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    /// Isotropic Gaussian clusters whose centers lie on a sphere of radius
    /// `separation`.
    GaussianClusters {
        dim: usize,
        background_clusters: usize,
        separation: f64,
        noise: f64,
    },
    /// Positive class `k` lies on a ring of radius `radius + k * ring_gap` in
    /// the first two coordinates; background is an isotropic Gaussian.
    RingVsNoise {
        dim: usize,
        radius: f64,
        ring_gap: f64,
        ring_noise: f64,
        background_std: f64,
    },
    /// Sequences of Gaussian noise tokens. A positive sequence carries its
    /// class prototype at one random position; a background sequence carries
    /// one of `distractors` background prototypes instead.
    TokenSequences {
        token_dim: usize,
        tokens: usize,
        distractors: usize,
        separation: f64,
        noise: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub num_positive_classes: usize,
    pub rho: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default = "yes")]
    pub stratified: bool,
}

fn yes() -> bool {
    true
}

/// Stacked samples. Sample `i` occupies rows
/// `i * rows_per_sample..(i + 1) * rows_per_sample` of `inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub rows_per_sample: usize,
    pub labels: Vec<u32>,
    pub classes: Vec<Class>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.inputs.cols()
    }

    pub fn sample(&self, i: usize) -> Tensor {
        self.gather(&[i])
    }

    /// Inputs of the listed samples stacked in order.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let stride = self.rows_per_sample * self.cols();
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&self.inputs.data()[i * stride..(i + 1) * stride]);
        }
        Tensor::matrix(idx.len() * self.rows_per_sample, self.cols(), data)
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.classes[i] != BACKGROUND
    }

    pub fn positive_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c != BACKGROUND).count()
    }

    /// Float copy of inputs for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in self.inputs.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub class_map: ClassMap,
    pub task: Task,
}

/// Generator parameters resolved into concrete centers / prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub generator: Generator,
    pub num_positive_classes: usize,
    /// Cluster centers or token prototypes, one row per original label.
    pub prototypes: Vec<Vec<f64>>,
}

fn random_direction(dim: usize, radius: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x * radius / norm).collect();
        }
    }
}

impl Generator {
    pub fn rows_per_sample(&self) -> usize {
        match self {
            Generator::TokenSequences { tokens, .. } => *tokens,
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Generator::GaussianClusters { dim, .. } | Generator::RingVsNoise { dim, .. } => *dim,
            Generator::TokenSequences { token_dim, .. } => *token_dim,
        }
    }

    /// Number of background sub-classes.
    pub fn background_labels(&self) -> usize {
        match self {
            Generator::GaussianClusters {
                background_clusters,
                ..
            } => *background_clusters,
            Generator::RingVsNoise { .. } => 1,
            Generator::TokenSequences { distractors, .. } => *distractors,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Generator::GaussianClusters {
                dim,
                background_clusters,
                separation,
                noise,
            } => *dim > 0 && *background_clusters > 0 && *separation >= 0.0 && *noise > 0.0,
            Generator::RingVsNoise {
                dim,
                radius,
                ring_gap,
                ring_noise,
                background_std,
            } => {
                *dim >= 2
                    && *radius > 0.0
                    && *ring_gap >= 0.0
                    && *ring_noise >= 0.0
                    && *background_std > 0.0
            }
            Generator::TokenSequences {
                token_dim,
                tokens,
                distractors,
                separation,
                noise,
            } => {
                *token_dim > 0
                    && *tokens > 0
                    && *distractors > 0
                    && *separation >= 0.0
                    && *noise > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid generator parameters: {self:?}"
            )))
        }
    }
}

impl Task {
    pub fn new(generator: &Generator, num_positive_classes: usize, seed: u64) -> Result<Self> {
        generator.validate()?;
        if num_positive_classes == 0 {
            return Err(Error::Config("need at least one positive class".into()));
        }
        let mut rng = child_rng(seed, 0);
        let labels = num_positive_classes + generator.background_labels();
        let prototypes = match generator {
            Generator::GaussianClusters {
                dim, separation, ..
            } => (0..labels)
                .map(|_| random_direction(*dim, *separation, &mut rng))
                .collect(),
            Generator::RingVsNoise { dim, .. } => vec![vec![0.0; *dim]; labels],
            Generator::TokenSequences {
                token_dim,
                separation,
                ..
            } => (0..labels)
                .map(|_| random_direction(*token_dim, *separation, &mut rng))
                .collect(),
        };
        Ok(Task {
            generator: generator.clone(),
            num_positive_classes,
            prototypes,
        })
    }

    /// Appends the rows of one sample with original label `label`.
    fn draw(&self, label: u32, rng: &mut Rng, out: &mut Vec<f64>) {
        let normal = |rng: &mut Rng| -> f64 { rng.sample(StandardNormal) };
        let k = self.num_positive_classes as u32;
        match &self.generator {
            Generator::GaussianClusters { noise, .. } => {
                out.extend(
                    self.prototypes[label as usize]
                        .iter()
                        .map(|c| c + noise * normal(rng)),
                );
            }
            Generator::RingVsNoise {
                dim,
                radius,
                ring_gap,
                ring_noise,
                background_std,
            } => {
                if label < k {
                    let r = radius + label as f64 * ring_gap;
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    out.push(r * theta.cos() + ring_noise * normal(rng));
                    out.push(r * theta.sin() + ring_noise * normal(rng));
                    out.extend((2..*dim).map(|_| normal(rng)));
                } else {
                    out.extend((0..*dim).map(|_| background_std * normal(rng)));
                }
            }
            Generator::TokenSequences {
                token_dim,
                tokens,
                noise,
                ..
            } => {
                let slot = rng.gen_range(0..*tokens);
                for t in 0..*tokens {
                    for j in 0..*token_dim {
                        let base = if t == slot {
                            self.prototypes[label as usize][j]
                        } else {
                            0.0
                        };
                        out.push(base + noise * normal(rng));
                    }
                }
            }
        }
    }

    /// Draws `n` samples; `positives` fixes the positive count when given.
    pub fn sample(
        &self,
        n: usize,
        rho: f64,
        positives: Option<usize>,
        class_map: &ClassMap,
        rng: &mut Rng,
    ) -> Dataset {
        let k = self.num_positive_classes as u32;
        let m = self.generator.background_labels() as u32;
        let mut is_pos: Vec<bool> = match positives {
            Some(p) => (0..n).map(|i| i < p).collect(),
            None => (0..n).map(|_| rng.gen_bool(rho)).collect(),
        };
        is_pos.shuffle(rng);
        let rows = self.generator.rows_per_sample();
        let mut data = Vec::with_capacity(n * rows * self.generator.cols());
        let mut labels = Vec::with_capacity(n);
        for pos in is_pos {
            let label = if pos {
                rng.gen_range(0..k)
            } else {
                k + rng.gen_range(0..m)
            };
            self.draw(label, rng, &mut data);
            labels.push(label);
        }
        let classes = labels.iter().map(|&l| class_map.remap(l)).collect();
        Dataset {
            inputs: Tensor::matrix(n * rows, self.generator.cols(), data),
            rows_per_sample: rows,
            labels,
            classes,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::OutOfRange {
                name: "rho",
                value: self.rho,
                reason: "positive fraction must lie strictly between 0 and 1",
            });
        }
        for (name, n) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            if self.stratified {
                let p = (self.rho * n as f64).round() as usize;
                if p == 0 || p == n {
                    return Err(Error::Config(format!(
                        "{name} = {n} with rho = {} leaves a split without positives or negatives",
                        self.rho
                    )));
                }
            }
        }
        if self.num_positive_classes == 0 {
            return Err(Error::Config("need at least one positive class".into()));
        }
        self.generator.validate()
    }

    pub fn class_map(&self) -> ClassMap {
        ClassMap::first_k(self.num_positive_classes)
    }

    pub fn task(&self) -> Result<Task> {
        Task::new(&self.generator, self.num_positive_classes, self.seed)
    }

    /// Draws an extra split of `n` samples from the same task using stream
    /// `tag` (tags 1 to 3 are the standard splits).
    pub fn draw_split(&self, task: &Task, n: usize, tag: u64) -> Dataset {
        let positives = self
            .stratified
            .then(|| (self.rho * n as f64).round() as usize);
        task.sample(
            n,
            self.rho,
            positives,
            &self.class_map(),
            &mut child_rng(self.seed, tag),
        )
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let task = spec.task()?;
    Ok(Splits {
        train: spec.draw_split(&task, spec.n_train, 1),
        val: spec.draw_split(&task, spec.n_val, 2),
        test: spec.draw_split(&task, spec.n_test, 3),
        class_map: spec.class_map(),
        task,
    })
}
