#![allow(dead_code)]

use gatecade::error::Result;
use gatecade::rng::{rng, Rng};
use gatecade::tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng as _;

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`: relative error, read as absolute error
/// for gradients that are essentially zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn random_tensor(rows: usize, cols: usize, r: &mut Rng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| r.gen_range(-1.5..1.5)).collect(),
    )
}

/// Entries bounded away from zero, for ops with a kink there.
pub fn kink_free_tensor(rows: usize, cols: usize, r: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = r.gen_range(0.1..1.5);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn scalar_of(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).expect("graph builds");
    g.value(out).item()
}

/// Largest relative error between backprop and central differences over
/// every entry of every input.
pub fn input_grad_error(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars).expect("graph builds");
    let grads = g.backward(out).expect("scalar loss");
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.wrt(vars[k]).unwrap_or(&zeros);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (scalar_of(&plus, build) - scalar_of(&minus, build)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

pub type ParamBuild<'a> = dyn Fn(&mut Graph, &ParamStore) -> Result<Var> + 'a;

/// As [`input_grad_error`] over every parameter of `store`.
pub fn param_grad_error(store: &ParamStore, build: &ParamBuild) -> f64 {
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let out = build(&mut g, s).expect("graph builds");
        g.value(out).item()
    };
    let mut g = Graph::new();
    let out = build(&mut g, store).expect("graph builds");
    let grads = g.backward(out).expect("scalar loss").for_store(store);
    let mut worst: f64 = 0.0;
    for (k, id) in store.ids().enumerate() {
        for i in 0..store.get(id).numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += STEP;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[k].data()[i], numeric));
        }
    }
    worst
}

/// Reduces any tensor to a scalar through a fixed random weighting, so
/// every entry gets a distinct adjoint.
pub fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = (g.value(x).rows(), g.value(x).cols());
    let w = random_tensor(r, c, &mut rng(seed));
    let w = g.input(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Worst error over the primitive operations of the graph.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let a = random_tensor(3, 4, &mut r);
    let b = random_tensor(4, 2, &mut r);
    let c = random_tensor(3, 4, &mut r);
    let row = random_tensor(1, 4, &mut r);
    let k = kink_free_tensor(3, 4, &mut r);
    let logits = random_tensor(4, 3, &mut r);
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor>, build: &Build| {
        out.push((name, input_grad_error(&inputs, build)));
    };
    check("matmul", vec![a.clone(), b.clone()], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 1)
    });
    check("transpose", vec![a.clone()], &|g, v| {
        let y = g.transpose(v[0])?;
        weighted_sum(g, y, 2)
    });
    check("add", vec![a.clone(), c.clone()], &|g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 3)
    });
    check("mul", vec![a.clone(), c.clone()], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 4)
    });
    check("add_row", vec![a.clone(), row.clone()], &|g, v| {
        let y = g.add_row(v[0], v[1])?;
        weighted_sum(g, y, 5)
    });
    check("mul_row", vec![a.clone(), row.clone()], &|g, v| {
        let y = g.mul_row(v[0], v[1])?;
        weighted_sum(g, y, 6)
    });
    check("scale", vec![a.clone()], &|g, v| {
        let y = g.scale(v[0], -0.7);
        weighted_sum(g, y, 7)
    });
    check("relu", vec![k.clone()], &|g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, 8)
    });
    check("sigmoid", vec![a.clone()], &|g, v| {
        let y = g.sigmoid(v[0]);
        weighted_sum(g, y, 9)
    });
    check("softmax_rows", vec![a.clone()], &|g, v| {
        let y = g.softmax_rows(v[0])?;
        weighted_sum(g, y, 10)
    });
    check("sum", vec![a.clone()], &|g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum(y))
    });
    check("mean", vec![a.clone()], &|g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.mean(y))
    });
    check(
        "mean_groups",
        vec![random_tensor(6, 2, &mut rng(3))],
        &|g, v| {
            let y = g.mean_groups(v[0], 3)?;
            weighted_sum(g, y, 11)
        },
    );
    check("concat_rows", vec![a.clone(), c.clone()], &|g, v| {
        let y = g.concat_rows(&[v[0], v[1], v[0]])?;
        weighted_sum(g, y, 12)
    });
    check("slice_rows", vec![a.clone()], &|g, v| {
        let y = g.slice_rows(v[0], 1, 2)?;
        weighted_sum(g, y, 13)
    });
    check("cross_entropy", vec![logits.clone()], &|g, v| {
        g.cross_entropy(v[0], &[0, 2, 1, 2])
    });
    check("bce_with_logits", vec![logits.clone()], &|g, v| {
        g.bce_with_logits(
            v[0],
            &[1.0, 0.0, 0.3, 1.0, 0.0, 0.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0],
        )
    });
    check("l1", vec![k.clone()], &|g, v| Ok(g.l1(v[0])));
    out
}

/// Worst error over a random chain of up to `max_depth` operations on a
/// random input.
pub fn composed_graph_error(seed: u64, max_depth: usize) -> f64 {
    let mut r = rng(seed);
    let depth = r.gen_range(1..=max_depth);
    let (rows, cols) = (r.gen_range(1..4), r.gen_range(1..4));
    let mut inputs = vec![kink_free_tensor(rows, cols, &mut r)];
    let mut plan = Vec::new();
    let mut shape = (rows, cols);
    for _ in 0..depth {
        let op: u8 = r.gen_range(0..8);
        match op {
            4 | 5 => {
                plan.push((op, inputs.len()));
                inputs.push(random_tensor(1, shape.1, &mut r));
            }
            6 => {
                let out = r.gen_range(1..4);
                plan.push((op, inputs.len()));
                inputs.push(random_tensor(shape.1, out, &mut r));
                shape.1 = out;
            }
            7 => {
                plan.push((op, 0));
                shape = (shape.1, shape.0);
            }
            _ => plan.push((op, 0)),
        }
    }
    let build = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let mut x = v[0];
        for &(op, k) in &plan {
            x = match op {
                0 => g.sigmoid(x),
                1 => g.softmax_rows(x)?,
                2 => g.scale(x, 1.3),
                3 => g.mul(x, x)?,
                4 => g.add_row(x, v[k])?,
                5 => g.mul_row(x, v[k])?,
                6 => g.matmul(x, v[k])?,
                _ => g.transpose(x)?,
            };
        }
        weighted_sum(g, x, seed)
    };
    input_grad_error(&inputs, &build)
}

/// Gate, mask and feature gradients of the full gated compression loss at a
/// mask temperature other than one.
pub fn gc_layer_error() -> (f64, f64) {
    use gatecade::gc::{GcLayer, GcMode};
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let mut gc = GcLayer::new(&mut store, 4, 0.4, 0.7, 0.3, 0.0, &mut r).unwrap();
    gc.set_temperature(0.6).unwrap();
    let mask = store.id("gc.mask").unwrap();
    *store.get_mut(mask) = random_tensor(1, 4, &mut r);
    let features = random_tensor(6, 4, &mut r);
    let background = [1.0, 0.0, 1.0];
    let loss = |g: &mut Graph, s: &ParamStore, x: Var| -> Result<Var> {
        let out = gc.forward(g, s, x, 2, GcMode::Train)?;
        let task = weighted_sum(g, out.gated, 21)?;
        Ok(gc.loss(g, &out, task, &background)?.total)
    };
    let params = param_grad_error(&store, &|g, s| {
        let x = g.input(features.clone());
        loss(g, s, x)
    });
    let inputs = input_grad_error(std::slice::from_ref(&features), &|g, v| {
        loss(g, &store, v[0])
    });
    (params, inputs)
}

/// Parameter and input gradients of one attention block on a 3-token sample.
pub fn attention_error() -> (f64, f64) {
    use gatecade::nn::AttentionBlock;
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let block = AttentionBlock::new(&mut store, "attn", 4, 3, 5, &mut r).unwrap();
    let x = random_tensor(3, 4, &mut r);
    let params = param_grad_error(&store, &|g, s| {
        let xv = g.input(x.clone());
        let y = block.forward(g, s, xv)?;
        weighted_sum(g, y, 31)
    });
    let inputs = input_grad_error(std::slice::from_ref(&x), &|g, v| {
        let y = block.forward(g, &store, v[0])?;
        weighted_sum(g, y, 31)
    });
    (params, inputs)
}

/// A task small enough to train in well under a second.
pub fn small_config() -> gatecade::harness::ExperimentConfig {
    use gatecade::data::Generator;
    use gatecade::nn::BackboneSpec;
    let mut cfg = gatecade::harness::ExperimentConfig::default_task();
    cfg.backbone = BackboneSpec::Mlp {
        input_dim: 6,
        width: 16,
        depth: 6,
    };
    cfg.dataset.generator = Generator::GaussianClusters {
        dim: 6,
        background_clusters: 3,
        separation: 4.0,
        noise: 1.0,
    };
    cfg.dataset.n_train = 600;
    cfg.dataset.n_val = 600;
    cfg.dataset.n_test = 600;
    cfg.training.epochs = 6;
    cfg.training.batch_size = 32;
    cfg.training.schedule = gatecade::tensor::LrSchedule::Constant { rate: 5e-3 };
    cfg.mu = vec![0.5];
    cfg.alpha = vec![0.5];
    cfg.targets = vec![0.01];
    cfg.repeats = 2;
    cfg
}

pub fn small_model(
    mu: f64,
    alpha: f64,
    seed: u64,
) -> (gatecade::cascade::PartitionedModel, gatecade::data::Splits) {
    let cfg = small_config();
    let splits = gatecade::data::generate_dataset(&cfg.dataset).unwrap();
    let (model, _) =
        gatecade::harness::train_partitioned(&cfg, &splits.train, mu, alpha, seed).unwrap();
    (model, splits)
}
