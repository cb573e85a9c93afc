//! Layers and backbones.
//!
//! Every layer has two evaluation routes: a graph route used for training
//! (records onto a [`Graph`]) and a plain route used at inference that skips
//! multiplications against zero inputs. The two must agree to rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// `x @ w` where rows of `x` are gathered down to their nonzero entries
/// before multiplying. `x` is `[m, k]`, `w` is `[k, n]`.
pub fn sparse_matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (m, k) = (x.rows(), x.cols());
    let (k2, n) = (w.rows(), w.cols());
    if k != k2 {
        return Err(Error::shape(
            "sparse_matmul",
            format!("[{m}, {k}] x [{k2}, {n}]"),
        ));
    }
    let wd = w.data();
    let mut out = vec![0.0; m * n];
    let mut nz: Vec<(usize, f64)> = Vec::with_capacity(k);
    for i in 0..m {
        nz.clear();
        nz.extend(
            x.row_slice(i)
                .iter()
                .copied()
                .enumerate()
                .filter(|&(_, v)| v != 0.0),
        );
        let row = &mut out[i * n..(i + 1) * n];
        for &(p, v) in &nz {
            for (o, &wv) in row.iter_mut().zip(&wd[p * n..(p + 1) * n]) {
                *o += v * wv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

fn add_row_plain(x: &mut Tensor, row: &Tensor) {
    let n = row.numel();
    let r = row.data();
    x.data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v += r[i % n]);
}

fn relu_plain(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v <= 0.0 {
            *v = 0.0
        }
    });
}

fn mean_groups_plain(x: &Tensor, group: usize) -> Result<Tensor> {
    let (m, n) = (x.rows(), x.cols());
    if group == 0 || m % group != 0 {
        return Err(Error::shape(
            "mean_groups",
            format!("{m} rows are not a multiple of {group}"),
        ));
    }
    let mut out = vec![0.0; (m / group) * n];
    for (i, row) in x.data().chunks(n).enumerate() {
        for (o, v) in out[(i / group) * n..(i / group + 1) * n]
            .iter_mut()
            .zip(row)
        {
            *o += v;
        }
    }
    let inv = 1.0 / group as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::matrix(m / group, n, out))
}

/// Fully connected layer `x @ w + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::glorot(fan_in, fan_out, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Dense {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    /// Re-binds to parameters already present in `store`.
    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let lookup = |suffix: &str| {
            store
                .id(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}.{suffix}`")))
        };
        let (w, b) = (lookup("w")?, lookup("b")?);
        let (fan_in, fan_out) = (store.get(w).rows(), store.get(w).cols());
        Ok(Dense {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }

    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut out = sparse_matmul(x, store.get(self.w))?;
        add_row_plain(&mut out, store.get(self.b));
        Ok(out)
    }
}

/// Single-head self-attention block without layer normalization:
///
/// ```text
/// h   = x + softmax(x Wq (x Wk)^T / sqrt(key_dim)) (x Wv)
/// out = h + relu(h W1 + b1) W2 + b2
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub mlp_in: Dense,
    pub mlp_out: Dense,
    pub width: usize,
    pub key_dim: usize,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        key_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if width == 0 || key_dim == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "attention block `{name}` needs positive width, key_dim and hidden"
            )));
        }
        Ok(AttentionBlock {
            wq: store.add(format!("{name}.wq"), Tensor::glorot(width, key_dim, rng)),
            wk: store.add(format!("{name}.wk"), Tensor::glorot(width, key_dim, rng)),
            wv: store.add(format!("{name}.wv"), Tensor::glorot(width, width, rng)),
            mlp_in: Dense::new(store, &format!("{name}.mlp1"), width, hidden, rng),
            mlp_out: Dense::new(store, &format!("{name}.mlp2"), hidden, width, rng),
            width,
            key_dim,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let lookup = |suffix: &str| {
            store
                .id(&format!("{name}.{suffix}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}.{suffix}`")))
        };
        let (wq, wk, wv) = (lookup("wq")?, lookup("wk")?, lookup("wv")?);
        Ok(AttentionBlock {
            wq,
            wk,
            wv,
            mlp_in: Dense::bind(store, &format!("{name}.mlp1"))?,
            mlp_out: Dense::bind(store, &format!("{name}.mlp2"))?,
            width: store.get(wq).rows(),
            key_dim: store.get(wq).cols(),
        })
    }

    fn check_width(&self, cols: usize) -> Result<()> {
        if cols != self.width {
            return Err(Error::shape(
                "attention_block",
                format!(
                    "input width {cols} does not match configured width {}",
                    self.width
                ),
            ));
        }
        Ok(())
    }

    /// Graph route on one sample `x: [tokens, width]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.check_width(g.value(x).cols())?;
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.key_dim as f64).sqrt());
        let weights = g.softmax_rows(scores)?;
        let attended = g.matmul(weights, v)?;
        let h = g.add(x, attended)?;
        let hidden = self.mlp_in.forward(g, store, h)?;
        let hidden = g.relu(hidden);
        let mlp = self.mlp_out.forward(g, store, hidden)?;
        g.add(h, mlp)
    }

    /// Attention weights `[tokens, tokens]` for one sample (plain route).
    pub fn attention_weights(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check_width(x.cols())?;
        let q = sparse_matmul(x, store.get(self.wq))?;
        let k = sparse_matmul(x, store.get(self.wk))?;
        let t = x.rows();
        let scale = 1.0 / (self.key_dim as f64).sqrt();
        let mut scores = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                let dot: f64 = q
                    .row_slice(i)
                    .iter()
                    .zip(k.row_slice(j))
                    .map(|(a, b)| a * b)
                    .sum();
                scores[i * t + j] = dot * scale;
            }
        }
        Ok(Tensor::matrix(
            t,
            t,
            crate::tensor::softmax_rows_plain(&scores, t),
        ))
    }

    /// Plain route on one sample.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let weights = self.attention_weights(store, x)?;
        let v = sparse_matmul(x, store.get(self.wv))?;
        let attended = sparse_matmul(&weights, &v)?;
        let mut h = x.clone();
        h.data_mut()
            .iter_mut()
            .zip(attended.data())
            .for_each(|(a, b)| *a += b);
        let mut hidden = self.mlp_in.eval(store, &h)?;
        relu_plain(&mut hidden);
        let mlp = self.mlp_out.eval(store, &hidden)?;
        h.data_mut()
            .iter_mut()
            .zip(mlp.data())
            .for_each(|(a, b)| *a += b);
        Ok(h)
    }
}

/// Backbone architecture. `depth` counts depth units: unit 0 is the stem
/// (dense + ReLU applied per row), the remaining units are residual MLP
/// blocks or attention blocks. The classifier head (mean over the rows of a
/// sample, then dense) is attached to the last unit and not counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneSpec {
    Mlp {
        input_dim: usize,
        width: usize,
        depth: usize,
    },
    Attention {
        token_dim: usize,
        tokens: usize,
        width: usize,
        key_dim: usize,
        hidden: usize,
        depth: usize,
    },
}

impl BackboneSpec {
    pub fn depth(&self) -> usize {
        match self {
            BackboneSpec::Mlp { depth, .. } | BackboneSpec::Attention { depth, .. } => *depth,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            BackboneSpec::Mlp { width, .. } | BackboneSpec::Attention { width, .. } => *width,
        }
    }

    /// Rows per sample in the input matrix.
    pub fn rows_per_sample(&self) -> usize {
        match self {
            BackboneSpec::Mlp { .. } => 1,
            BackboneSpec::Attention { tokens, .. } => *tokens,
        }
    }

    /// Columns of the input matrix.
    pub fn input_cols(&self) -> usize {
        match self {
            BackboneSpec::Mlp { input_dim, .. } => *input_dim,
            BackboneSpec::Attention { token_dim, .. } => *token_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = match self {
            BackboneSpec::Mlp {
                input_dim,
                width,
                depth,
            } => [*input_dim, *width, *depth, 1, 1, 1],
            BackboneSpec::Attention {
                token_dim,
                tokens,
                width,
                key_dim,
                hidden,
                depth,
            } => [*token_dim, *tokens, *width, *key_dim, *hidden, *depth],
        };
        if positive.contains(&0) {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.depth() < 2 {
            return Err(Error::Config(
                "backbone depth must be at least 2 so it can be split".into(),
            ));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        match self {
            BackboneSpec::Mlp { input_dim, width, depth } => {
                format!("mlp input_dim={input_dim} width={width} depth={depth}")
            }
            BackboneSpec::Attention {
                token_dim,
                tokens,
                width,
                key_dim,
                hidden,
                depth,
            } => format!(
                "attention token_dim={token_dim} tokens={tokens} width={width} key_dim={key_dim} hidden={hidden} depth={depth}"
            ),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut words = s.split_ascii_whitespace();
        let kind = words.next().unwrap_or_default();
        let mut kv = std::collections::HashMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad backbone field `{w}`")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad backbone value `{w}`")))?;
            kv.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("backbone field `{k}` missing")))
        };
        match kind {
            "mlp" => Ok(BackboneSpec::Mlp {
                input_dim: get("input_dim")?,
                width: get("width")?,
                depth: get("depth")?,
            }),
            "attention" => Ok(BackboneSpec::Attention {
                token_dim: get("token_dim")?,
                tokens: get("tokens")?,
                width: get("width")?,
                key_dim: get("key_dim")?,
                hidden: get("hidden")?,
                depth: get("depth")?,
            }),
            other => Err(Error::Checkpoint(format!(
                "unknown backbone kind `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Unit {
    /// `relu(x W + b)`
    Stem(Dense),
    /// `relu(x + scale * (x W + b))`
    Residual {
        dense: Dense,
        scale: f64,
    },
    Attention(AttentionBlock),
}

/// A backbone: depth units plus a classifier head. Parameters live in an
/// external [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: BackboneSpec,
    pub units: Vec<Unit>,
    pub head: Dense,
    pub classes: usize,
}

impl Network {
    pub fn new(
        spec: &BackboneSpec,
        classes: usize,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let width = spec.width();
        let depth = spec.depth();
        let mut units = vec![Unit::Stem(Dense::new(
            store,
            "u0",
            spec.input_cols(),
            width,
            rng,
        ))];
        for i in 1..depth {
            let name = format!("u{i}");
            units.push(match spec {
                BackboneSpec::Mlp { .. } => Unit::Residual {
                    dense: Dense::new(store, &name, width, width, rng),
                    scale: residual_scale(depth),
                },
                BackboneSpec::Attention {
                    key_dim, hidden, ..
                } => Unit::Attention(AttentionBlock::new(
                    store, &name, width, *key_dim, *hidden, rng,
                )?),
            });
        }
        let head = Dense::new(store, "head", width, classes, rng);
        Ok(Network {
            spec: spec.clone(),
            units,
            head,
            classes,
        })
    }

    pub fn bind(spec: &BackboneSpec, store: &ParamStore) -> Result<Self> {
        spec.validate()?;
        let depth = spec.depth();
        let mut units = vec![Unit::Stem(Dense::bind(store, "u0")?)];
        for i in 1..depth {
            let name = format!("u{i}");
            units.push(match spec {
                BackboneSpec::Mlp { .. } => Unit::Residual {
                    dense: Dense::bind(store, &name)?,
                    scale: residual_scale(depth),
                },
                BackboneSpec::Attention { .. } => {
                    Unit::Attention(AttentionBlock::bind(store, &name)?)
                }
            });
        }
        let head = Dense::bind(store, "head")?;
        let classes = head.fan_out;
        Ok(Network {
            spec: spec.clone(),
            units,
            head,
            classes,
        })
    }

    pub fn depth(&self) -> usize {
        self.units.len()
    }

    pub fn width(&self) -> usize {
        self.spec.width()
    }

    pub fn rows_per_sample(&self) -> usize {
        self.spec.rows_per_sample()
    }

    fn check_input(&self, cols: usize, rows: usize, expected_cols: usize) -> Result<()> {
        if cols != expected_cols || !rows.is_multiple_of(self.rows_per_sample()) {
            return Err(Error::shape(
                "network",
                format!(
                    "input [{rows}, {cols}] does not fit {} rows per sample x {expected_cols} columns",
                    self.rows_per_sample()
                ),
            ));
        }
        Ok(())
    }

    /// Graph route through units `range`. `x` stacks the rows of a batch of
    /// samples.
    pub fn forward_units(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        range: std::ops::Range<usize>,
    ) -> Result<Var> {
        let expected = if range.start == 0 {
            self.spec.input_cols()
        } else {
            self.width()
        };
        let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
        self.check_input(cols, rows, expected)?;
        let t = self.rows_per_sample();
        let mut h = x;
        for unit in &self.units[range] {
            h = match unit {
                Unit::Stem(d) => {
                    let z = d.forward(g, store, h)?;
                    g.relu(z)
                }
                Unit::Residual { dense, scale } => {
                    let z = dense.forward(g, store, h)?;
                    let z = g.scale(z, *scale);
                    let z = g.add(h, z)?;
                    g.relu(z)
                }
                Unit::Attention(block) => {
                    let samples = g.value(h).rows() / t;
                    let mut outs = Vec::with_capacity(samples);
                    for s in 0..samples {
                        let xs = g.slice_rows(h, s * t, t)?;
                        outs.push(block.forward(g, store, xs)?);
                    }
                    g.concat_rows(&outs)?
                }
            };
        }
        Ok(h)
    }

    /// Graph route for the classifier head: `[b * t, width] -> [b, classes]`.
    pub fn forward_head(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let pooled = match self.rows_per_sample() {
            1 => h,
            t => g.mean_groups(h, t)?,
        };
        self.head.forward(g, store, pooled)
    }

    /// Plain route through units `range`.
    pub fn eval_units(
        &self,
        store: &ParamStore,
        x: &Tensor,
        range: std::ops::Range<usize>,
    ) -> Result<Tensor> {
        let expected = if range.start == 0 {
            self.spec.input_cols()
        } else {
            self.width()
        };
        self.check_input(x.cols(), x.rows(), expected)?;
        let t = self.rows_per_sample();
        let mut h = x.clone();
        for unit in &self.units[range] {
            h = match unit {
                Unit::Stem(d) => {
                    let mut z = d.eval(store, &h)?;
                    relu_plain(&mut z);
                    z
                }
                Unit::Residual { dense, scale } => {
                    let z = dense.eval(store, &h)?;
                    let mut out = h;
                    out.data_mut()
                        .iter_mut()
                        .zip(z.data())
                        .for_each(|(a, b)| *a += scale * b);
                    relu_plain(&mut out);
                    out
                }
                Unit::Attention(block) => {
                    let n = h.cols();
                    let mut data = Vec::with_capacity(h.numel());
                    for s in 0..h.rows() / t {
                        let xs =
                            Tensor::matrix(t, n, h.data()[s * t * n..(s + 1) * t * n].to_vec());
                        data.extend(block.eval(store, &xs)?.into_data());
                    }
                    Tensor::matrix(h.rows(), n, data)
                }
            };
        }
        Ok(h)
    }

    pub fn eval_head(&self, store: &ParamStore, h: &Tensor) -> Result<Tensor> {
        let pooled = mean_groups_plain(h, self.rows_per_sample())?;
        self.head.eval(store, &pooled)
    }
}

/// Residual branch scale keeping the stream's magnitude bounded with depth.
pub fn residual_scale(depth: usize) -> f64 {
    1.0 / (depth as f64).sqrt()
}

pub(crate) fn mean_rows(x: &Tensor, group: usize) -> Result<Tensor> {
    mean_groups_plain(x, group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn dense_identity_passes_input_through() {
        let mut store = ParamStore::new();
        let w = store.add(
            "d.w",
            Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]),
        );
        let b = store.add("d.b", Tensor::zeros(&[1, 3]));
        let dense = Dense {
            w,
            b,
            fan_in: 3,
            fan_out: 3,
        };
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = dense.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
        assert_eq!(dense.eval(&store, &x).unwrap(), x);
    }

    #[test]
    fn sparse_matmul_matches_dense_product() {
        let mut r = rng::rng(3);
        let w = Tensor::glorot(5, 4, &mut r);
        let x = Tensor::matrix(
            2,
            5,
            vec![0.0, 1.0, 0.0, -2.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let dense = g.matmul(xv, wv).unwrap();
        let sparse = sparse_matmul(&x, &w).unwrap();
        for (a, b) in g.value(dense).data().iter().zip(sparse.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(sparse.row_slice(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_spec_round_trips_through_description() {
        let specs = [
            BackboneSpec::Mlp {
                input_dim: 8,
                width: 16,
                depth: 20,
            },
            BackboneSpec::Attention {
                token_dim: 6,
                tokens: 5,
                width: 8,
                key_dim: 4,
                hidden: 12,
                depth: 4,
            },
        ];
        for s in specs {
            assert_eq!(BackboneSpec::parse(&s.describe()).unwrap(), s);
        }
        assert!(BackboneSpec::parse("conv width=3").is_err());
    }

    #[test]
    fn attention_rejects_wrong_width() {
        let mut store = ParamStore::new();
        let mut r = rng::rng(0);
        let block = AttentionBlock::new(&mut store, "a", 4, 2, 3, &mut r).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.0; 6]);
        assert!(block.eval(&store, &x).is_err());
        let mut g = Graph::new();
        let xv = g.input(x);
        assert!(matches!(
            block.forward(&mut g, &store, xv),
            Err(Error::Shape {
                op: "attention_block",
                ..
            })
        ));
        assert!(AttentionBlock::new(&mut store, "b", 4, 0, 3, &mut r).is_err());
    }

    #[test]
    fn graph_and_plain_routes_agree_for_both_backbones() {
        let specs = [
            BackboneSpec::Mlp {
                input_dim: 3,
                width: 6,
                depth: 4,
            },
            BackboneSpec::Attention {
                token_dim: 3,
                tokens: 4,
                width: 6,
                key_dim: 3,
                hidden: 5,
                depth: 3,
            },
        ];
        for spec in specs {
            let mut store = ParamStore::new();
            let mut r = rng::rng(11);
            let net = Network::new(&spec, 3, &mut store, &mut r).unwrap();
            let rows = 2 * spec.rows_per_sample();
            let x = Tensor::glorot(rows, 3, &mut r);
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let h = net
                .forward_units(&mut g, &store, xv, 0..net.depth())
                .unwrap();
            let logits = net.forward_head(&mut g, &store, h).unwrap();
            let plain = net
                .eval_head(&store, &net.eval_units(&store, &x, 0..net.depth()).unwrap())
                .unwrap();
            assert_eq!(plain.shape(), &[2, 3]);
            for (a, b) in g.value(logits).data().iter().zip(plain.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}
