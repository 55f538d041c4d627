//! Dense layers and single-head attention built on [`Graph`].
//!
//! Parameters follow a flat naming scheme: an MLP under `prefix` owns
//! `prefix.{layer}.w` (`fan_in x fan_out`) and `prefix.{layer}.b`; an
//! attention block owns `prefix.wq`, `prefix.wk`, `prefix.wv`, `prefix.wo`
//! and a two-layer feed-forward MLP under `prefix.ff`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Register an MLP with the given layer widths (`widths[0]` is the input).
/// With `zero_last` the final layer starts at zero, so the MLP initially
/// outputs exactly zero.
pub fn init_mlp(store: &mut ParamStore, prefix: &str, widths: &[usize], zero_last: bool) {
    let depth = widths.len() - 1;
    for l in 0..depth {
        let name = format!("{prefix}.{l}");
        let gain = if zero_last && l + 1 == depth { 0.0 } else { 1.0 };
        store.init_linear(&name, widths[l], widths[l + 1], gain);
    }
}

/// Register a single-head attention block of width `d`. The output
/// projection and the last feed-forward layer start at zero, so both residual
/// branches are initially the identity.
pub fn init_attention(store: &mut ParamStore, prefix: &str, d: usize) {
    let std = (1.0 / d as f64).sqrt();
    for name in ["wq", "wk", "wv"] {
        let key = format!("{prefix}.{name}");
        let w = store.normal(&key, &[d, d], std);
        store.insert(&key, w);
    }
    store.insert(&format!("{prefix}.wo"), Tensor::zeros(&[d, d]));
    init_mlp(store, &format!("{prefix}.ff"), &[d, 2 * d, d], true);
}

fn shape_of(store: &ParamStore, name: &str) -> Result<(usize, usize)> {
    let t = store
        .get(name)
        .ok_or_else(|| Error::MissingParam(name.to_string()))?;
    Ok((t.rows(), t.cols()))
}

/// Affine layers with `activation` between them (none after the last).
pub fn mlp_apply(
    g: &mut Graph,
    store: &ParamStore,
    input: Var,
    prefix: &str,
    depth: usize,
    activation: Activation,
) -> Result<Var> {
    let mut width = g.value(input).cols();
    for l in 0..depth {
        let (fan_in, fan_out) = shape_of(store, &format!("{prefix}.{l}.w"))?;
        let bias = shape_of(store, &format!("{prefix}.{l}.b"))?;
        if fan_in != width || bias != (1, fan_out) {
            return Err(Error::Shape(format!(
                "layer {prefix}.{l} expects width {fan_in} (bias {bias:?}), got {width}"
            )));
        }
        width = fan_out;
    }
    let mut x = input;
    for l in 0..depth {
        let w = g.param(store, &format!("{prefix}.{l}.w"))?;
        let b = g.param(store, &format!("{prefix}.{l}.b"))?;
        let h = g.matmul(x, w);
        x = g.add_row(h, b);
        if l + 1 < depth {
            x = activation.apply(g, x);
        }
    }
    Ok(x)
}

/// Output of an attention block together with its attention weights
/// (`queries x context`).
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// Single-head scaled dot-product attention of `queries` over `context`,
/// followed by a residual feed-forward sublayer. No positional encoding is
/// used, so permuting the context leaves the output unchanged and permuting
/// the queries permutes the output rows.
pub fn cross_attention_apply(
    g: &mut Graph,
    store: &ParamStore,
    queries: Var,
    context: Var,
    prefix: &str,
    activation: Activation,
) -> Result<AttentionOutput> {
    let d = g.value(queries).cols();
    if g.value(queries).rows() == 0 || g.value(context).rows() == 0 {
        return Err(Error::Empty("attention needs at least one token".into()));
    }
    if g.value(context).cols() != d {
        return Err(Error::Shape(format!(
            "context width {} differs from query width {d}",
            g.value(context).cols()
        )));
    }
    for name in ["wq", "wk", "wv", "wo"] {
        let s = shape_of(store, &format!("{prefix}.{name}"))?;
        if s != (d, d) {
            return Err(Error::Shape(format!(
                "{prefix}.{name} is {s:?}, tokens have width {d}"
            )));
        }
    }
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let q = g.matmul(queries, wq);
    let k = g.matmul(context, wk);
    let v = g.matmul(context, wv);
    let scores = g.matmul_bt(q, k);
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows(scores);
    let mixed = g.matmul(weights, v);
    let projected = g.matmul(mixed, wo);
    let x1 = g.add(queries, projected);
    let ff = mlp_apply(g, store, x1, &format!("{prefix}.ff"), 2, activation)?;
    let output = g.add(x1, ff);
    Ok(AttentionOutput { output, weights })
}

/// Self-attention over a token sequence.
pub fn attention_apply(
    g: &mut Graph,
    store: &ParamStore,
    tokens: Var,
    prefix: &str,
    activation: Activation,
) -> Result<AttentionOutput> {
    cross_attention_apply(g, store, tokens, tokens, prefix, activation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use rand::Rng;

    fn random_matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = SeedTree::new(seed).rng();
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParamStore::new(0);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        store.insert("m.0.w", Tensor::matrix(3, 3, eye));
        store.insert("m.0.b", Tensor::zeros(&[1, 3]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]));
        let y = mlp_apply(&mut g, &store, x, "m", 1, Activation::Relu).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn zero_weights_return_bias() {
        let mut store = ParamStore::new(0);
        store.insert("m.0.w", Tensor::zeros(&[4, 2]));
        store.insert("m.0.b", Tensor::row(vec![0.25, -7.0]));
        let mut g = Graph::new();
        let x = g.constant(random_matrix(3, 5, 4));
        let y = mlp_apply(&mut g, &store, x, "m", 1, Activation::Relu).unwrap();
        for r in 0..5 {
            assert_eq!(g.value(y).row_slice(r), &[0.25, -7.0]);
        }
    }

    #[test]
    fn two_layer_matches_hand_rolled_matmul() {
        let mut store = ParamStore::new(11);
        init_mlp(&mut store, "m", &[3, 5, 2], false);
        store.insert("m.0.b", random_matrix(1, 1, 5));
        store.insert("m.1.b", random_matrix(2, 1, 2));
        let input = random_matrix(4, 6, 3);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = mlp_apply(&mut g, &store, x, "m", 2, Activation::Relu).unwrap();

        let w0 = store.get("m.0.w").unwrap();
        let b0 = store.get("m.0.b").unwrap();
        let w1 = store.get("m.1.w").unwrap();
        let b1 = store.get("m.1.b").unwrap();
        for r in 0..6 {
            let hidden: Vec<f64> = (0..5)
                .map(|j| {
                    let s: f64 = (0..3).map(|k| input.get(r, k) * w0.get(k, j)).sum::<f64>() + b0.get(0, j);
                    s.max(0.0)
                })
                .collect();
            for j in 0..2 {
                let expect: f64 = (0..5).map(|k| hidden[k] * w1.get(k, j)).sum::<f64>() + b1.get(0, j);
                assert!((g.value(y).get(r, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_shape_mismatch_is_an_error() {
        let mut store = ParamStore::new(0);
        init_mlp(&mut store, "m", &[3, 4], false);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(
            mlp_apply(&mut g, &store, x, "m", 1, Activation::Relu),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let mut store = ParamStore::new(5);
        init_attention(&mut store, "a", 4);
        store.insert("a.wq", Tensor::zeros(&[4, 4]));
        store.insert("a.wk", Tensor::zeros(&[4, 4]));
        let mut g = Graph::new();
        let x = g.constant(random_matrix(8, 3, 4));
        let out = attention_apply(&mut g, &store, x, "a", Activation::Relu).unwrap();
        for v in g.value(out.weights).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParamStore::new(5);
        init_attention(&mut store, "a", 4);
        let mut g = Graph::new();
        let x = g.constant(random_matrix(8, 1, 4));
        let out = attention_apply(&mut g, &store, x, "a", Activation::Relu).unwrap();
        assert_eq!(g.value(out.weights).data(), &[1.0]);
    }

    #[test]
    fn attention_width_mismatch() {
        let mut store = ParamStore::new(5);
        init_attention(&mut store, "a", 4);
        let mut g = Graph::new();
        let x = g.constant(random_matrix(8, 2, 3));
        assert!(matches!(
            attention_apply(&mut g, &store, x, "a", Activation::Relu),
            Err(Error::Shape(_))
        ));
    }
}
