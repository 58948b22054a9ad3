//! Dense layers over named parameters.
//!
//! A linear layer `prefix` owns `prefix.w: (in, out)` and `prefix.b: (out)`;
//! an MLP `prefix` owns layers `prefix.0`, `prefix.1`, ...

use crate::tensor::{BoundParams, Graph, ParamStore, TensorError, Var};

/// Seed and weight scale for parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Init {
    pub seed: u64,
    /// Linear weights are drawn from `U(-sqrt(gain / fan_in), sqrt(gain / fan_in))`.
    pub weight_gain: f64,
}

impl Init {
    /// Unit gain: bound `sqrt(1 / fan_in)`.
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            weight_gain: 1.0,
        }
    }
}

/// Biases keep the unit-gain bound.
pub fn init_linear(store: &mut ParamStore, prefix: &str, input: usize, output: usize, init: Init) {
    let fan_in = input.max(1) as f64;
    let bound = (init.weight_gain / fan_in).sqrt();
    store.init_uniform_bound(
        &format!("{prefix}.w"),
        vec![input, output],
        bound,
        init.seed,
    );
    store.init_uniform(&format!("{prefix}.b"), vec![output], input, init.seed);
}

pub fn linear(g: &Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var, TensorError> {
    g.linear(x, p[&*format!("{prefix}.w")], p[&*format!("{prefix}.b")])
}

/// Registers one linear layer per width; returns the output width.
pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    widths: &[usize],
    init: Init,
) -> usize {
    let mut width = input;
    for (i, &w) in widths.iter().enumerate() {
        init_linear(store, &format!("{prefix}.{i}"), width, w, init);
        width = w;
    }
    width
}

/// Linear layers with ReLU between them, and after the last one when
/// `relu_last` is set.
pub fn mlp(
    g: &Graph,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    layers: usize,
    relu_last: bool,
) -> Result<Var, TensorError> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, p, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers || relu_last {
            h = g.relu(h);
        }
    }
    Ok(h)
}
