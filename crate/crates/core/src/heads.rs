//! Stroke pooling, the stroke classifier, the transition branch and the joint loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{init_linear, init_mlp, linear, mlp, Init};
use crate::tensor::{BoundParams, Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("stroke {0} has no reference points")]
    EmptyStroke(usize),
    #[error("{what}: expected {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

/// Transition labels of adjacent strokes: 0 when both share a class.
pub fn make_aux_labels(labels: &[usize]) -> Vec<usize> {
    labels
        .windows(2)
        .map(|w| usize::from(w[0] != w[1]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the transition term.
    pub aux_weight: f64,
    /// Per-sample weight of same-class transitions.
    pub same_weight: f64,
    /// Per-sample weight of class changes.
    pub change_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            aux_weight: 1.0,
            same_weight: 1.0,
            change_weight: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(HeadError::Config(format!(
                "aux weight {} must be >= 0",
                self.aux_weight
            )));
        }
        if !(self.same_weight > 0.0 && self.change_weight > 0.0) {
            return Err(HeadError::Config(
                "transition class weights must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn init_rpts_params(
    store: &mut ParamStore,
    input: usize,
    widths: &[usize],
    init: Init,
) -> usize {
    init_mlp(store, "rpts", input, widths, init)
}

pub fn init_rpts_concat_params(
    store: &mut ParamStore,
    input: usize,
    slots: usize,
    widths: &[usize],
    init: Init,
) -> usize {
    init_mlp(store, "rpts_concat", input * slots, widths, init)
}

/// Registers the classifier (one hidden layer) and the transition branch
/// over stroke features of width `input`.
pub fn init_head_params(
    store: &mut ParamStore,
    input: usize,
    hidden: usize,
    aux_hidden: usize,
    classes: usize,
    init: Init,
) {
    init_linear(store, "cls.0", input, hidden, init);
    init_linear(store, "cls.1", hidden, classes, init);
    init_linear(store, "aux.0", 2 * input, aux_hidden, init);
    init_linear(store, "aux.1", aux_hidden, 2, init);
}

fn check_members(stroke_of: &[usize], num_strokes: usize) -> Result<(), HeadError> {
    let mut seen = vec![false; num_strokes];
    for &s in stroke_of {
        if s >= num_strokes {
            return Err(HeadError::Length {
                what: "stroke id",
                expected: num_strokes,
                got: s,
            });
        }
        seen[s] = true;
    }
    match seen.iter().position(|&v| !v) {
        Some(s) => Err(HeadError::EmptyStroke(s)),
        None => Ok(()),
    }
}

/// Pointwise MLP over reference-point features, then max over each stroke's
/// points; `(num_strokes, widths.last())`.
pub fn rpts_pool(
    g: &Graph,
    p: &BoundParams,
    point_feats: Var,
    stroke_of: &[usize],
    num_strokes: usize,
    layers: usize,
) -> Result<Var, HeadError> {
    check_members(stroke_of, num_strokes)?;
    let h = mlp(g, p, "rpts", point_feats, layers, true)?;
    Ok(g.max_over_segments(h, stroke_of, num_strokes)?)
}

/// Ablation of [`rpts_pool`]: each stroke's first `slots` point features are
/// concatenated (zero rows fill short strokes) and passed through an MLP.
#[allow(clippy::too_many_arguments)]
pub fn rpts_concat(
    g: &Graph,
    p: &BoundParams,
    point_feats: Var,
    stroke_of: &[usize],
    slot_of: &[usize],
    num_strokes: usize,
    slots: usize,
    layers: usize,
) -> Result<Var, HeadError> {
    check_members(stroke_of, num_strokes)?;
    let shape = g.shape(point_feats);
    let (n, c) = (shape[0], shape[1]);
    let zero = g.constant(Tensor::zeros(vec![1, c]));
    let padded = g.concat(&[point_feats, zero], 0)?;
    let mut rows = vec![n; num_strokes * slots];
    for (j, (&s, &d)) in stroke_of.iter().zip(slot_of).enumerate() {
        if d < slots {
            rows[s * slots + d] = j;
        }
    }
    let gathered = g.gather(padded, &rows)?;
    let flat = g.reshape(gathered, vec![num_strokes, slots * c])?;
    Ok(mlp(g, p, "rpts_concat", flat, layers, true)?)
}

/// `(strokes, classes)` logits.
pub fn classify(g: &Graph, p: &BoundParams, stroke_feats: Var) -> Result<Var, HeadError> {
    let h = linear(g, p, "cls.0", stroke_feats)?;
    let h = g.relu(h);
    Ok(linear(g, p, "cls.1", h)?)
}

/// `(strokes - 1, 2)` transition logits over `[feat_i, feat_{i+1}]`; `None`
/// for a single stroke.
pub fn aux_transition_logits(
    g: &Graph,
    p: &BoundParams,
    stroke_feats: Var,
) -> Result<Option<Var>, HeadError> {
    let m = g.shape(stroke_feats)[0];
    if m < 2 {
        return Ok(None);
    }
    let first: Vec<usize> = (0..m - 1).collect();
    let second: Vec<usize> = (1..m).collect();
    let a = g.gather(stroke_feats, &first)?;
    let b = g.gather(stroke_feats, &second)?;
    let pairs = g.concat(&[a, b], 1)?;
    let h = linear(g, p, "aux.0", pairs)?;
    let h = g.relu(h);
    Ok(Some(linear(g, p, "aux.1", h)?))
}

/// Mean stroke cross-entropy plus `aux_weight` times the class-weighted mean
/// transition cross-entropy. The transition term is left out of the graph
/// entirely when its weight is zero or there are no transitions.
pub fn joint_loss(
    g: &Graph,
    logits: Var,
    labels: &[usize],
    aux: Option<(Var, &[usize])>,
    cfg: &LossConfig,
) -> Result<Var, HeadError> {
    cfg.validate()?;
    let main = g.cross_entropy(logits, labels, &vec![1.0; labels.len()])?;
    let Some((aux_logits, aux_labels)) = aux else {
        return Ok(main);
    };
    if cfg.aux_weight == 0.0 || aux_labels.is_empty() {
        return Ok(main);
    }
    if aux_labels.len() + 1 != labels.len() {
        return Err(HeadError::Length {
            what: "transition labels",
            expected: labels.len().saturating_sub(1),
            got: aux_labels.len(),
        });
    }
    let weights: Vec<f64> = aux_labels
        .iter()
        .map(|&t| {
            if t == 0 {
                cfg.same_weight
            } else {
                cfg.change_weight
            }
        })
        .collect();
    let aux_ce = g.cross_entropy(aux_logits, aux_labels, &weights)?;
    let scaled = g.scale(aux_ce, cfg.aux_weight);
    Ok(g.add(main, scaled)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln_softmax(row: &[f64], t: usize) -> f64 {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        row[t] - z.ln()
    }

    #[test]
    fn aux_labels() {
        assert_eq!(make_aux_labels(&[0, 0, 1]), vec![0, 1]);
        assert_eq!(make_aux_labels(&[2]), Vec::<usize>::new());
        assert_eq!(make_aux_labels(&[0, 1, 0, 0]), vec![1, 1, 0]);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![4, 3]));
        let cfg = LossConfig {
            aux_weight: 0.0,
            ..Default::default()
        };
        let loss = joint_loss(&g, logits, &[0, 1, 2, 0], None, &cfg).unwrap();
        assert!((g.value(loss).item() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let g = Graph::new();
        let logits = g.constant(Tensor::from_rows(&[vec![60.0, 0.0], vec![0.0, 60.0]]).unwrap());
        let aux = g.constant(Tensor::from_rows(&[vec![0.0, 60.0]]).unwrap());
        let loss = joint_loss(
            &g,
            logits,
            &[0, 1],
            Some((aux, &[1])),
            &LossConfig::default(),
        )
        .unwrap();
        assert!(g.value(loss).item() < 1e-20);
    }

    #[test]
    fn two_stroke_case_matches_scalar_oracle() {
        let main = [[0.3, -1.2, 0.5], [1.1, 0.2, -0.4]];
        let aux = [0.7, -0.9];
        let g = Graph::new();
        let logits = g.constant(Tensor::from_rows(&[main[0].to_vec(), main[1].to_vec()]).unwrap());
        let aux_v = g.constant(Tensor::matrix(1, 2, aux.to_vec()).unwrap());
        let loss = joint_loss(
            &g,
            logits,
            &[2, 0],
            Some((aux_v, &[1])),
            &LossConfig::default(),
        )
        .unwrap();
        let want = -(ln_softmax(&main[0], 2) + ln_softmax(&main[1], 0)) / 2.0 - ln_softmax(&aux, 1);
        assert!((g.value(loss).item() - want).abs() < 1e-14);
    }

    #[test]
    fn class_weight_equals_duplication() {
        let rows = vec![vec![0.2, -0.1], vec![-0.5, 0.9], vec![1.0, 0.3]];
        let targets = [0, 1, 0];
        let g = Graph::new();
        let weighted = g.constant(Tensor::from_rows(&rows).unwrap());
        let a = g
            .cross_entropy(weighted, &targets, &[1.0, 10.0, 1.0])
            .unwrap();
        let mut dup_rows = vec![rows[0].clone(), rows[2].clone()];
        let mut dup_t = vec![0, 0];
        for _ in 0..10 {
            dup_rows.push(rows[1].clone());
            dup_t.push(1);
        }
        let dup = g.constant(Tensor::from_rows(&dup_rows).unwrap());
        let b = g.cross_entropy(dup, &dup_t, &[1.0; 12]).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-14);
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let mut store = ParamStore::new();
        init_head_params(&mut store, 4, 5, 3, 3, Init::new(0));
        for name in ["cls.0.w", "cls.0.b", "cls.1.w", "cls.1.b"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.insert(name, Tensor::zeros(shape));
        }
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let f = g.constant(Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap());
        let logits = classify(&g, &p, f).unwrap();
        let probs = g.softmax(logits, 1).unwrap();
        assert!(g
            .value(probs)
            .data()
            .iter()
            .all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn transition_rows() {
        let mut store = ParamStore::new();
        init_head_params(&mut store, 3, 4, 4, 2, Init::new(1));
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let one = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(aux_transition_logits(&g, &p, one).unwrap().is_none());
        let same = g.constant(Tensor::new(vec![4, 3], [0.1, 0.2, 0.3].repeat(4)).unwrap());
        let out = g.to_tensor(aux_transition_logits(&g, &p, same).unwrap().unwrap());
        assert_eq!(out.shape(), &[3, 2]);
        assert!(out.row(0) == out.row(1) && out.row(1) == out.row(2));
    }

    #[test]
    fn pooling_is_order_free_and_concat_pads() {
        let mut store = ParamStore::new();
        init_rpts_params(&mut store, 2, &[3], Init::new(4));
        init_rpts_concat_params(&mut store, 2, 3, &[3], Init::new(4));
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let x = g.constant(
            Tensor::new(vec![4, 2], vec![0.1, 0.5, -0.3, 0.2, 0.9, -0.7, 0.4, 0.4]).unwrap(),
        );
        let pooled = g.to_tensor(rpts_pool(&g, &p, x, &[0, 0, 1, 0], 2, 1).unwrap());
        let xr = g.gather(x, &[3, 1, 2, 0]).unwrap();
        let pooled_r = g.to_tensor(rpts_pool(&g, &p, xr, &[0, 0, 1, 0], 2, 1).unwrap());
        assert_eq!(pooled, pooled_r);
        assert!(matches!(
            rpts_pool(&g, &p, x, &[0, 0, 0, 0], 2, 1),
            Err(HeadError::EmptyStroke(1))
        ));
        let cat = rpts_concat(&g, &p, x, &[0, 0, 1, 0], &[0, 1, 0, 2], 2, 3, 1).unwrap();
        assert_eq!(g.shape(cat), vec![2, 3]);
    }
}
