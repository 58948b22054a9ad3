//! Reference pairs and the inline sequence attention encoder.
//!
//! Every stroke yields a sequence feature (conv1d then LSTM over its points,
//! final hidden state) and every reference point a feature (conv1d then LSTM
//! over its stroke's reference points, hidden state at its step). Attention
//! lets each reference point's feature query the sequence features of all
//! strokes in the document; the result is added back onto the point's own
//! stroke feature.
//!
//! Attention rows exist only for real reference points. Padding slots of the
//! `(slot x stroke)` block are never materialized, which is equivalent to
//! masking them out and zeroing their outputs.

use thiserror::Error;

use crate::ink::{Document, Point};
use crate::ref_select::ReferenceSelection;
use crate::tensor::{BoundParams, Graph, ParamStore, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;
const CONV_KERNEL: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum IsaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{strokes} strokes but {selections} selections")]
    SelectionCount { strokes: usize, selections: usize },
    #[error("stroke {0} has no reference points")]
    EmptyStroke(usize),
    #[error("selection index {index} out of range for stroke {stroke}")]
    SelectionIndex { stroke: usize, index: usize },
    #[error("inconsistent pair set: {0}")]
    Inconsistent(String),
}

/// Flat reference points of one document, stroke-major and in writing order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePairSet {
    pub points: Vec<Point>,
    pub stroke_of: Vec<usize>,
    pub slot_of: Vec<usize>,
    pub num_strokes: usize,
    /// Slot count of the padded `(slot x stroke)` layout.
    pub d_max: usize,
    /// Validity of `(slot, stroke)`, slot-major: `mask[slot * num_strokes + stroke]`.
    pub mask: Vec<bool>,
}

impl ReferencePairSet {
    pub fn build(doc: &Document, selections: &[ReferenceSelection]) -> Result<Self, IsaError> {
        if doc.strokes.len() != selections.len() {
            return Err(IsaError::SelectionCount {
                strokes: doc.strokes.len(),
                selections: selections.len(),
            });
        }
        let mut points = Vec::new();
        let mut stroke_of = Vec::new();
        let mut slot_of = Vec::new();
        let mut d_max = 0;
        for (si, (stroke, sel)) in doc.strokes.iter().zip(selections).enumerate() {
            if sel.is_empty() {
                return Err(IsaError::EmptyStroke(si));
            }
            for (slot, &i) in sel.indices.iter().enumerate() {
                let p = stroke.points.get(i).ok_or(IsaError::SelectionIndex {
                    stroke: si,
                    index: i,
                })?;
                points.push(*p);
                stroke_of.push(si);
                slot_of.push(slot);
            }
            d_max = d_max.max(sel.len());
        }
        let num_strokes = doc.strokes.len();
        let mut mask = vec![false; d_max * num_strokes];
        for (&s, &d) in stroke_of.iter().zip(&slot_of) {
            mask[d * num_strokes + s] = true;
        }
        Ok(Self {
            points,
            stroke_of,
            slot_of,
            num_strokes,
            d_max,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same pairs laid out with `d_max` slots; `d_max` may only grow.
    pub fn with_slots(&self, d_max: usize) -> Result<Self, IsaError> {
        if d_max < self.d_max {
            return Err(IsaError::Inconsistent(format!(
                "cannot shrink {} slots to {d_max}",
                self.d_max
            )));
        }
        let m = self.num_strokes;
        let mut mask = vec![false; d_max * m];
        mask[..self.d_max * m].copy_from_slice(&self.mask);
        Ok(Self {
            d_max,
            mask,
            ..self.clone()
        })
    }

    /// Reference points per stroke.
    pub fn stroke_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_strokes];
        for &s in &self.stroke_of {
            counts[s] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), IsaError> {
        let n = self.len();
        let m = self.num_strokes;
        let bad = |msg: String| Err(IsaError::Inconsistent(msg));
        if self.stroke_of.len() != n || self.slot_of.len() != n {
            return bad(format!(
                "{n} points, {} stroke ids, {} slot ids",
                self.stroke_of.len(),
                self.slot_of.len()
            ));
        }
        if self.mask.len() != self.d_max * m {
            return bad(format!(
                "mask has {} bits for {} x {m}",
                self.mask.len(),
                self.d_max
            ));
        }
        let mut expected = vec![false; self.d_max * m];
        for (j, (&s, &d)) in self.stroke_of.iter().zip(&self.slot_of).enumerate() {
            if s >= m || d >= self.d_max {
                return bad(format!(
                    "point {j} at (slot {d}, stroke {s}) is outside the layout"
                ));
            }
            if std::mem::replace(&mut expected[d * m + s], true) {
                return bad(format!("two points share (slot {d}, stroke {s})"));
            }
        }
        if expected != self.mask {
            return bad("mask does not match the membership maps".into());
        }
        if let Some(s) = self.stroke_counts().iter().position(|&c| c == 0) {
            return Err(IsaError::EmptyStroke(s));
        }
        Ok(())
    }

    /// Coordinates as a zero-padded `(strokes, d_max, 2)` batch.
    pub fn coordinate_batch(&self) -> Tensor {
        let mut data = vec![0.0; self.num_strokes * self.d_max * 2];
        for ((p, &s), &d) in self.points.iter().zip(&self.stroke_of).zip(&self.slot_of) {
            let o = (s * self.d_max + d) * 2;
            data[o] = p.x;
            data[o + 1] = p.y;
        }
        Tensor::new(vec![self.num_strokes, self.d_max, 2], data).expect("batch shape")
    }

    /// Row of every reference point in the flattened `(strokes * d_max)` batch.
    pub fn batch_rows(&self) -> Vec<usize> {
        self.stroke_of
            .iter()
            .zip(&self.slot_of)
            .map(|(&s, &d)| s * self.d_max + d)
            .collect()
    }
}

/// Raw stroke trajectories as a zero-padded `(strokes, max_len, 2)` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeBatch {
    pub input: Tensor,
    pub lengths: Vec<usize>,
}

impl StrokeBatch {
    pub fn from_document(doc: &Document) -> Self {
        let lengths: Vec<usize> = doc.strokes.iter().map(|s| s.points.len()).collect();
        let t = lengths.iter().copied().max().unwrap_or(0);
        let mut data = vec![0.0; lengths.len() * t * 2];
        for (si, s) in doc.strokes.iter().enumerate() {
            for (pi, p) in s.points.iter().enumerate() {
                let o = (si * t + pi) * 2;
                data[o] = p.x;
                data[o + 1] = p.y;
            }
        }
        Self {
            input: Tensor::new(vec![lengths.len(), t, 2], data).expect("batch shape"),
            lengths,
        }
    }

    /// Row of each stroke's final step in the flattened `(strokes * max_len)` batch.
    pub fn last_rows(&self) -> Vec<usize> {
        let t = self.input.shape()[1];
        self.lengths
            .iter()
            .enumerate()
            .map(|(i, &l)| i * t + l - 1)
            .collect()
    }
}

fn init_sequence_encoder(store: &mut ParamStore, prefix: &str, channels: usize, seed: u64) {
    let c = channels;
    store.init_uniform(
        &format!("{prefix}.conv.w"),
        vec![c, 2, CONV_KERNEL],
        2 * CONV_KERNEL,
        seed,
    );
    store.init_uniform(&format!("{prefix}.conv.b"), vec![c], 2 * CONV_KERNEL, seed);
    store.init_uniform(&format!("{prefix}.lstm.w_ih"), vec![c, 4 * c], c, seed);
    store.init_uniform(&format!("{prefix}.lstm.w_hh"), vec![c, 4 * c], c, seed);
    store.init_uniform(&format!("{prefix}.lstm.b"), vec![4 * c], c, seed);
}

/// Registers the two sequence encoders, the attention projections and the
/// layer norm, all of width `channels`.
pub fn init_isa_params(store: &mut ParamStore, channels: usize, seed: u64) {
    init_sequence_encoder(store, "isa.stroke", channels, seed);
    init_sequence_encoder(store, "isa.ref", channels, seed);
    for name in ["isa.w_q", "isa.w_k", "isa.w_v"] {
        store.init_uniform(name, vec![channels, channels], channels, seed);
    }
    store.init_const("isa.ln.gamma", vec![channels], 1.0);
    store.init_const("isa.ln.beta", vec![channels], 0.0);
}

/// Conv1d then LSTM over a `(batch, steps, 2)` input; every hidden state,
/// flattened to `(batch * steps, channels)`.
fn sequence_encoder(
    g: &Graph,
    p: &BoundParams,
    prefix: &str,
    input: Var,
) -> Result<Var, TensorError> {
    let shape = g.shape(input);
    let conv = g.conv1d(
        input,
        p[&*format!("{prefix}.conv.w")],
        p[&*format!("{prefix}.conv.b")],
    )?;
    let h = g.lstm_sequence(
        conv,
        p[&*format!("{prefix}.lstm.w_ih")],
        p[&*format!("{prefix}.lstm.w_hh")],
        p[&*format!("{prefix}.lstm.b")],
    )?;
    let c = g.shape(h)[2];
    g.reshape(h, vec![shape[0] * shape[1], c])
}

/// Per-stroke sequence features, `(strokes, channels)`.
pub fn encode_stroke_features(
    g: &Graph,
    p: &BoundParams,
    batch: &StrokeBatch,
) -> Result<Var, IsaError> {
    let x = g.constant(batch.input.clone());
    let h = sequence_encoder(g, p, "isa.stroke", x)?;
    Ok(g.gather(h, &batch.last_rows())?)
}

/// Per-reference-point sequence features, `(pairs, channels)`.
pub fn encode_reference_features(
    g: &Graph,
    p: &BoundParams,
    pairs: &ReferencePairSet,
) -> Result<Var, IsaError> {
    let x = g.constant(pairs.coordinate_batch());
    let h = sequence_encoder(g, p, "isa.ref", x)?;
    Ok(g.gather(h, &pairs.batch_rows())?)
}

#[derive(Debug, Clone, Copy)]
pub struct IsaOutput {
    /// Fused pair features, `(pairs, channels)`.
    pub features: Var,
    /// Attention of each reference point over the strokes, `(pairs, strokes)`.
    pub attention: Var,
}

fn check_rows(g: &Graph, v: Var, rows: usize, what: &str) -> Result<(), IsaError> {
    let shape = g.shape(v);
    if shape.len() != 2 || shape[0] != rows {
        return Err(IsaError::Inconsistent(format!(
            "{what} has shape {shape:?}, expected {rows} rows"
        )));
    }
    Ok(())
}

/// `relu(f_s[stroke] + layer_norm(softmax(q k^T) v))` with `q = f_p w_q`,
/// `k = f_s w_k`, `v = f_s w_v`, no score scaling.
pub fn inline_sequence_attention(
    g: &Graph,
    p: &BoundParams,
    f_p: Var,
    f_s: Var,
    pairs: &ReferencePairSet,
) -> Result<IsaOutput, IsaError> {
    pairs.validate()?;
    check_rows(g, f_p, pairs.len(), "point features")?;
    check_rows(g, f_s, pairs.num_strokes, "stroke features")?;
    let q = g.matmul(f_p, p["isa.w_q"])?;
    let k = g.matmul(f_s, p["isa.w_k"])?;
    let v = g.matmul(f_s, p["isa.w_v"])?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let attention = g.softmax(scores, 1)?;
    let out = g.matmul(attention, v)?;
    let normed = g.layer_norm(out, p["isa.ln.gamma"], p["isa.ln.beta"], LN_EPS)?;
    let base = g.gather(f_s, &pairs.stroke_of)?;
    let sum = g.add(base, normed)?;
    Ok(IsaOutput {
        features: g.relu(sum),
        attention,
    })
}

/// Each reference point takes its stroke's feature unchanged.
pub fn broadcast_stroke_features(
    g: &Graph,
    f_s: Var,
    pairs: &ReferencePairSet,
) -> Result<Var, IsaError> {
    check_rows(g, f_s, pairs.num_strokes, "stroke features")?;
    Ok(g.gather(f_s, &pairs.stroke_of)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::Stroke;
    use crate::ref_select::{select_reference_points, SelectionConfig};

    const C: usize = 6;

    fn doc(strokes: &[&[(f64, f64)]]) -> Document {
        Document::new(
            "t",
            2,
            strokes
                .iter()
                .map(|s| Stroke::new(s.iter().map(|&(x, y)| Point::new(x, y)).collect(), None))
                .collect(),
        )
    }

    fn pairs_of(d: &Document) -> ReferencePairSet {
        let cfg = SelectionConfig::default();
        let sel: Vec<_> = d
            .strokes
            .iter()
            .map(|s| select_reference_points(s, &cfg).unwrap())
            .collect();
        ReferencePairSet::build(d, &sel).unwrap()
    }

    fn params() -> ParamStore {
        let mut s = ParamStore::new();
        init_isa_params(&mut s, C, 3);
        s
    }

    fn three_strokes() -> Document {
        doc(&[
            &[
                (-0.5, 0.0),
                (-0.4, 0.05),
                (-0.3, 0.0),
                (-0.2, 0.1),
                (-0.1, 0.0),
            ],
            &[(0.0, -0.5), (0.0, -0.3), (0.0, -0.1), (0.02, 0.1)],
            &[(0.5, 0.5)],
        ])
    }

    #[test]
    fn pair_set_layout() {
        let d = three_strokes();
        let pairs = pairs_of(&d);
        pairs.validate().unwrap();
        assert_eq!(pairs.stroke_counts().iter().sum::<usize>(), pairs.len());
        assert_eq!(pairs.d_max, *pairs.stroke_counts().iter().max().unwrap());
        assert!(pairs.slot_of.iter().all(|&s| s < pairs.d_max));
        let mut broken = pairs.clone();
        broken.mask[0] = false;
        assert!(matches!(broken.validate(), Err(IsaError::Inconsistent(_))));
        assert!(pairs.with_slots(pairs.d_max - 1).is_err());
    }

    #[test]
    fn shapes_and_single_point_stroke() {
        let d = three_strokes();
        let pairs = pairs_of(&d);
        let store = params();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let f_s = encode_stroke_features(&g, &p, &StrokeBatch::from_document(&d)).unwrap();
        let f_p = encode_reference_features(&g, &p, &pairs).unwrap();
        assert_eq!(g.shape(f_s), vec![3, C]);
        assert_eq!(g.shape(f_p), vec![pairs.len(), C]);
        let out = inline_sequence_attention(&g, &p, f_p, f_s, &pairs).unwrap();
        assert_eq!(g.shape(out.features), vec![pairs.len(), C]);
        assert!(g.value(out.features).data().iter().all(|v| v.is_finite()));
        let w = g.to_tensor(out.attention);
        for r in 0..w.rows() {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_strokes_give_identical_features() {
        let s: &[(f64, f64)] = &[(0.0, 0.0), (0.1, 0.0), (0.2, 0.05), (0.3, 0.0)];
        let d = doc(&[s, s]);
        let pairs = pairs_of(&d);
        let store = params();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let f_s =
            g.to_tensor(encode_stroke_features(&g, &p, &StrokeBatch::from_document(&d)).unwrap());
        assert_eq!(f_s.row(0), f_s.row(1));
        let f_p = g.to_tensor(encode_reference_features(&g, &p, &pairs).unwrap());
        let half = pairs.len() / 2;
        assert_eq!(&f_p.data()[..half * C], &f_p.data()[half * C..]);
    }

    #[test]
    fn reference_order_matters() {
        let fwd = doc(&[&[(0.0, 0.0), (0.1, 0.1), (0.2, 0.0), (0.3, 0.2), (0.4, 0.0)]]);
        let mut rev = fwd.clone();
        rev.strokes[0].points.reverse();
        let store = params();
        let run = |d: &Document| {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            let pairs = pairs_of(d);
            g.to_tensor(encode_reference_features(&g, &p, &pairs).unwrap())
        };
        assert_ne!(run(&fwd), run(&rev));
    }

    #[test]
    fn single_stroke_attends_to_itself() {
        let d = doc(&[&[(0.0, 0.0), (0.1, 0.0), (0.2, 0.0)]]);
        let pairs = pairs_of(&d);
        let store = params();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let f_s = encode_stroke_features(&g, &p, &StrokeBatch::from_document(&d)).unwrap();
        let f_p = encode_reference_features(&g, &p, &pairs).unwrap();
        let out = inline_sequence_attention(&g, &p, f_p, f_s, &pairs).unwrap();
        assert!(g.value(out.attention).data().iter().all(|&w| w == 1.0));
        let v = g.matmul(f_s, p["isa.w_v"]).unwrap();
        let ln = g
            .layer_norm(v, p["isa.ln.gamma"], p["isa.ln.beta"], LN_EPS)
            .unwrap();
        let expect = g.relu(g.add(f_s, ln).unwrap());
        let got = g.to_tensor(out.features);
        let want = g.to_tensor(expect);
        for r in 0..got.rows() {
            assert_eq!(got.row(r), want.row(0));
        }
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let d = three_strokes();
        let pairs = pairs_of(&d);
        let mut store = params();
        store.init_const("isa.w_k", vec![C, C], 0.0);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let f_s = encode_stroke_features(&g, &p, &StrokeBatch::from_document(&d)).unwrap();
        let f_p = encode_reference_features(&g, &p, &pairs).unwrap();
        let out = inline_sequence_attention(&g, &p, f_p, f_s, &pairs).unwrap();
        assert!(g
            .value(out.attention)
            .data()
            .iter()
            .all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn broadcast_rows_match_stroke() {
        let d = three_strokes();
        let pairs = pairs_of(&d);
        let store = params();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let f_s = encode_stroke_features(&g, &p, &StrokeBatch::from_document(&d)).unwrap();
        let b = g.to_tensor(broadcast_stroke_features(&g, f_s, &pairs).unwrap());
        let fs = g.to_tensor(f_s);
        for (j, &s) in pairs.stroke_of.iter().enumerate() {
            assert_eq!(b.row(j), fs.row(s));
        }
    }

    #[test]
    fn extra_slots_leave_features_bit_identical() {
        let d = three_strokes();
        let pairs = pairs_of(&d);
        let padded = pairs.with_slots(pairs.d_max + 5).unwrap();
        padded.validate().unwrap();
        let store = params();
        let run = |ps: &ReferencePairSet| {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            let f_s = encode_stroke_features(&g, &p, &StrokeBatch::from_document(&d)).unwrap();
            let f_p = encode_reference_features(&g, &p, ps).unwrap();
            g.to_tensor(
                inline_sequence_attention(&g, &p, f_p, f_s, ps)
                    .unwrap()
                    .features,
            )
        };
        assert_eq!(run(&pairs), run(&padded));
    }

    #[test]
    fn rejects_mismatched_features() {
        let d = three_strokes();
        let pairs = pairs_of(&d);
        let store = params();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let f_s = g.constant(Tensor::zeros(vec![2, C]));
        let f_p = g.constant(Tensor::zeros(vec![pairs.len(), C]));
        assert!(matches!(
            inline_sequence_attention(&g, &p, f_p, f_s, &pairs),
            Err(IsaError::Inconsistent(_))
        ));
    }
}
