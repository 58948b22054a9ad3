//! The full stroke classifier: configuration, per-document preparation and
//! the forward pass.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::heads::{
    aux_transition_logits, classify, init_head_params, init_rpts_concat_params, init_rpts_params,
    joint_loss, make_aux_labels, rpts_concat, rpts_pool, HeadError, LossConfig,
};
use crate::hierarchy::{
    encode_decode, init_hierarchy_params, EncodeDecodeOutput, HierarchyConfig, HierarchyError,
    HierarchyPlan, InterpConfig, LevelConfig,
};
use crate::ink::{normalize_document, validate_document, Document, InkError};
use crate::isa::{
    broadcast_stroke_features, encode_reference_features, encode_stroke_features, init_isa_params,
    inline_sequence_attention, IsaError, ReferencePairSet, StrokeBatch,
};
use crate::layers::Init;
use crate::ref_select::{select_reference_points, SelectionConfig, SelectionError};
use crate::spatial::AxisRatio;
use crate::tensor::{BoundParams, Graph, ParamStore, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Ink(#[from] InkError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Isa(#[from] IsaError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("document `{id}` has {found} classes, model expects {expected}")]
    ClassCount {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("document `{0}` is not labeled")]
    Unlabeled(String),
}

/// Switches that each replace one component with its simpler baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Reference points take their stroke feature instead of attention output.
    pub isa_off: bool,
    /// Only the circular 2:2 query branch.
    pub ceq_ball_only: bool,
    /// Fixed-slot concatenation instead of MLP and max per stroke.
    pub rpts_concat: bool,
    /// Transition loss weight forced to zero.
    pub aux_off: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub selection: SelectionConfig,
    /// Width of the sequence encoders and attention.
    pub channels: usize,
    pub hierarchy: HierarchyConfig,
    pub rpts_channels: Vec<usize>,
    /// Slots per stroke under `ablations.rpts_concat`.
    pub rpts_concat_slots: usize,
    pub head_hidden: usize,
    pub aux_hidden: usize,
    /// Linear weights start in `U(-sqrt(gain / fan_in), sqrt(gain / fan_in))`.
    pub weight_gain: f64,
    pub ablations: Ablations,
}

fn levels(sizes: [usize; 4], k_cap: usize, widths: [Vec<usize>; 4]) -> Vec<LevelConfig> {
    let radii = [0.05, 0.1, 0.2, 0.4];
    sizes
        .into_iter()
        .zip(radii)
        .zip(widths)
        .map(|((n_points, radius), mlp_channels)| LevelConfig {
            n_points,
            radius,
            ratios: AxisRatio::DEFAULT.to_vec(),
            k_cap,
            mlp_channels,
        })
        .collect()
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            selection: SelectionConfig::default(),
            channels: 64,
            hierarchy: HierarchyConfig {
                levels: levels(
                    [1024, 512, 256, 128],
                    32,
                    [vec![32, 64], vec![64, 128], vec![128, 256], vec![256, 512]],
                ),
                fp_channels: vec![
                    vec![128, 128],
                    vec![256, 128],
                    vec![256, 256],
                    vec![256, 256],
                ],
                interp: InterpConfig::default(),
            },
            rpts_channels: vec![128, 128],
            rpts_concat_slots: 10,
            head_hidden: 128,
            aux_hidden: 64,
            weight_gain: 6.0,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    /// Narrow widths and levels of 256, 128, 64 and 32 points, sized for
    /// training on a single CPU.
    pub fn desk() -> Self {
        Self {
            channels: 16,
            hierarchy: HierarchyConfig {
                levels: levels(
                    [256, 128, 64, 32],
                    16,
                    [vec![16, 16], vec![32, 32], vec![32, 32], vec![32, 32]],
                ),
                fp_channels: vec![vec![32], vec![32], vec![32], vec![32]],
                interp: InterpConfig::default(),
            },
            rpts_channels: vec![32],
            head_hidden: 32,
            aux_hidden: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        if self.channels == 0 || self.head_hidden == 0 || self.aux_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if self.rpts_channels.is_empty() || self.rpts_channels.contains(&0) {
            return bad("rpts_channels needs positive widths");
        }
        if !(self.weight_gain > 0.0 && self.weight_gain.is_finite()) {
            return bad("weight_gain must be positive");
        }
        if self.rpts_concat_slots == 0 {
            return bad("rpts_concat_slots must be at least 1");
        }
        self.selection.validate()?;
        self.effective_hierarchy().validate()?;
        Ok(())
    }

    /// The hierarchy as run, with ablations applied.
    pub fn effective_hierarchy(&self) -> HierarchyConfig {
        let mut h = self.hierarchy.clone();
        if self.ablations.ceq_ball_only {
            for l in &mut h.levels {
                l.ratios = vec![AxisRatio::BALL];
            }
        }
        h
    }

    /// Hex SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialization");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore, ModelError> {
        self.validate()?;
        let mut store = ParamStore::new();
        let init = Init {
            seed,
            weight_gain: self.weight_gain,
        };
        init_isa_params(&mut store, self.channels, seed);
        let point_c =
            init_hierarchy_params(&mut store, &self.effective_hierarchy(), self.channels, init);
        let stroke_c = if self.ablations.rpts_concat {
            init_rpts_concat_params(
                &mut store,
                point_c,
                self.rpts_concat_slots,
                &self.rpts_channels,
                init,
            )
        } else {
            init_rpts_params(&mut store, point_c, &self.rpts_channels, init)
        };
        init_head_params(
            &mut store,
            stroke_c,
            self.head_hidden,
            self.aux_hidden,
            self.num_classes,
            init,
        );
        Ok(store)
    }
}

/// Everything about a document that does not depend on parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDocument {
    pub id: String,
    pub normalized: Document,
    pub labels: Option<Vec<usize>>,
    pub aux_labels: Option<Vec<usize>>,
    pub strokes: StrokeBatch,
    pub pairs: ReferencePairSet,
    pub plan: HierarchyPlan,
}

impl PreparedDocument {
    pub fn new(doc: &Document, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let violations = validate_document(doc);
        if !violations.is_empty() {
            return Err(InkError::Invalid(violations).into());
        }
        if doc.num_classes != cfg.num_classes {
            return Err(ModelError::ClassCount {
                id: doc.id.clone(),
                expected: cfg.num_classes,
                found: doc.num_classes,
            });
        }
        let normalized = normalize_document(doc)?;
        let selections = normalized
            .strokes
            .iter()
            .map(|s| select_reference_points(s, &cfg.selection))
            .collect::<Result<Vec<_>, _>>()?;
        let pairs = ReferencePairSet::build(&normalized, &selections)?;
        let plan = HierarchyPlan::new(&pairs.points, &cfg.effective_hierarchy())?;
        let labels = normalized.labels();
        Ok(Self {
            id: doc.id.clone(),
            aux_labels: labels.as_deref().map(make_aux_labels),
            labels,
            strokes: StrokeBatch::from_document(&normalized),
            pairs,
            plan,
            normalized,
        })
    }

    pub fn num_strokes(&self) -> usize {
        self.pairs.num_strokes
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Per-stroke sequence features, `(strokes, channels)`.
    pub stroke_seq: Var,
    /// Per-reference-point sequence features; absent with `isa_off`.
    pub point_seq: Option<Var>,
    /// `(pairs, strokes)` attention; absent with `isa_off`.
    pub attention: Option<Var>,
    /// Pair features entering the hierarchy, `(pairs, channels)`.
    pub pair_feats: Var,
    pub hierarchy: EncodeDecodeOutput,
    pub stroke_feats: Var,
    pub logits: Var,
    /// `(strokes - 1, 2)`; absent for single-stroke documents.
    pub aux_logits: Option<Var>,
}

pub fn forward(
    g: &Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    doc: &PreparedDocument,
) -> Result<ForwardPass, ModelError> {
    let pairs = &doc.pairs;
    let stroke_seq = encode_stroke_features(g, p, &doc.strokes)?;
    let (point_seq, attention, pair_feats) = if cfg.ablations.isa_off {
        (None, None, broadcast_stroke_features(g, stroke_seq, pairs)?)
    } else {
        let f_p = encode_reference_features(g, p, pairs)?;
        let out = inline_sequence_attention(g, p, f_p, stroke_seq, pairs)?;
        (Some(f_p), Some(out.attention), out.features)
    };
    let hierarchy = encode_decode(g, p, pair_feats, &doc.plan, &cfg.effective_hierarchy())?;
    let layers = cfg.rpts_channels.len();
    let stroke_feats = if cfg.ablations.rpts_concat {
        rpts_concat(
            g,
            p,
            hierarchy.output,
            &pairs.stroke_of,
            &pairs.slot_of,
            pairs.num_strokes,
            cfg.rpts_concat_slots,
            layers,
        )?
    } else {
        rpts_pool(
            g,
            p,
            hierarchy.output,
            &pairs.stroke_of,
            pairs.num_strokes,
            layers,
        )?
    };
    let logits = classify(g, p, stroke_feats)?;
    let aux_logits = aux_transition_logits(g, p, stroke_feats)?;
    Ok(ForwardPass {
        stroke_seq,
        point_seq,
        attention,
        pair_feats,
        hierarchy,
        stroke_feats,
        logits,
        aux_logits,
    })
}

/// Joint loss of a forward pass; `aux_off` forces the transition weight to zero.
pub fn loss(
    g: &Graph,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    doc: &PreparedDocument,
    pass: &ForwardPass,
) -> Result<Var, ModelError> {
    let (Some(labels), Some(aux_labels)) = (&doc.labels, &doc.aux_labels) else {
        return Err(ModelError::Unlabeled(doc.id.clone()));
    };
    let mut lc = *loss_cfg;
    if cfg.ablations.aux_off {
        lc.aux_weight = 0.0;
    }
    let aux = pass.aux_logits.map(|a| (a, aux_labels.as_slice()));
    Ok(joint_loss(g, pass.logits, labels, aux, &lc)?)
}

/// Forward pass and loss in one call.
pub fn forward_loss(
    g: &Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    doc: &PreparedDocument,
) -> Result<Var, ModelError> {
    let pass = forward(g, p, cfg, doc)?;
    loss(g, cfg, loss_cfg, doc, &pass)
}

/// Row-wise argmax; ties go to the lower class.
pub fn argmax_rows(g: &Graph, v: Var) -> Vec<usize> {
    let t = g.value(v);
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect()
}

/// Per-stroke classes and, separately, the transition branch's verdicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// One entry per adjacent stroke pair: 1 where a class change is predicted.
    pub transitions: Vec<usize>,
}

/// Trained parameters with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = config.init_params(seed)?;
        Ok(Self { config, params })
    }

    pub fn prepare(&self, doc: &Document) -> Result<PreparedDocument, ModelError> {
        PreparedDocument::new(doc, &self.config)
    }

    pub fn predict_prepared(&self, doc: &PreparedDocument) -> Result<Prediction, ModelError> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let pass = forward(&g, &p, &self.config, doc)?;
        Ok(Prediction {
            labels: argmax_rows(&g, pass.logits),
            transitions: pass
                .aux_logits
                .map(|a| argmax_rows(&g, a))
                .unwrap_or_default(),
        })
    }

    pub fn predict(&self, doc: &Document) -> Result<Prediction, ModelError> {
        self.predict_prepared(&self.prepare(doc)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ink::{Point, Stroke};
    use crate::tensor::Tensor;

    fn tiny_doc() -> Document {
        let line = |y: f64, n: usize| {
            (0..n)
                .map(|i| Point::new(-0.5 + 0.05 * i as f64, y))
                .collect::<Vec<_>>()
        };
        Document::new(
            "toy",
            3,
            vec![
                Stroke::new(line(0.0, 12), Some(0)),
                Stroke::new(line(0.2, 5), Some(1)),
                Stroke::new(vec![Point::new(0.3, -0.4)], Some(1)),
            ],
        )
    }

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.hash(), ModelConfig::default().hash());
        assert_ne!(cfg.hash(), ModelConfig::desk().hash());
        let back: ModelConfig = serde_json::from_slice(&serde_json::to_vec(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn forward_shapes() {
        let model = Model::new(ModelConfig::desk(), 1).unwrap();
        let prep = model.prepare(&tiny_doc()).unwrap();
        let g = Graph::new();
        let p = model.params.bind_frozen(&g);
        let pass = forward(&g, &p, &model.config, &prep).unwrap();
        assert_eq!(g.shape(pass.logits), vec![3, 3]);
        assert_eq!(g.shape(pass.aux_logits.unwrap()), vec![2, 2]);
        assert_eq!(g.shape(pass.hierarchy.output), vec![prep.pairs.len(), 32]);
        let l = loss(&g, &model.config, &LossConfig::default(), &prep, &pass).unwrap();
        assert!(g.value(l).item().is_finite());
    }

    #[test]
    fn single_stroke_document() {
        let model = Model::new(ModelConfig::desk(), 1).unwrap();
        let mut d = tiny_doc();
        d.strokes.truncate(1);
        let pred = model.predict(&d).unwrap();
        assert_eq!(pred.labels.len(), 1);
        assert!(pred.transitions.is_empty());
        assert_eq!(pred, model.predict(&d).unwrap());
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let model = Model::new(ModelConfig::desk(), 1).unwrap();
        let mut d = tiny_doc();
        d.num_classes = 4;
        assert!(matches!(
            model.prepare(&d),
            Err(ModelError::ClassCount { .. })
        ));
    }

    #[test]
    fn translation_before_normalization_is_invisible() {
        let model = Model::new(ModelConfig::desk(), 2).unwrap();
        let d = tiny_doc();
        let mut moved = d.clone();
        for s in &mut moved.strokes {
            for p in &mut s.points {
                p.x += 0.1;
                p.y += 0.1;
            }
        }
        let run = |doc: &Document| {
            let prep = model.prepare(doc).unwrap();
            let g = Graph::new();
            let p = model.params.bind_frozen(&g);
            g.to_tensor(
                forward(&g, &p, &model.config, &prep)
                    .unwrap()
                    .hierarchy
                    .output,
            )
        };
        let (a, b) = (run(&d), run(&moved));
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn argmax_ties_go_low() {
        let g = Graph::new();
        let v = g.constant(Tensor::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 2.0]]).unwrap());
        assert_eq!(argmax_rows(&g, v), vec![0, 1]);
    }
}
