//! Training, evaluation and prediction over document corpora.
//!
//! One optimizer step consumes `accumulate` documents. Their gradients are
//! computed in parallel and summed in document order, so runs are bit-exact
//! functions of corpus, configuration and seed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::LossConfig;
use crate::ink::Document;
use crate::metrics::{EvalReport, MetricsError};
use crate::model::{
    argmax_rows, forward, loss, Model, ModelConfig, ModelError, Prediction, PreparedDocument,
};
use crate::tensor::{
    cosine_lr, AdamConfig, AdamState, Checkpoint, CheckpointError, CheckpointHeader, Graph, Tensor,
    CHECKPOINT_FORMAT,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("document `{id}`: {source}")]
    Document {
        id: String,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint config hash {checkpoint} does not match {expected}")]
    ConfigMismatch {
        checkpoint: String,
        expected: String,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub rng_seed: u64,
    /// Documents per optimizer step.
    pub accumulate: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            epochs: 50,
            lr0: 0.001,
            lr_min: 0.0,
            rng_seed: 0,
            accumulate: 1,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Default schedule with [`ModelConfig::desk`].
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        self.model.validate()?;
        self.loss.validate().map_err(ModelError::from)?;
        if self.accumulate == 0 {
            return Err(RunError::Config("accumulate must be at least 1".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr0) {
            return Err(RunError::Config(format!(
                "need 0 <= lr_min <= lr0, got lr0 = {}, lr_min = {}",
                self.lr0, self.lr_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean joint loss over the epoch's documents.
    pub loss: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serialization")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

fn prepare_all(
    docs: &[Document],
    cfg: &ModelConfig,
    labeled: bool,
) -> Result<Vec<PreparedDocument>, RunError> {
    docs.par_iter()
        .map(|d| {
            if labeled && !d.is_labeled() {
                return Err(RunError::Document {
                    id: d.id.clone(),
                    source: ModelError::Unlabeled(d.id.clone()),
                });
            }
            PreparedDocument::new(d, cfg).map_err(|source| RunError::Document {
                id: d.id.clone(),
                source,
            })
        })
        .collect()
}

struct StepResult {
    loss: f64,
    correct: usize,
    strokes: usize,
    grads: BTreeMap<String, Tensor>,
}

fn step_document(
    model: &Model,
    loss_cfg: &LossConfig,
    doc: &PreparedDocument,
) -> Result<StepResult, RunError> {
    let g = Graph::new();
    let p = model.params.bind(&g);
    let wrap = |source| RunError::Document {
        id: doc.id.clone(),
        source,
    };
    let pass = forward(&g, &p, &model.config, doc).map_err(wrap)?;
    let l = loss(&g, &model.config, loss_cfg, doc, &pass).map_err(wrap)?;
    g.backward(l).map_err(|e| wrap(e.into()))?;
    let preds = argmax_rows(&g, pass.logits);
    let labels = doc.labels.as_ref().expect("prepared as labeled");
    let loss_value = g.value(l).item();
    Ok(StepResult {
        loss: loss_value,
        correct: preds.iter().zip(labels).filter(|(a, b)| a == b).count(),
        strokes: labels.len(),
        grads: p.grads(&g),
    })
}

fn accumulate_grads(total: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match total.get_mut(&name) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                total.insert(name, g);
            }
        }
    }
}

/// Trains a fresh model; `on_epoch` sees each log record as it is produced.
pub fn train_with(
    train_docs: &[Document],
    val_docs: Option<&[Document]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput, RunError> {
    cfg.validate()?;
    if train_docs.is_empty() {
        return Err(RunError::EmptyCorpus);
    }
    let prepared = prepare_all(train_docs, &cfg.model, true)?;
    let val = val_docs
        .map(|v| prepare_all(v, &cfg.model, true))
        .transpose()?;
    let mut model = Model::new(cfg.model.clone(), cfg.rng_seed)?;
    let mut adam = AdamState::new(cfg.adam);
    let steps_per_epoch = prepared.len().div_ceil(cfg.accumulate);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut step = 0u64;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.rng_seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut strokes) = (0.0, 0, 0);
        let mut lr = cfg.lr0;
        for chunk in order.chunks(cfg.accumulate) {
            let results: Vec<StepResult> = chunk
                .par_iter()
                .map(|&i| step_document(&model, &cfg.loss, &prepared[i]))
                .collect::<Result<_, _>>()?;
            let mut grads = BTreeMap::new();
            for r in results {
                loss_sum += r.loss;
                correct += r.correct;
                strokes += r.strokes;
                accumulate_grads(&mut grads, r.grads);
            }
            if chunk.len() > 1 {
                let inv = 1.0 / chunk.len() as f64;
                for t in grads.values_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
            }
            lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min);
            adam.step(&mut model.params, &grads, lr);
            step += 1;
        }
        let val_accuracy = match &val {
            Some(v) if !v.is_empty() => Some(evaluate_prepared(&model, v)?.overall_accuracy),
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            loss: loss_sum / prepared.len() as f64,
            train_accuracy: correct as f64 / strokes as f64,
            val_accuracy,
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    let checkpoint = checkpoint_of(&model, cfg.rng_seed);
    Ok(TrainOutput {
        model,
        checkpoint,
        log,
    })
}

pub fn train(
    train_docs: &[Document],
    val_docs: Option<&[Document]>,
    cfg: &TrainConfig,
) -> Result<TrainOutput, RunError> {
    train_with(train_docs, val_docs, cfg, |_| {})
}

pub fn checkpoint_of(model: &Model, rng_seed: u64) -> Checkpoint {
    Checkpoint {
        header: CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_owned(),
            config_hash: model.config.hash(),
            rng_seed,
        },
        config: serde_json::to_value(&model.config).expect("config serialization"),
        params: model.params.clone(),
    }
}

/// Rebuilds a model, checking the stored hash against the stored config and,
/// when given, against the configuration the caller expects.
pub fn model_from_checkpoint(
    ckpt: &Checkpoint,
    expected: Option<&ModelConfig>,
) -> Result<Model, RunError> {
    let config: ModelConfig =
        serde_json::from_value(ckpt.config.clone()).map_err(CheckpointError::from)?;
    let stored = config.hash();
    if stored != ckpt.header.config_hash {
        return Err(RunError::ConfigMismatch {
            checkpoint: ckpt.header.config_hash.clone(),
            expected: stored,
        });
    }
    if let Some(e) = expected {
        if e.hash() != stored {
            return Err(RunError::ConfigMismatch {
                checkpoint: stored,
                expected: e.hash(),
            });
        }
    }
    let fresh = config.init_params(0)?;
    let shapes_match = fresh.len() == ckpt.params.len()
        && fresh
            .iter()
            .all(|(k, v)| ckpt.params.get(k).is_some_and(|c| c.shape() == v.shape()));
    if !shapes_match {
        return Err(RunError::Config(
            "checkpoint parameters do not match its configuration".into(),
        ));
    }
    Ok(Model {
        config,
        params: ckpt.params.clone(),
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, RunError> {
    let bytes = std::fs::read(path).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), RunError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn evaluate_prepared(model: &Model, docs: &[PreparedDocument]) -> Result<EvalReport, RunError> {
    let preds: Vec<Vec<usize>> = docs
        .par_iter()
        .map(|d| {
            model
                .predict_prepared(d)
                .map(|p| p.labels)
                .map_err(|source| RunError::Document {
                    id: d.id.clone(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;
    let truths: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.labels.clone().expect("labeled"))
        .collect();
    Ok(EvalReport::new(&preds, &truths, model.config.num_classes)?)
}

pub fn evaluate(docs: &[Document], model: &Model) -> Result<EvalReport, RunError> {
    if docs.is_empty() {
        return Err(RunError::EmptyCorpus);
    }
    let prepared = prepare_all(docs, &model.config, true)?;
    evaluate_prepared(model, &prepared)
}

/// Evaluates a checkpoint, refusing it when its configuration differs from `expected`.
pub fn evaluate_checkpoint(
    docs: &[Document],
    ckpt: &Checkpoint,
    expected: Option<&ModelConfig>,
) -> Result<EvalReport, RunError> {
    evaluate(docs, &model_from_checkpoint(ckpt, expected)?)
}

pub fn predict(doc: &Document, model: &Model) -> Result<Prediction, RunError> {
    model.predict(doc).map_err(|source| RunError::Document {
        id: doc.id.clone(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_corpus, CorpusSpec};
    use crate::hierarchy::InterpConfig;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.model.channels = 4;
        for l in &mut cfg.model.hierarchy.levels {
            l.k_cap = 4;
            l.mlp_channels = vec![4];
        }
        cfg.model.hierarchy.fp_channels = vec![vec![4]; 4];
        cfg.model.hierarchy.interp = InterpConfig::default();
        cfg.model.rpts_channels = vec![4];
        cfg.model.head_hidden = 4;
        cfg.model.aux_hidden = 4;
        cfg.epochs = 1;
        cfg
    }

    fn corpus(n: usize) -> Vec<Document> {
        generate_corpus(&CorpusSpec {
            num_documents: n,
            strokes_per_doc: (4, 6),
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn one_epoch_smoke() {
        let docs = corpus(1);
        let out = train(&docs, None, &tiny_config()).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].loss.is_finite());
        assert_eq!(out.checkpoint.header.config_hash, out.model.config.hash());
    }

    #[test]
    fn unlabeled_and_empty_corpora_are_rejected() {
        let mut docs = corpus(1);
        assert!(matches!(
            train(&[], None, &tiny_config()),
            Err(RunError::EmptyCorpus)
        ));
        docs[0].strokes.iter_mut().for_each(|s| s.label = None);
        assert!(matches!(
            train(&docs, None, &tiny_config()),
            Err(RunError::Document { .. })
        ));
        let model = Model::new(tiny_config().model, 0).unwrap();
        assert!(matches!(evaluate(&[], &model), Err(RunError::EmptyCorpus)));
    }

    #[test]
    fn checkpoint_config_mismatch() {
        let docs = corpus(1);
        let cfg = tiny_config();
        let out = train(&docs, None, &cfg).unwrap();
        let mut other = cfg.model.clone();
        other.ablations.isa_off = true;
        assert!(matches!(
            evaluate_checkpoint(&docs, &out.checkpoint, Some(&other)),
            Err(RunError::ConfigMismatch { .. })
        ));
        let report = evaluate_checkpoint(&docs, &out.checkpoint, Some(&cfg.model)).unwrap();
        assert_eq!(report.num_documents, 1);
        let mut tampered = out.checkpoint.clone();
        tampered.header.config_hash = "0".repeat(64);
        assert!(matches!(
            model_from_checkpoint(&tampered, None),
            Err(RunError::ConfigMismatch { .. })
        ));
    }

    #[test]
    fn accumulation_runs_and_is_deterministic() {
        let docs = corpus(3);
        let mut cfg = tiny_config();
        cfg.accumulate = 2;
        let a = train(&docs, Some(&docs), &cfg).unwrap();
        let b = train(&docs, Some(&docs), &cfg).unwrap();
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log, b.log);
        assert!(a.log[0].val_accuracy.is_some());
    }
}
