use inkpairs::data_io::{generate_corpus, CorpusSpec};
use inkpairs::runner::{model_from_checkpoint, predict, train, TrainConfig};

#[test]
fn loss_falls_over_ten_epochs() {
    let docs = generate_corpus(&CorpusSpec {
        num_documents: 12,
        ..CorpusSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        ..TrainConfig::desk()
    };
    let out = train(&docs, None, &cfg).unwrap();
    assert_eq!(out.log.len(), 10);
    assert!(out.log.iter().all(|e| e.loss.is_finite()));
    assert!(out.log[9].loss < out.log[0].loss, "{:?}", out.log);

    let reloaded = model_from_checkpoint(&out.checkpoint, Some(&cfg.model)).unwrap();
    assert_eq!(reloaded, out.model);
    let pred = predict(&docs[0], &reloaded).unwrap();
    assert_eq!(pred, predict(&docs[0], &out.model).unwrap());
    assert_eq!(pred.labels.len(), docs[0].strokes.len());
}
