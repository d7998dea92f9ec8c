use fga::harness::{train, DialogRecord, TrainLog};
use fga::model::{tiny_config, tiny_records, tiny_vocabulary, Checkpoint, Model};
use fga::FgaError;

fn data(n: usize, seed: u64) -> Vec<DialogRecord> {
    tiny_records(&tiny_config(0), &tiny_vocabulary(), n, seed).unwrap()
}

fn run(epochs: usize, seed: u64) -> (Checkpoint, TrainLog) {
    let mut config = tiny_config(seed);
    config.epochs = epochs;
    train(&config, &tiny_vocabulary(), &data(12, 1), &data(6, 2)).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = run(2, 0);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded, ckpt);
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.bin")).unwrap(), std::fs::read(dir.path().join("b.bin")).unwrap());
    let manifest = |p| std::fs::read_to_string(p).unwrap().replace("\"b.bin\"", "\"a.bin\"");
    assert_eq!(manifest(&a), manifest(&b));
}

#[test]
fn loaded_model_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = run(2, 0);
    let path = dir.path().join("m.json");
    ckpt.save(&path).unwrap();
    let records = data(7, 3);
    let before = ckpt.to_model().unwrap().predict(&records).unwrap();
    let after = Checkpoint::load(&path).unwrap().to_model().unwrap().predict(&records).unwrap();
    assert_eq!(before, after);
}

#[test]
fn checkpoint_round_trip_of_a_model_rounds_to_f32() {
    let mut m = Model::new(tiny_config(3), tiny_vocabulary()).unwrap();
    m.mark_batch_norms_ready();
    let back = Checkpoint::from_model(&m).to_model().unwrap();
    let mut rounded = m.clone();
    rounded.round_to_f32();
    let records = data(4, 3);
    assert_eq!(back.predict_probs(&records).unwrap(), rounded.predict_probs(&records).unwrap());
}

#[test]
fn tampered_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = run(0, 0);
    let path = dir.path().join("m.json");
    ckpt.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["config"]["seed"] = serde_json::json!(99);
    std::fs::write(&path, v.to_string()).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, FgaError::Checkpoint { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn truncated_blob_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = run(0, 0);
    let path = dir.path().join("m.json");
    ckpt.save(&path).unwrap();
    let blob = dir.path().join("m.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Checkpoint::load(&path).unwrap_err(), FgaError::Checkpoint { .. }));
}

#[test]
fn manifest_must_not_use_the_blob_extension() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = run(0, 0);
    assert!(ckpt.save(&dir.path().join("m.bin")).is_err());
}

#[test]
fn pruned_edges_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = run(1, 0).0.to_model().unwrap();
    let edge = fga::config::MessageEdge {
        target: "image".into(),
        source: "caption".into(),
    };
    m.set_pruned([edge.clone()].into_iter().collect()).unwrap();
    let path = dir.path().join("p.json");
    Checkpoint::from_model(&m).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    assert!(back.pruned.contains(&edge));
    let records = data(4, 3);
    assert_eq!(back.predict_probs(&records).unwrap(), m.predict_probs(&records).unwrap());
}

#[test]
fn zero_epochs_return_the_initialization() {
    let (ckpt, log) = run(0, 5);
    assert!(log.epochs.is_empty());
    assert_eq!(log.best_epoch, 0);
    let mut config = tiny_config(5);
    config.epochs = 0;
    let fresh = Model::new(config, tiny_vocabulary()).unwrap();
    assert_eq!(ckpt, Checkpoint::from_model(&fresh));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, la) = run(3, 1);
    let (b, lb) = run(3, 1);
    assert_eq!(la, lb);
    a.save(&dir.path().join("a.json")).unwrap();
    b.save(&dir.path().join("b.json")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.bin")).unwrap(), std::fs::read(dir.path().join("b.bin")).unwrap());
    let (c, _) = run(3, 2);
    assert_ne!(a, c);
}

#[test]
fn training_logs_every_epoch_and_keeps_the_best() {
    let (_, log) = run(4, 0);
    assert_eq!(log.epochs.len(), 4);
    assert!(log.epochs.iter().all(|e| e.train_loss.is_finite() && e.val_mrr.is_some()));
    let best = log.epochs.iter().map(|e| e.val_mrr.unwrap()).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(log.best_val_mrr, Some(best));
    assert_eq!(log.epochs[log.best_epoch - 1].val_mrr, Some(best));
}

#[test]
fn divergence_aborts_with_a_diagnostic() {
    let mut config = tiny_config(0);
    config.epochs = 3;
    config.optimizer.lr = 1e300;
    let err = train(&config, &tiny_vocabulary(), &data(12, 1), &[]).unwrap_err();
    assert!(matches!(err, FgaError::Diverged { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn empty_training_set_is_rejected() {
    let mut config = tiny_config(0);
    config.epochs = 1;
    assert!(train(&config, &tiny_vocabulary(), &[], &[]).is_err());
}
