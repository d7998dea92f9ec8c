use fga::config::TaskMode;
use fga::harness::{
    generate_synthetic, load_dataset, metrics, ndcg, oracle_answer, rank_of, record_to_json, synthetic_vocabulary, write_dataset,
    write_dataset_with_sidecar, FeatureSidecar, SyntheticSpec,
};
use fga::model::{nll_loss, tiny_config, tiny_records, tiny_vocabulary};
use fga::FgaError;
use proptest::prelude::*;

#[test]
fn metric_hand_cases() {
    let r = metrics(&[1, 1, 1]).unwrap();
    assert_eq!((r.mrr, r.r1, r.mean_rank), (1.0, 100.0, 1.0));

    let r = metrics(&[1, 2, 4]).unwrap();
    assert!((r.mrr - 1.75 / 3.0).abs() < 1e-12);
    assert!((r.mrr - 0.583_333_333_3).abs() < 1e-9);
    assert!((r.r1 - 100.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.r5, 100.0);
    assert!((r.mean_rank - 7.0 / 3.0).abs() < 1e-12);

    let r = metrics(&[100]).unwrap();
    assert_eq!((r.mrr, r.r10, r.mean_rank), (0.01, 0.0, 100.0));

    assert!(metrics(&[]).is_err());
    assert!(metrics(&[0, 1]).is_err());
}

#[test]
fn uniform_loss_is_log_n() {
    let probs = vec![0.01; 100];
    assert!((nll_loss(&probs, 37).unwrap() - 100f64.ln()).abs() < 1e-9);
}

#[test]
fn ties_go_to_the_lower_index() {
    let p = [0.25, 0.25, 0.25, 0.25];
    assert_eq!(rank_of(&p, 0).unwrap(), 1);
    assert_eq!(rank_of(&p, 3).unwrap(), 4);
    assert_eq!(rank_of(&[0.1, 0.6, 0.3], 2).unwrap(), 2);
    assert!(rank_of(&p, 4).is_err());
}

#[test]
fn ndcg_hand_cases() {
    assert_eq!(ndcg(&[0.5, 0.3, 0.2], &[1.0, 0.5, 0.0]).unwrap(), 1.0);
    assert_eq!(ndcg(&[0.5, 0.3, 0.2], &[0.0, 0.0, 0.0]).unwrap(), 0.0);
    let v = ndcg(&[0.3, 0.5, 0.2], &[1.0, 0.0, 0.0]).unwrap();
    assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
    assert!((v - 0.6309).abs() < 1e-4);
    assert!(ndcg(&[0.5, 0.5], &[1.0]).is_err());
}

fn probs_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..30)
}

proptest! {
    #[test]
    fn recalls_are_monotone(ranks in prop::collection::vec(1usize..120, 1..50)) {
        let r = metrics(&ranks).unwrap();
        prop_assert!(r.r1 <= r.r5 && r.r5 <= r.r10);
        prop_assert!(r.mrr > 0.0 && r.mrr <= 1.0);
    }

    #[test]
    fn rank_follows_a_permutation(probs in probs_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        // Distinct values, so that the tie-break does not depend on position.
        let probs: Vec<f64> = probs.iter().enumerate().map(|(k, p)| p + k as f64 * 1e-9).collect();
        let mut perm: Vec<usize> = (0..probs.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<f64> = perm.iter().map(|&k| probs[k]).collect();
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(rank_of(&probs, old).unwrap(), rank_of(&permuted, new).unwrap());
        }
    }

    #[test]
    fn ndcg_is_one_for_the_ideal_order(rel in prop::collection::vec(0.0f64..3.0, 2..20)) {
        let probs: Vec<f64> = rel.iter().enumerate().map(|(k, r)| r * 10.0 - k as f64 * 1e-6).collect();
        let v = ndcg(&probs, &rel).unwrap();
        prop_assert!(rel.iter().all(|&r| r == 0.0) || (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_drops_as_the_relevant_item_sinks(n in 2usize..20, hot in 0usize..20) {
        let hot = hot % n;
        let mut rel = vec![0.0; n];
        rel[hot] = 1.0;
        let mut last = f64::INFINITY;
        for position in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&k| k != hot).collect();
            order.insert(position, hot);
            let mut probs = vec![0.0; n];
            for (k, &c) in order.iter().enumerate() {
                probs[c] = (n - k) as f64;
            }
            let v = ndcg(&probs, &rel).unwrap();
            prop_assert!(v <= last);
            last = v;
        }
    }
}

fn tiny(n: usize) -> Vec<fga::harness::DialogRecord> {
    tiny_records(&tiny_config(0), &tiny_vocabulary(), n, 3).unwrap()
}

#[test]
fn empty_file_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(load_dataset(&path, &tiny_vocabulary(), &tiny_config(0).dims).unwrap().is_empty());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let mut records = tiny(5);
    records[2].dense_relevance = Some(vec![0.0, 0.5, 1.0, 0.0, 0.25, 0.0]);
    write_dataset(&path, &records, &tiny_vocabulary()).unwrap();
    let loaded = load_dataset(&path, &tiny_vocabulary(), &tiny_config(0).dims).unwrap();
    assert_eq!(loaded, records);
}

#[test]
fn sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let records = tiny(4);
    write_dataset_with_sidecar(&path, "features.bin", &records, &tiny_vocabulary()).unwrap();
    let sc = FeatureSidecar::read(&dir.path().join("features.bin")).unwrap();
    assert_eq!(sc.entries.len(), 4);
    assert_eq!((sc.regions, sc.dim), (6, 8));
    let loaded = load_dataset(&path, &tiny_vocabulary(), &tiny_config(0).dims).unwrap();
    assert_eq!(loaded, records);
}

fn load_line(line: &str) -> fga::Result<Vec<fga::harness::DialogRecord>> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, line).unwrap();
    load_dataset(&path, &tiny_vocabulary(), &tiny_config(0).dims)
}

fn schema_error(err: FgaError, record: &str, field: &str) {
    let text = err.to_string();
    assert_eq!(err.exit_code(), 2, "{text}");
    assert!(text.contains(record) && text.contains(field), "{text}");
}

#[test]
fn too_few_candidates_are_rejected() {
    let mut config = tiny_config(0);
    config.dims.candidates = 100;
    let mut records = tiny_records(&config, &tiny_vocabulary(), 1, 0).unwrap();
    records[0].candidates.pop();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.jsonl");
    write_dataset(&path, &records, &tiny_vocabulary()).unwrap();
    let err = load_dataset(&path, &tiny_vocabulary(), &config.dims).unwrap_err();
    schema_error(err, "tiny-0", "candidates");
}

#[test]
fn schema_errors_name_record_and_field() {
    let line = record_to_json(&tiny(1)[0], &tiny_vocabulary(), None);
    let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
    v["colour"] = serde_json::json!(1);
    schema_error(load_line(&v.to_string()).unwrap_err(), "tiny-0", "colour");

    let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
    v["gt_index"] = serde_json::json!(6);
    schema_error(load_line(&v.to_string()).unwrap_err(), "tiny-0", "gt_index");

    let mut v: serde_json::Value = serde_json::from_str(&line).unwrap();
    v.as_object_mut().unwrap().remove("question");
    schema_error(load_line(&v.to_string()).unwrap_err(), "tiny-0", "question");

    let twice = format!("{line}\n{line}\n");
    schema_error(load_line(&twice).unwrap_err(), "tiny-0", "record_id");

    assert_eq!(load_line("{not json").unwrap_err().exit_code(), 2);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SyntheticSpec::default();
    let a = generate_synthetic(&spec, 7).unwrap();
    let b = generate_synthetic(&spec, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 200);
    assert_eq!(a.vocab.len(), 50);
    let c = generate_synthetic(&spec, 8).unwrap();
    assert_ne!(a.records, c.records);

    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, data: &fga::harness::SyntheticDataset| {
        let p = dir.path().join(name);
        write_dataset(&p, &data.records, &data.vocab).unwrap();
        std::fs::read(p).unwrap()
    };
    assert_eq!(write("a.jsonl", &a), write("b.jsonl", &b));
}

fn oracle_r1(task: TaskMode, seed: u64) -> f64 {
    let spec = SyntheticSpec { task, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec, seed).unwrap();
    let hits = data
        .records
        .iter()
        .filter(|r| oracle_answer(r, &data.vocab, task) == Some(r.gt_index))
        .count();
    hits as f64 / data.records.len() as f64
}

#[test]
fn rule_following_oracle_is_perfect() {
    for seed in 0..3 {
        assert_eq!(oracle_r1(TaskMode::Answer, seed), 1.0);
        assert_eq!(oracle_r1(TaskMode::QuestionGeneration, seed), 1.0);
    }
}

#[test]
fn synthetic_records_load_back() {
    let spec = SyntheticSpec { count: 20, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("syn.jsonl");
    write_dataset(&path, &data.records, &data.vocab).unwrap();
    let loaded = load_dataset(&path, &synthetic_vocabulary(), &spec.run_config().dims).unwrap();
    assert_eq!(loaded.len(), 20);
    assert_eq!(loaded, data.records);
}

#[test]
fn invalid_synthetic_specs_are_rejected() {
    for spec in [
        SyntheticSpec { vocab_size: 60, ..SyntheticSpec::default() },
        SyntheticSpec { candidates: 5, ..SyntheticSpec::default() },
        SyntheticSpec { region_dim: 8, ..SyntheticSpec::default() },
        SyntheticSpec { noise: -1.0, ..SyntheticSpec::default() },
        SyntheticSpec { task: TaskMode::QuestionGeneration, rounds: 0, ..SyntheticSpec::default() },
    ] {
        assert_eq!(generate_synthetic(&spec, 0).unwrap_err().exit_code(), 1);
    }
}
