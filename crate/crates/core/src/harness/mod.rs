//! Data, training, metrics and model analysis.

mod analysis;
mod dataset;
mod metrics;
mod synthetic;
mod train;

pub use analysis::{
    ensemble_predict, evaluate, importance_scores, mean_probs, predict_parallel, prune_interactions, worker_count, CueScore,
    Ensemble, ImportanceRow, ImportanceTable, Predictor, LOCAL_CUE, PRIOR_CUE,
};
pub use dataset::{
    encode_features, load_dataset, parse_record_json, record_to_json, write_dataset, write_dataset_with_sidecar, DialogRecord, FeatureSidecar,
};
pub use metrics::{metrics, ndcg, rank_of, ranking, EvalReport};
pub use synthetic::{
    generate_synthetic, oracle_answer, synthetic_vocabulary, SyntheticDataset, SyntheticSpec, COLORS, MATERIALS, OBJECTS,
    PLANTED_DIMS,
};
pub use train::{train, train_with, EpochLog, TrainLog};
