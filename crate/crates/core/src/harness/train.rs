//! Mini-batch Adam training with per-epoch validation and best-MRR selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::Vocabulary;
use crate::error::{FgaError, Result};
use crate::harness::{evaluate, DialogRecord};
use crate::math::{Adam, Graph, Mode};
use crate::model::{Checkpoint, Model};

/// Separates the training stream (shuffling, dropout) from initialization.
const TRAIN_STREAM: u64 = 0x5eed_7a11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mrr: Option<f64>,
    pub val_r1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config_hash: String,
    pub parameters: usize,
    pub epochs: Vec<EpochLog>,
    /// 0 means the initialization was kept.
    pub best_epoch: usize,
    pub best_val_mrr: Option<f64>,
}

pub fn train(config: &RunConfig, vocab: &Vocabulary, train: &[DialogRecord], val: &[DialogRecord]) -> Result<(Checkpoint, TrainLog)> {
    train_with(config, vocab, train, val, &mut |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
///
/// The returned checkpoint is the one with the best validation MRR (the last
/// epoch when there is no validation data). Zero epochs return the
/// initialization.
pub fn train_with(
    config: &RunConfig,
    vocab: &Vocabulary,
    train: &[DialogRecord],
    val: &[DialogRecord],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<(Checkpoint, TrainLog)> {
    let mut model = Model::new(config.clone(), vocab.clone())?;
    let mut log = TrainLog {
        config_hash: config.hash(),
        parameters: model.num_parameters(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_mrr: None,
    };
    let mut best = Checkpoint::from_model(&model);
    if config.epochs == 0 {
        return Ok((best, log));
    }
    if train.is_empty() {
        return Err(FgaError::InvalidArgument("training set is empty".into()));
    }
    let mut adam = Adam::new(config.optimizer, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ TRAIN_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0;
        for batch_idx in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<DialogRecord> = batch_idx.iter().map(|&i| train[i].clone()).collect();
            let diverged = |e: FgaError| match e {
                FgaError::NonFinite { .. } => FgaError::Diverged { epoch, step, loss: f64::NAN },
                other => other,
            };
            let mut g = Graph::new();
            let pass = model
                .forward_graph(&mut g, &model.store, &batch, Mode::Train, &mut rng)
                .map_err(diverged)?;
            let loss = g.scalar(pass.loss);
            if !loss.is_finite() {
                return Err(FgaError::Diverged { epoch, step, loss });
            }
            g.backward(pass.loss).map_err(diverged)?;
            g.accumulate_param_grads(&mut model.store);
            adam.step(&mut model.store);
            if model.store.iter().any(|(_, p)| !p.value.is_finite()) {
                return Err(FgaError::Diverged { epoch, step, loss });
            }
            model.apply_updates(&pass.updates)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let snapshot = Checkpoint::from_model(&model);
        let (val_mrr, val_r1) = if val.is_empty() {
            (None, None)
        } else {
            let report = evaluate(&snapshot.to_model()?, val, false, 1)?;
            (Some(report.mrr), Some(report.r1))
        };
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_mrr,
            val_r1,
        };
        on_epoch(&entry);
        let improved = match (val_mrr, log.best_val_mrr) {
            (Some(m), Some(b)) => m > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = snapshot;
            log.best_epoch = epoch;
            log.best_val_mrr = val_mrr;
        }
        log.epochs.push(entry);
    }
    Ok((best, log))
}
