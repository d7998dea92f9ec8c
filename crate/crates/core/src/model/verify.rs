//! End-to-end finite-difference check of the training loss at toy size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Dims, RunConfig};
use crate::encoders::{RegionFeatures, TokenSequence, Vocabulary};
use crate::error::Result;
use crate::harness::DialogRecord;
use crate::math::{grad_check, GradCheckOptions, GradCheckReport, Mode};
use crate::model::Model;

/// Four base utilities (image 6 x 8, question 5, caption 4, six candidates)
/// and one history round.
pub fn tiny_config(seed: u64) -> RunConfig {
    RunConfig {
        dims: Dims {
            embed_dim: 4,
            question_dim: 5,
            caption_dim: 4,
            history_dim: 3,
            answer_dim: 4,
            image_dim: 8,
            round_dim: 3,
            regions: 6,
            question_len: 5,
            caption_len: 4,
            history_len: 3,
            answer_len: 3,
            candidates: 6,
            rounds: 1,
        },
        batch_size: 3,
        epochs: 1,
        seed,
        ..RunConfig::default()
    }
}

pub fn tiny_vocabulary() -> Vocabulary {
    Vocabulary::from_tokens((0..10).map(|k| format!("w{k}")))
}

/// Random records matching `config`, with every history round present.
pub fn tiny_records(config: &RunConfig, vocab: &Vocabulary, count: usize, seed: u64) -> Result<Vec<DialogRecord>> {
    let d = &config.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng, max: usize| {
        let n = rng.gen_range(1..=max);
        TokenSequence::new((0..n).map(|_| rng.gen_range(2..vocab.len())).collect())
    };
    (0..count)
        .map(|k| {
            let data = (0..d.regions * d.image_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Ok(DialogRecord {
                record_id: format!("tiny-{k}"),
                image: RegionFeatures::new(d.regions, d.image_dim, data)?,
                caption: sentence(&mut rng, d.caption_len),
                history: (0..d.rounds)
                    .map(|_| (sentence(&mut rng, d.history_len), sentence(&mut rng, d.history_len)))
                    .collect(),
                question: sentence(&mut rng, d.question_len),
                candidates: (0..d.candidates).map(|_| sentence(&mut rng, d.answer_len)).collect(),
                gt_index: rng.gen_range(0..d.candidates),
                dense_relevance: None,
            })
        })
        .collect()
}

/// Checks every parameter gradient of the training-mode loss on a tiny batch.
/// Dropout masks are redrawn from the same seed on every evaluation.
///
/// Parameters are jittered first: at initialization every row of a message
/// matrix is equal, which makes some gradients vanish identically.
pub fn model_grad_check(seed: u64, corrupt_analytic: Option<f64>) -> Result<GradCheckReport> {
    let config = tiny_config(seed);
    let vocab = tiny_vocabulary();
    let records = tiny_records(&config, &vocab, config.batch_size, seed ^ 0x7e57)?;
    let mut model = Model::new(config, vocab)?;
    let mut store = std::mem::take(&mut model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9177);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let options = GradCheckOptions {
        corrupt_analytic,
        ..GradCheckOptions::default()
    };
    grad_check(&mut store, options, |g, store| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(model.forward_graph(g, store, &records, Mode::Train, &mut rng)?.loss)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let report = model_grad_check(0, None).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(report.coordinates, Model::new(tiny_config(0), tiny_vocabulary()).unwrap().num_parameters());
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        let report = model_grad_check(0, Some(1.01)).unwrap();
        assert!(report.max_rel_error > 1e-4);
    }
}
