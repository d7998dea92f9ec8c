//! Synthetic dialogs with a planted cross-utility rule.
//!
//! Every image holds the eight objects in shuffled regions; each region also
//! has a color and a material. A region's feature is the sum of one basis
//! direction per attribute plus Gaussian noise.
//!
//! Answer task: the question names an object, the caption names an attribute
//! family (`colors` or `materials`), and the correct candidate states that
//! attribute of the object's region. All value answers share the surface form
//! `it is VALUE`, so only question + caption + image together identify it.
//!
//! Question-generation task: the previous round asks whether something of a
//! given color or material exists (it is unique in the image); the correct next
//! question asks about the object in that region.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{Dims, RunConfig, TaskMode};
use crate::encoders::{RegionFeatures, TokenSequence, Vocabulary};
use crate::error::{FgaError, Result};
use crate::harness::DialogRecord;

pub const OBJECTS: [&str; 8] = ["cube", "sphere", "cone", "ring", "disk", "star", "bowl", "vase"];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const MATERIALS: [&str; 4] = ["metal", "wood", "glass", "stone"];
const FUNCTION_WORDS: [&str; 17] = [
    "what", "is", "the", "like", "?", "it", "no", "idea", "not", "sure", "scene", "about", "colors", "materials", "there",
    "something", "yes",
];
const FILLERS: [&str; 15] = [
    "a", "photo", "picture", "view", "nice", "small", "big", "quiet", "busy", "old", "new", "bright", "dark", "plain", "simple",
];
/// Dimensions carrying a planted direction: objects, then colors, then materials.
pub const PLANTED_DIMS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: TaskMode,
    pub count: usize,
    pub vocab_size: usize,
    pub candidates: usize,
    pub rounds: usize,
    pub regions: usize,
    pub region_dim: usize,
    /// Standard deviation of the per-coordinate feature noise.
    pub noise: f64,
    /// Length of the object direction in each region feature; attribute
    /// directions have length 1.
    pub object_scale: f64,
    pub dense_relevance: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: TaskMode::Answer,
            count: 200,
            vocab_size: 50,
            candidates: 10,
            rounds: 2,
            regions: 8,
            region_dim: 16,
            noise: 0.1,
            object_scale: 1.0,
            dense_relevance: false,
        }
    }
}

/// Generated records plus the vocabulary they are encoded with.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub vocab: Vocabulary,
    pub records: Vec<DialogRecord>,
}

/// The fixed 50-token vocabulary (`<pad>`, `<unk>` and 48 words).
pub fn synthetic_vocabulary() -> Vocabulary {
    Vocabulary::from_tokens(
        OBJECTS
            .iter()
            .chain(&COLORS)
            .chain(&MATERIALS)
            .chain(&FUNCTION_WORDS)
            .chain(&FILLERS),
    )
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let vocab = synthetic_vocabulary().len();
        if self.vocab_size != vocab {
            return Err(FgaError::Config(format!("the generator's vocabulary has {vocab} tokens, spec asks for {}", self.vocab_size)));
        }
        if self.candidates != 10 {
            return Err(FgaError::Config("the generator produces exactly 10 candidates".into()));
        }
        if self.regions != OBJECTS.len() {
            return Err(FgaError::Config(format!("the generator places {} objects, one per region", OBJECTS.len())));
        }
        if self.region_dim < PLANTED_DIMS {
            return Err(FgaError::Config(format!("region_dim must be at least {PLANTED_DIMS}")));
        }
        if self.task == TaskMode::QuestionGeneration && self.rounds == 0 {
            return Err(FgaError::Config("question generation needs at least one history round".into()));
        }
        if !(self.object_scale.is_finite() && self.object_scale > 0.0) {
            return Err(FgaError::Config("object_scale must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(FgaError::Config("noise must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// A small run configuration matching this data.
    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            dims: Dims {
                embed_dim: 16,
                question_dim: 32,
                caption_dim: 16,
                history_dim: 16,
                answer_dim: 32,
                image_dim: self.region_dim,
                round_dim: 16,
                regions: self.regions,
                question_len: 6,
                caption_len: 4,
                history_len: 6,
                // Question candidates must not be truncated to their shared prefix.
                answer_len: if self.task == TaskMode::QuestionGeneration { 6 } else { 3 },
                candidates: self.candidates,
                rounds: self.rounds,
            },
            batch_size: 16,
            epochs: 50,
            mode: self.task,
            ..RunConfig::default()
        }
    }
}

struct Scene {
    objects: Vec<usize>,
    colors: Vec<usize>,
    materials: Vec<usize>,
}

fn value_answer(family: usize, value: usize) -> Vec<&'static str> {
    let word = if family == 0 { COLORS[value] } else { MATERIALS[value] };
    vec!["it", "is", word]
}

fn object_question(obj: usize) -> Vec<&'static str> {
    vec!["what", "is", "the", OBJECTS[obj], "like", "?"]
}

fn features<R: Rng>(scene: &Scene, spec: &SyntheticSpec, rng: &mut R) -> Result<RegionFeatures> {
    let noise = Normal::new(0.0, spec.noise).map_err(|e| FgaError::Config(e.to_string()))?;
    let mut data = vec![0f32; spec.regions * spec.region_dim];
    for r in 0..spec.regions {
        let row = &mut data[r * spec.region_dim..(r + 1) * spec.region_dim];
        for v in row.iter_mut() {
            *v = noise.sample(rng) as f32;
        }
        row[scene.objects[r]] += spec.object_scale as f32;
        row[8 + scene.colors[r]] += 1.0;
        row[12 + scene.materials[r]] += 1.0;
    }
    RegionFeatures::new(spec.regions, spec.region_dim, data)
}

/// Deterministic given `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let vocab = synthetic_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let mut objects: Vec<usize> = (0..OBJECTS.len()).collect();
        objects.shuffle(&mut rng);
        let mut scene = Scene {
            objects,
            colors: (0..spec.regions).map(|_| rng.gen_range(0..COLORS.len())).collect(),
            materials: (0..spec.regions).map(|_| rng.gen_range(0..MATERIALS.len())).collect(),
        };
        let family = rng.gen_range(0..2);
        let caption = vec![FILLERS[rng.gen_range(0..FILLERS.len())], "scene", "about", ["colors", "materials"][family]];
        let record_id = format!("syn{seed}-{k:05}");
        let record = match spec.task {
            TaskMode::Answer => answer_record(spec, &vocab, &mut rng, &scene, family, &caption, record_id)?,
            TaskMode::QuestionGeneration => question_record(spec, &vocab, &mut rng, &mut scene, family, &caption, record_id)?,
        };
        records.push(record);
    }
    Ok(SyntheticDataset { vocab, records })
}

fn shuffle_candidates<R: Rng>(
    rng: &mut R,
    vocab: &Vocabulary,
    candidates: Vec<(Vec<&'static str>, f64)>,
) -> (Vec<TokenSequence>, usize, Vec<f64>) {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.shuffle(rng);
    let gt = order.iter().position(|&o| o == 0).expect("correct candidate present");
    let seqs = order.iter().map(|&o| vocab.encode(&candidates[o].0)).collect();
    let rel = order.iter().map(|&o| candidates[o].1).collect();
    (seqs, gt, rel)
}

fn answer_record(
    spec: &SyntheticSpec,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
    scene: &Scene,
    family: usize,
    caption: &[&str],
    record_id: String,
) -> Result<DialogRecord> {
    let image = features(scene, spec, rng)?;
    let region = rng.gen_range(0..spec.regions);
    let asked = scene.objects[region];
    let values = |r: usize| [scene.colors[r], scene.materials[r]];

    // Correct answer first; relevance: 1 correct, 0.5 same region other family.
    let mut candidates = vec![(value_answer(family, values(region)[family]), 1.0)];
    let other = 1 - family;
    for f in 0..2 {
        let n = if f == 0 { COLORS.len() } else { MATERIALS.len() };
        for v in 0..n {
            if f == family && v == values(region)[family] {
                continue;
            }
            let rel = if f == other && v == values(region)[other] { 0.5 } else { 0.0 };
            candidates.push((value_answer(f, v), rel));
        }
    }
    candidates.push((vec!["no", "idea"], 0.0));
    candidates.push((vec!["not", "sure"], 0.0));
    let (candidates, gt_index, rel) = shuffle_candidates(rng, vocab, candidates);

    let n_hist = rng.gen_range(0..=spec.rounds);
    let mut others: Vec<usize> = (0..spec.regions).filter(|&r| r != region).collect();
    others.shuffle(rng);
    let history = others[..n_hist]
        .iter()
        .map(|&r| {
            (
                vocab.encode(&object_question(scene.objects[r])),
                vocab.encode(&value_answer(family, values(r)[family])),
            )
        })
        .collect();
    Ok(DialogRecord {
        record_id,
        image,
        caption: vocab.encode(caption),
        history,
        question: vocab.encode(&object_question(asked)),
        candidates,
        gt_index,
        dense_relevance: spec.dense_relevance.then_some(rel),
    })
}

fn question_record(
    spec: &SyntheticSpec,
    vocab: &Vocabulary,
    rng: &mut ChaCha8Rng,
    scene: &mut Scene,
    family: usize,
    caption: &[&str],
    record_id: String,
) -> Result<DialogRecord> {
    let region = rng.gen_range(0..spec.regions);
    // Make the probed value unique within its family.
    let (attrs, n) = if family == 0 {
        (&mut scene.colors, COLORS.len())
    } else {
        (&mut scene.materials, MATERIALS.len())
    };
    let probe = attrs[region];
    for (r, a) in attrs.iter_mut().enumerate() {
        if r != region && *a == probe {
            let mut v = rng.gen_range(0..n - 1);
            if v >= probe {
                v += 1;
            }
            *a = v;
        }
    }
    let word = if family == 0 { COLORS[probe] } else { MATERIALS[probe] };
    let image = features(scene, spec, rng)?;

    let target = scene.objects[region];
    let mut candidates = vec![(object_question(target), 1.0)];
    for obj in 0..OBJECTS.len() {
        if obj != target {
            candidates.push((object_question(obj), 0.0));
        }
    }
    candidates.push((vec!["is", "there", "something", "?"], 0.0));
    candidates.push((vec!["what", "is", "there", "?"], 0.0));
    let (candidates, gt_index, rel) = shuffle_candidates(rng, vocab, candidates);

    let mut history = Vec::new();
    if spec.rounds > 1 && rng.gen_bool(0.5) {
        let r = (region + 1 + rng.gen_range(0..spec.regions - 1)) % spec.regions;
        history.push((
            vocab.encode(&object_question(scene.objects[r])),
            vocab.encode(&value_answer(family, if family == 0 { scene.colors[r] } else { scene.materials[r] })),
        ));
    }
    let probe_q = vocab.encode(&["is", "there", "something", word]);
    let probe_a = vocab.encode(&["yes"]);
    let mut query = probe_q.ids.clone();
    query.extend(&probe_a.ids);
    history.push((probe_q, probe_a));
    Ok(DialogRecord {
        record_id,
        image,
        caption: vocab.encode(caption),
        history,
        question: TokenSequence::new(query),
        candidates,
        gt_index,
        dense_relevance: spec.dense_relevance.then_some(rel),
    })
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Rule-following solver with no learned state. Returns the chosen candidate index.
pub fn oracle_answer(record: &DialogRecord, vocab: &Vocabulary, task: TaskMode) -> Option<usize> {
    let dim = record.image.dim;
    let rows: Vec<&[f32]> = record.image.data.chunks(dim).collect();
    let word = |s: &TokenSequence, k: usize| s.ids.get(k).and_then(|&i| vocab.token(i)).map(str::to_string);
    let matches = |cand: &TokenSequence, expected: &[&str]| {
        cand.ids.len() == expected.len() && expected.iter().enumerate().all(|(k, e)| word(cand, k).as_deref() == Some(*e))
    };
    match task {
        TaskMode::Answer => {
            let obj = OBJECTS.iter().position(|o| word(&record.question, 3).as_deref() == Some(*o))?;
            let family = ["colors", "materials"].iter().position(|f| word(&record.caption, 3).as_deref() == Some(*f))?;
            let region = (0..rows.len()).max_by(|&a, &b| rows[a][obj].total_cmp(&rows[b][obj]))?;
            let value = if family == 0 { argmax(&rows[region][8..12]) } else { argmax(&rows[region][12..16]) };
            let expected = value_answer(family, value);
            record.candidates.iter().position(|c| matches(c, &expected))
        }
        TaskMode::QuestionGeneration => {
            let (q, _) = record.history.last()?;
            let probe = word(q, 3)?;
            let (offset, value) = match COLORS.iter().position(|c| *c == probe) {
                Some(v) => (8, v),
                None => (12, MATERIALS.iter().position(|m| *m == probe)?),
            };
            let region = (0..rows.len()).max_by(|&a, &b| rows[a][offset + value].total_cmp(&rows[b][offset + value]))?;
            let obj = argmax(&rows[region][..8]);
            record.candidates.iter().position(|c| matches(c, &object_question(obj)))
        }
    }
}
