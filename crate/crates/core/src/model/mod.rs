//! End-to-end discriminative model: encoders, factor graph attention,
//! history fusion and a per-candidate scoring MLP.

mod checkpoint;
mod verify;

pub use checkpoint::{Checkpoint, Manifest, TensorEntry, CHECKPOINT_FORMAT};
pub use verify::{model_grad_check, tiny_config, tiny_records, tiny_vocabulary};

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{MessageEdge, RunConfig, TaskMode};
use crate::encoders::{encode_batch, encode_image, kaiming_normal, LstmParams, TokenSequence, Vocabulary};
use crate::error::{FgaError, Result};
use crate::fga::{run_attention, AttentionResult, BatchNormUpdates, FactorGraphParams, GraphConfig, UtilityAttention};
use crate::harness::DialogRecord;
use crate::math::{dropout, BatchNormState, Graph, Mode, ParamId, ParamStore, Tensor, Var};

/// Records per graph when evaluating. Eval outputs do not depend on it.
pub const EVAL_CHUNK: usize = 16;

/// The five sentence encoders.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoders {
    pub question: LstmParams,
    pub caption: LstmParams,
    pub history_question: LstmParams,
    pub history_answer: LstmParams,
    pub answers: LstmParams,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    /// Per history round, a `d_t x 2 d_h` weight. There is no bias: the fused
    /// rounds only reach the batch-normalized first scoring layer, which
    /// removes any offset shared by the batch.
    pub rounds: Vec<ParamId>,
    pub hidden1: ParamId,
    pub bn1: BatchNormState,
    pub hidden2: ParamId,
    pub bn2: BatchNormState,
    /// No bias: a shared offset on every candidate score cancels in the softmax.
    pub output: ParamId,
}

impl FusionParams {
    /// Hidden widths of the scoring MLP for input width `l + d_a`.
    pub fn widths(input: usize) -> (usize, usize) {
        ((input / 2).max(1), (input / 4).max(1))
    }

    fn init<R: Rng + ?Sized>(config: &RunConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let d = &config.dims;
        let input = d.attention_len() + d.answer_dim;
        let (h1, h2) = Self::widths(input);
        let (m, eps) = (config.batchnorm.momentum, config.batchnorm.eps);
        let mut rounds = Vec::with_capacity(d.rounds);
        for t in 1..=d.rounds {
            let w = kaiming_normal(rng, &[d.round_dim, 2 * d.history_dim], 2 * d.history_dim)?;
            rounds.push(store.register(format!("fusion.round{t}.w"), w)?);
        }
        Ok(FusionParams {
            rounds,
            hidden1: store.register("fusion.hidden1.w", kaiming_normal(rng, &[h1, input], input)?)?,
            bn1: BatchNormState::new(store, "fusion.bn1", h1, m, eps)?,
            hidden2: store.register("fusion.hidden2.w", kaiming_normal(rng, &[h2, h1], h1)?)?,
            bn2: BatchNormState::new(store, "fusion.bn2", h2, m, eps)?,
            output: store.register("fusion.output.w", kaiming_normal(rng, &[1, h2], h2)?)?,
        })
    }
}

/// Probabilities over candidates plus the attention that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub record_id: String,
    pub probs: Vec<f64>,
    pub attention: AttentionResult,
    pub loss: Option<f64>,
}

/// Tape handles of one batched forward pass.
pub struct ForwardPass {
    pub probs: Vec<Var>,
    pub attention: Vec<Vec<UtilityAttention>>,
    /// Mean negative log-likelihood of the ground truth over the batch.
    pub loss: Var,
    pub updates: BatchNormUpdates,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub graph: GraphConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub text: TextEncoders,
    pub image_embed: ParamId,
    pub fga: FactorGraphParams,
    pub fusion: FusionParams,
    pub pruned: BTreeSet<MessageEdge>,
}

struct Prepared {
    query: TokenSequence,
    caption: TokenSequence,
    history: Vec<(TokenSequence, TokenSequence)>,
    candidates: Vec<TokenSequence>,
    image: Tensor,
    gt: usize,
}

/// `-ln probs[gt]`.
pub fn nll_loss(probs: &[f64], gt: usize) -> Result<f64> {
    let p = probs
        .get(gt)
        .ok_or_else(|| FgaError::InvalidArgument(format!("ground truth {gt} out of range for {} candidates", probs.len())))?;
    Ok(-p.ln())
}

/// Previous question followed by its answer, without padding.
pub fn previous_interaction(record: &DialogRecord) -> Result<TokenSequence> {
    let (q, a) = record
        .history
        .last()
        .ok_or_else(|| FgaError::schema(&record.record_id, "history", "question generation needs a previous round"))?;
    let mut ids: Vec<usize> = q.ids[..q.true_length.min(q.ids.len())].to_vec();
    ids.extend_from_slice(&a.ids[..a.true_length.min(a.ids.len())]);
    Ok(TokenSequence::new(ids))
}

/// Per round, `concat(a_Qt, a_At)` through its own linear map; rounds stacked.
pub fn fuse_history(g: &mut Graph, store: &ParamStore, rounds: &[ParamId], pairs: &[(Var, Var)]) -> Result<Var> {
    if rounds.len() != pairs.len() {
        return Err(FgaError::shape("fuse_history", format!("{} rounds, {} pairs", rounds.len(), pairs.len())));
    }
    let mut fused = Vec::with_capacity(pairs.len());
    for (&w, &(q, a)) in rounds.iter().zip(pairs) {
        let x = g.concat_rows(&[q, a])?;
        let w = g.param(store, w)?;
        fused.push(g.matmul(w, x)?);
    }
    g.concat_rows(&fused)
}

/// `(a_I, a_Q, a_C, a_A, a_H)` as one `L x 1` column.
pub fn assemble(g: &mut Graph, parts: &[Var], dims: &[usize]) -> Result<Var> {
    if parts.len() != dims.len() {
        return Err(FgaError::shape("assemble", "wrong number of attended vectors"));
    }
    for (k, (&p, &d)) in parts.iter().zip(dims).enumerate() {
        if g.value(p).len() != d {
            return Err(FgaError::shape("assemble", format!("part {k} has {} entries, expected {d}", g.value(p).len())));
        }
    }
    let cols = parts
        .iter()
        .map(|&p| {
            let n = g.value(p).len();
            g.reshape(p, &[n, 1])
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_rows(&cols)
}

/// Candidate probabilities for every record. `attention[r]` is `L x 1`,
/// `banks[r]` is `d_A x n_A`; all records are scored in one MLP pass so the
/// batch norms see the whole batch.
pub fn score_answers<R: Rng + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    fusion: &FusionParams,
    attention: &[Var],
    banks: &[Var],
    fusion_dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<Var>, BatchNormUpdates)> {
    let mut columns = Vec::with_capacity(banks.len());
    let mut counts = Vec::with_capacity(banks.len());
    for (&a, &bank) in attention.iter().zip(banks) {
        let n = g.value(bank).cols();
        if n < 2 {
            return Err(FgaError::InvalidArgument("at least two candidates are required".into()));
        }
        let rep = g.repeat_cols(a, n)?;
        columns.push(g.concat_rows(&[rep, bank])?);
        counts.push(n);
    }
    let x = g.concat_cols(&columns)?;
    let mut updates = Vec::new();
    let w1 = g.param(store, fusion.hidden1)?;
    let h = g.matmul(w1, x)?;
    let (h, s1) = fusion.bn1.forward(g, store, h, mode)?;
    let h = g.relu(h)?;
    let w2 = g.param(store, fusion.hidden2)?;
    let h = g.matmul(w2, h)?;
    let (h, s2) = fusion.bn2.forward(g, store, h, mode)?;
    let h = g.relu(h)?;
    let h = dropout(g, h, fusion_dropout, mode, rng)?;
    let wo = g.param(store, fusion.output)?;
    let scores = g.matmul(wo, h)?;
    for (name, s) in [(&fusion.bn1.name, s1), (&fusion.bn2.name, s2)] {
        if let Some(s) = s {
            updates.push((name.clone(), s));
        }
    }
    let mut probs = Vec::with_capacity(counts.len());
    let mut offset = 0;
    for n in counts {
        let s = g.slice_cols(scores, offset, n)?;
        let s = g.reshape(s, &[n])?;
        probs.push(g.softmax(s)?);
        offset += n;
    }
    Ok((probs, updates))
}

impl Model {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let graph = GraphConfig::visual_dialog(&config)?;
        let d = config.dims.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut table = kaiming_normal(&mut rng, &[vocab.len(), d.embed_dim], d.embed_dim)?;
        for k in 0..d.embed_dim {
            table.set(crate::encoders::PAD_ID, k, 0.0);
        }
        let embedding = store.register("embedding", table)?;
        let e = d.embed_dim;
        let text = TextEncoders {
            question: LstmParams::register(&mut store, "lstm.question", e, d.question_dim, &mut rng)?,
            caption: LstmParams::register(&mut store, "lstm.caption", e, d.caption_dim, &mut rng)?,
            history_question: LstmParams::register(&mut store, "lstm.history_question", e, d.history_dim, &mut rng)?,
            history_answer: LstmParams::register(&mut store, "lstm.history_answer", e, d.history_dim, &mut rng)?,
            answers: LstmParams::register(&mut store, "lstm.answers", e, d.answer_dim, &mut rng)?,
        };
        let image_embed = store.register(
            "image.embed",
            kaiming_normal(&mut rng, &[d.image_dim, d.image_dim], d.image_dim)?,
        )?;
        let fga = FactorGraphParams::init(&graph, &mut store, config.batchnorm.momentum, config.batchnorm.eps, &mut rng)?;
        let fusion = FusionParams::init(&config, &mut store, &mut rng)?;
        Ok(Model {
            config,
            vocab,
            graph,
            store,
            embedding,
            text,
            image_embed,
            fga,
            fusion,
            pruned: BTreeSet::new(),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNormState> {
        self.fga.batch_norms.values().chain([&self.fusion.bn1, &self.fusion.bn2])
    }

    pub fn batch_norm_mut(&mut self, name: &str) -> Option<&mut BatchNormState> {
        if self.fusion.bn1.name == name {
            return Some(&mut self.fusion.bn1);
        }
        if self.fusion.bn2.name == name {
            return Some(&mut self.fusion.bn2);
        }
        self.fga.batch_norms.get_mut(name)
    }

    /// Accepts the current running statistics (initially mean 0, variance 1)
    /// so that eval mode works without a training pass.
    pub fn mark_batch_norms_ready(&mut self) {
        self.fga.batch_norms.values_mut().for_each(|b| b.ready = true);
        self.fusion.bn1.ready = true;
        self.fusion.bn2.ready = true;
    }

    /// Folds training-pass statistics into the running averages.
    pub fn apply_updates(&mut self, updates: &BatchNormUpdates) -> Result<()> {
        for (name, stats) in updates {
            self.batch_norm_mut(name)
                .ok_or_else(|| FgaError::Config(format!("no batch norm `{name}`")))?
                .update(stats);
        }
        Ok(())
    }

    /// Disables the given directed messages on top of those the config disables.
    ///
    /// A message scalar is set to zero once every message that uses it is pruned.
    pub fn set_pruned(&mut self, edges: BTreeSet<MessageEdge>) -> Result<()> {
        for e in &edges {
            if self.graph.index(&e.target).is_none() || self.graph.index(&e.source).is_none() {
                return Err(FgaError::Config(format!("unknown utility in pruned message {} <- {}", e.target, e.source)));
            }
        }
        let mut disabled: BTreeSet<MessageEdge> = self.config.disabled_messages.iter().cloned().collect();
        disabled.extend(edges.iter().cloned());
        self.graph.disabled = disabled.into_iter().collect();
        self.pruned = edges;
        let n = self.graph.len();
        let mut users: std::collections::BTreeMap<ParamId, bool> = Default::default();
        for i in 0..n {
            for j in 0..n {
                let w = self.fga.message(&self.graph, i, j)?.weight;
                let edge = MessageEdge {
                    target: self.graph.utilities[i].name.clone(),
                    source: self.graph.utilities[j].name.clone(),
                };
                let all = users.entry(w).or_insert(true);
                *all &= self.pruned.contains(&edge);
            }
        }
        for (w, all_pruned) in users {
            if all_pruned {
                self.store.set_value(w, Tensor::scalar(0.0))?;
            }
        }
        Ok(())
    }

    /// Rounds every stored value to the nearest `f32`, as a checkpoint does.
    pub fn round_to_f32(&mut self) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            for v in self.store.get_mut(id).value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let round = |bn: &mut BatchNormState| {
            for v in bn.running_mean.iter_mut().chain(bn.running_var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        };
        self.fga.batch_norms.values_mut().for_each(round);
        round(&mut self.fusion.bn1);
        round(&mut self.fusion.bn2);
    }

    fn prepare(&self, record: &DialogRecord) -> Result<Prepared> {
        let d = &self.config.dims;
        let id = &record.record_id;
        if record.candidates.len() != d.candidates {
            return Err(FgaError::schema(id, "candidates", format!("expected {} candidates, got {}", d.candidates, record.candidates.len())));
        }
        if record.gt_index >= d.candidates {
            return Err(FgaError::schema(id, "gt_index", format!("{} out of range", record.gt_index)));
        }
        if record.history.len() > d.rounds {
            return Err(FgaError::schema(id, "history", format!("{} rounds exceed the configured {}", record.history.len(), d.rounds)));
        }
        if record.image.regions != d.regions || record.image.dim != d.image_dim {
            return Err(FgaError::schema(
                id,
                "image",
                format!("features are {}x{}, expected {}x{}", record.image.regions, record.image.dim, d.regions, d.image_dim),
            ));
        }
        let v = self.vocab.len();
        let check = |field: &str, s: &TokenSequence| -> Result<()> {
            match s.ids.iter().find(|&&t| t >= v) {
                Some(&t) => Err(FgaError::schema(id, field, format!("token id {t} outside vocabulary of {v}"))),
                None => Ok(()),
            }
        };
        check("question", &record.question)?;
        check("caption", &record.caption)?;
        for (q, a) in &record.history {
            check("history", q)?;
            check("history", a)?;
        }
        for c in &record.candidates {
            check("candidates", c)?;
        }
        let query = match self.config.mode {
            TaskMode::Answer => record.question.clone(),
            TaskMode::QuestionGeneration => previous_interaction(record)?,
        };
        Ok(Prepared {
            query: query.pad_or_truncate(d.question_len)?,
            caption: record.caption.pad_or_truncate(d.caption_len)?,
            history: record
                .history
                .iter()
                .map(|(q, a)| Ok((q.pad_or_truncate(d.history_len)?, a.pad_or_truncate(d.history_len)?)))
                .collect::<Result<_>>()?,
            candidates: record
                .candidates
                .iter()
                .map(|c| c.pad_or_truncate(d.answer_len))
                .collect::<Result<_>>()?,
            image: record.image.to_columns(),
            gt: record.gt_index,
        })
    }

    /// Builds the whole batch on `g` using parameter values from `store`.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        records: &[DialogRecord],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        if records.is_empty() {
            return Err(FgaError::InvalidArgument("empty batch".into()));
        }
        let d = &self.config.dims;
        let prepared = records.iter().map(|r| self.prepare(r)).collect::<Result<Vec<_>>>()?;
        let b = prepared.len();
        let e = g.param(store, self.embedding)?;

        let queries: Vec<&TokenSequence> = prepared.iter().map(|p| &p.query).collect();
        let question = encode_batch(g, store, e, &self.text.question, &queries)?;
        let captions: Vec<&TokenSequence> = prepared.iter().map(|p| &p.caption).collect();
        let caption = encode_batch(g, store, e, &self.text.caption, &captions)?;

        let mut slots: Vec<Vec<Option<usize>>> = vec![vec![None; d.rounds]; b];
        let (mut hq, mut ha) = (Vec::new(), Vec::new());
        for (r, p) in prepared.iter().enumerate() {
            for (t, (q, a)) in p.history.iter().enumerate() {
                slots[r][t] = Some(hq.len());
                hq.push(q);
                ha.push(a);
            }
        }
        let (hq, ha) = if hq.is_empty() {
            (None, None)
        } else {
            (
                Some(encode_batch(g, store, e, &self.text.history_question, &hq)?),
                Some(encode_batch(g, store, e, &self.text.history_answer, &ha)?),
            )
        };

        let all_answers: Vec<&TokenSequence> = prepared.iter().flat_map(|p| p.candidates.iter()).collect();
        let answers = encode_batch(g, store, e, &self.text.answers, &all_answers)?;
        let positions: Vec<usize> = all_answers.iter().map(|a| a.readout_index(self.config.sentence_state)).collect();
        let bank_all = answers.readout(g, &positions)?;

        let w_img = g.param(store, self.image_embed)?;
        let mut utilities = Vec::with_capacity(b);
        let mut banks = Vec::with_capacity(b);
        for (r, p) in prepared.iter().enumerate() {
            let regions = g.input(p.image.clone())?;
            let image = encode_image(g, w_img, regions, self.config.dropout.image, mode, rng)?;
            let bank = g.slice_cols(bank_all, r * d.candidates, d.candidates)?;
            banks.push(bank);
            let mut u = vec![image, question.sequence(g, r)?, caption.sequence(g, r)?, bank];
            for slot in &slots[r] {
                match (slot, &hq, &ha) {
                    (Some(k), Some(hq), Some(ha)) => {
                        u.push(hq.sequence(g, *k)?);
                        u.push(ha.sequence(g, *k)?);
                    }
                    _ => {
                        let zero = Tensor::zeros(&[d.history_dim, d.history_len])?;
                        u.push(g.input(zero.clone())?);
                        u.push(g.input(zero)?);
                    }
                }
            }
            utilities.push(u);
        }

        let (attention, mut updates) =
            run_attention(g, store, &self.fga, &self.graph, &utilities, self.config.dropout.local, mode, rng)?;

        let mut vectors = Vec::with_capacity(b);
        let part_dims = [d.image_dim, d.question_dim, d.caption_dim, d.answer_dim, d.rounds * d.round_dim];
        for att in &attention {
            let pairs: Vec<(Var, Var)> = (0..d.rounds).map(|t| (att[4 + 2 * t].attended, att[5 + 2 * t].attended)).collect();
            let mut parts = vec![att[0].attended, att[1].attended, att[2].attended, att[3].attended];
            if d.rounds > 0 {
                parts.push(fuse_history(g, store, &self.fusion.rounds, &pairs)?);
                vectors.push(assemble(g, &parts, &part_dims)?);
            } else {
                vectors.push(assemble(g, &parts, &part_dims[..4])?);
            }
        }
        let (probs, fusion_updates) =
            score_answers(g, store, &self.fusion, &vectors, &banks, self.config.dropout.fusion, mode, rng)?;
        updates.extend(fusion_updates);

        let nll = probs
            .iter()
            .zip(&prepared)
            .map(|(&p, pr)| g.neg_log(p, pr.gt))
            .collect::<Result<Vec<_>>>()?;
        let total = g.add_n(&nll)?;
        let loss = g.scale(total, 1.0 / b as f64)?;
        Ok(ForwardPass {
            probs,
            attention,
            loss,
            updates,
        })
    }

    /// Eval-mode outputs, one per record, in input order.
    pub fn predict(&self, records: &[DialogRecord]) -> Result<Vec<ModelOutput>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let pass = self.forward_graph(&mut g, &self.store, chunk, Mode::Eval, &mut rng)?;
            for ((record, &p), att) in chunk.iter().zip(&pass.probs).zip(&pass.attention) {
                let probs = g.value(p).data().to_vec();
                out.push(ModelOutput {
                    record_id: record.record_id.clone(),
                    loss: Some(nll_loss(&probs, record.gt_index)?),
                    probs,
                    attention: AttentionResult::resolve(&g, &self.graph, att),
                });
            }
        }
        Ok(out)
    }

    /// Eval-mode probabilities only.
    pub fn predict_probs(&self, records: &[DialogRecord]) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let pass = self.forward_graph(&mut g, &self.store, chunk, Mode::Eval, &mut rng)?;
            out.extend(pass.probs.iter().map(|&p| g.value(p).data().to_vec()));
        }
        Ok(out)
    }
}
