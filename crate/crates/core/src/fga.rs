//! Factor graph attention.
//!
//! Each utility `i` is a `d_i x n_i` matrix of entity embeddings. Its belief
//! (attention over entities) is
//!
//! ```text
//! b_i ∝ exp( ŵ_i p_i + w_i ψ_i + Σ_j w_ij μ_{j→i} ),   μ_{j→i}(u) = Σ_v W_ij(u, v) ψ_ij(u, v)
//! ```
//!
//! where `ψ_i = v_iᵀ relu(V_i û)` is the local information term, `ψ_ii` the
//! self-interaction and `ψ_ij` the joint interaction between two utilities:
//! cosine similarities of linearly embedded entities, batch normalized per
//! factor. The sum over `j` includes `j = i`. The attended vector is the
//! belief-weighted mean of the entity columns.
//!
//! Utilities in the same group share every factor parameter, and each
//! unordered pair is scored once (`ψ_ji = ψ_ijᵀ`).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{MessageEdge, PriorSpec, RunConfig};
use crate::encoders::kaiming_normal;
use crate::error::{FgaError, Result};
use crate::math::{dropout, BatchNormState, BatchStats, Graph, Mode, ParamId, ParamStore, Tensor, Var};

pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    Image,
    Question,
    Caption,
    Answers,
    HistoryQuestion,
    HistoryAnswer,
}

impl UtilityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UtilityKind::Image => "image",
            UtilityKind::Question => "question",
            UtilityKind::Caption => "caption",
            UtilityKind::Answers => "answers",
            UtilityKind::HistoryQuestion => "history_question",
            UtilityKind::HistoryAnswer => "history_answer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub name: String,
    pub kind: UtilityKind,
    #[serde(default)]
    pub group: Option<String>,
    pub dim: usize,
    pub entities: usize,
    #[serde(default)]
    pub prior: PriorSpec,
}

impl UtilitySpec {
    /// Name of the parameter set this utility uses.
    pub fn owner(&self) -> &str {
        self.group.as_deref().unwrap_or(&self.name)
    }

    pub fn prior_vector(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.entities];
        if self.prior == PriorSpec::Last {
            p[self.entities - 1] = 1.0;
        }
        p
    }
}

/// Utilities, groups, and which messages reach which beliefs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub utilities: Vec<UtilitySpec>,
    #[serde(default = "default_true")]
    pub joint_factors: bool,
    #[serde(default)]
    pub disabled: Vec<MessageEdge>,
}

fn default_true() -> bool {
    true
}

impl GraphConfig {
    pub fn new(utilities: Vec<UtilitySpec>) -> Result<Self> {
        let cfg = GraphConfig {
            utilities,
            joint_factors: true,
            disabled: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Image, question, caption, answer bank, then `T` history question/answer pairs.
    pub fn visual_dialog(run: &RunConfig) -> Result<Self> {
        let d = &run.dims;
        let prior = |kind: UtilityKind| run.priors.get(kind.as_str()).copied().unwrap_or_default();
        let spec = |name: String, kind, group: Option<&str>, dim, entities| UtilitySpec {
            name,
            kind,
            group: group.map(str::to_string),
            dim,
            entities,
            prior: prior(kind),
        };
        let mut utilities = vec![
            spec("image".into(), UtilityKind::Image, None, d.image_dim, d.regions),
            spec("question".into(), UtilityKind::Question, None, d.question_dim, d.question_len),
            spec("caption".into(), UtilityKind::Caption, None, d.caption_dim, d.caption_len),
            spec("answers".into(), UtilityKind::Answers, None, d.answer_dim, d.candidates),
        ];
        for t in 1..=d.rounds {
            utilities.push(spec(
                format!("history_question_{t}"),
                UtilityKind::HistoryQuestion,
                Some("history_question"),
                d.history_dim,
                d.history_len,
            ));
            utilities.push(spec(
                format!("history_answer_{t}"),
                UtilityKind::HistoryAnswer,
                Some("history_answer"),
                d.history_dim,
                d.history_len,
            ));
        }
        let cfg = GraphConfig {
            utilities,
            joint_factors: run.joint_factors,
            disabled: run.disabled_messages.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for u in &self.utilities {
            if !names.insert(u.name.as_str()) {
                return Err(FgaError::Config(format!("duplicate utility `{}`", u.name)));
            }
            if u.dim == 0 || u.entities == 0 {
                return Err(FgaError::Config(format!("utility `{}` has an empty extent", u.name)));
            }
            if let Some(g) = &u.group {
                let shape = *groups.entry(g).or_insert((u.dim, u.entities));
                if shape != (u.dim, u.entities) {
                    return Err(FgaError::Config(format!("group `{g}` mixes utility shapes")));
                }
            }
        }
        for u in &self.utilities {
            if u.group.is_none() && groups.contains_key(u.name.as_str()) {
                return Err(FgaError::Config(format!("utility `{}` shadows a group name", u.name)));
            }
        }
        for e in &self.disabled {
            if self.index(&e.target).is_none() || self.index(&e.source).is_none() {
                return Err(FgaError::Config(format!("unknown utility in disabled message {} <- {}", e.target, e.source)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utilities.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.utilities.iter().position(|u| u.name == name)
    }

    /// Whether `μ_{source→target}` enters the belief of `target`.
    pub fn message_enabled(&self, target: usize, source: usize) -> bool {
        if target != source && !self.joint_factors {
            return false;
        }
        let (t, s) = (&self.utilities[target].name, &self.utilities[source].name);
        !self.disabled.iter().any(|e| &e.target == t && &e.source == s)
    }

    /// Canonical (left, right) orientation of the unordered pair `{i, j}`
    /// and the parameter key it uses.
    fn joint_orientation(&self, i: usize, j: usize) -> (usize, usize, (String, String)) {
        let (oi, oj) = (self.utilities[i].owner(), self.utilities[j].owner());
        let (left, right) = if oi < oj || (oi == oj && i < j) { (i, j) } else { (j, i) };
        let key = (
            self.utilities[left].owner().to_string(),
            self.utilities[right].owner().to_string(),
        );
        (left, right, key)
    }
}

/// Local factor parameters of one utility (or group).
#[derive(Clone, Debug)]
pub struct LocalParams {
    /// `v_i` stored as a `1 x d` row.
    pub info_out: ParamId,
    /// `V_i`, `d x d`.
    pub info_in: ParamId,
    pub self_left: ParamId,
    pub self_right: ParamId,
    pub prior_weight: ParamId,
    pub local_weight: ParamId,
    pub self_bn: String,
}

#[derive(Clone, Debug)]
pub struct JointParams {
    /// Embeds the left utility into the shared space (`d x d_left`).
    pub left: ParamId,
    /// Embeds the right utility (`d x d_right`).
    pub right: ParamId,
    pub bn: String,
}

#[derive(Clone, Debug)]
pub struct MessageParams {
    /// Position weights `W_ij`, `n_i x n_j`.
    pub positions: ParamId,
    /// Scalar `w_ij`.
    pub weight: ParamId,
}

/// Every trainable factor symbol, with group sharing resolved by owner name.
#[derive(Clone, Debug)]
pub struct FactorGraphParams {
    pub locals: BTreeMap<String, LocalParams>,
    pub joints: BTreeMap<(String, String), JointParams>,
    /// Keyed by (target owner, source owner); cross-utility messages only.
    pub messages: BTreeMap<(String, String), MessageParams>,
    /// Self-interaction message of each owner.
    pub self_messages: BTreeMap<String, MessageParams>,
    pub batch_norms: BTreeMap<String, BatchNormState>,
}

impl FactorGraphParams {
    /// Registers parameters for every utility and every ordered pair.
    pub fn init<R: Rng + ?Sized>(
        cfg: &GraphConfig,
        store: &mut ParamStore,
        momentum: f64,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut p = FactorGraphParams {
            locals: BTreeMap::new(),
            joints: BTreeMap::new(),
            messages: BTreeMap::new(),
            self_messages: BTreeMap::new(),
            batch_norms: BTreeMap::new(),
        };
        let n = cfg.len();
        for u in &cfg.utilities {
            let o = u.owner().to_string();
            if p.locals.contains_key(&o) {
                continue;
            }
            let d = u.dim;
            let prefix = format!("fga.local.{o}");
            let bn_name = format!("fga.bn.self.{o}");
            let local = LocalParams {
                info_out: store.register(format!("{prefix}.v"), kaiming_normal(rng, &[1, d], d)?)?,
                info_in: store.register(format!("{prefix}.V"), kaiming_normal(rng, &[d, d], d)?)?,
                self_left: store.register(format!("{prefix}.L"), kaiming_normal(rng, &[d, d], d)?)?,
                self_right: store.register(format!("{prefix}.R"), kaiming_normal(rng, &[d, d], d)?)?,
                prior_weight: store.register(format!("{prefix}.prior_weight"), Tensor::scalar(1.0))?,
                local_weight: store.register(format!("{prefix}.local_weight"), Tensor::scalar(1.0))?,
                self_bn: bn_name.clone(),
            };
            p.batch_norms.insert(bn_name.clone(), BatchNormState::new(store, &bn_name, 1, momentum, eps)?);
            p.self_messages.insert(
                o.clone(),
                MessageParams {
                    positions: store.register(
                        format!("fga.self_msg.{o}.W"),
                        Tensor::filled(&[u.entities, u.entities], 1.0 / u.entities as f64)?,
                    )?,
                    weight: store.register(format!("fga.self_msg.{o}.w"), Tensor::scalar(1.0))?,
                },
            );
            p.locals.insert(o, local);
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (ui, uj) = (&cfg.utilities[i], &cfg.utilities[j]);
                let mkey = (ui.owner().to_string(), uj.owner().to_string());
                if !p.messages.contains_key(&mkey) {
                    let name = format!("fga.msg.{}.{}", mkey.0, mkey.1);
                    p.messages.insert(
                        mkey,
                        MessageParams {
                            positions: store.register(
                                format!("{name}.W"),
                                Tensor::filled(&[ui.entities, uj.entities], 1.0 / uj.entities as f64)?,
                            )?,
                            weight: store.register(format!("{name}.w"), Tensor::scalar(1.0))?,
                        },
                    );
                }
                if i < j {
                    let (left, right, key) = cfg.joint_orientation(i, j);
                    if !p.joints.contains_key(&key) {
                        let (dl, dr) = (cfg.utilities[left].dim, cfg.utilities[right].dim);
                        let d = dl.max(dr);
                        let name = format!("fga.joint.{}.{}", key.0, key.1);
                        let bn_name = format!("fga.bn.joint.{}.{}", key.0, key.1);
                        p.batch_norms.insert(bn_name.clone(), BatchNormState::new(store, &bn_name, 1, momentum, eps)?);
                        p.joints.insert(
                            key,
                            JointParams {
                                left: store.register(format!("{name}.L"), kaiming_normal(rng, &[d, dl], dl)?)?,
                                right: store.register(format!("{name}.R"), kaiming_normal(rng, &[d, dr], dr)?)?,
                                bn: bn_name,
                            },
                        );
                    }
                }
            }
        }
        Ok(p)
    }

    pub fn local(&self, cfg: &GraphConfig, i: usize) -> Result<&LocalParams> {
        let o = cfg.utilities[i].owner();
        self.locals
            .get(o)
            .ok_or_else(|| FgaError::Config(format!("no local factor parameters for `{o}`")))
    }

    /// Position weights and scalar for `μ_{source→target}`.
    pub fn message(&self, cfg: &GraphConfig, target: usize, source: usize) -> Result<&MessageParams> {
        let (t, s) = (cfg.utilities[target].owner(), cfg.utilities[source].owner());
        let found = if target == source {
            self.self_messages.get(t)
        } else {
            self.messages.get(&(t.to_string(), s.to_string()))
        };
        found.ok_or_else(|| FgaError::Config(format!("no message parameters for {t} <- {s}")))
    }

    fn joint(&self, key: &(String, String)) -> Result<&JointParams> {
        self.joints
            .get(key)
            .ok_or_else(|| FgaError::Config(format!("no joint factor parameters for {} / {}", key.0, key.1)))
    }

    fn bn(&self, name: &str) -> Result<&BatchNormState> {
        self.batch_norms
            .get(name)
            .ok_or_else(|| FgaError::Config(format!("no batch norm `{name}`")))
    }
}

/// `ψ_i(u) = v_iᵀ relu(dropout(V_i û))` for every entity; length `n_i`.
pub fn local_info<R: Rng + ?Sized>(
    g: &mut Graph,
    m: Var,
    info_out: Var,
    info_in: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let n = g.value(m).cols();
    let h = g.matmul(info_in, m)?;
    let h = dropout(g, h, rate, mode, rng)?;
    let h = g.relu(h)?;
    let s = g.matmul(info_out, h)?;
    g.reshape(s, &[n])
}

/// Cosine scores between left-embedded columns of `left` and right-embedded
/// columns of `right`: entry `(a, b) = norm(L û_a)ᵀ norm(R û_b)`. Not normalized
/// by batch statistics.
pub fn interaction(g: &mut Graph, left: Var, right: Var, l: Var, r: Var) -> Result<Var> {
    let el = g.matmul(l, left)?;
    let el = g.normalize_cols(el, NORMALIZE_EPS)?;
    let er = g.matmul(r, right)?;
    let er = g.normalize_cols(er, NORMALIZE_EPS)?;
    let elt = g.transpose(el)?;
    g.matmul(elt, er)
}

/// `μ(u) = Σ_v W(u, v) ψ(u, v)`.
pub fn message(g: &mut Graph, psi: Var, positions: Var) -> Result<Var> {
    let weighted = g.mul(positions, psi)?;
    g.sum_rows(weighted)
}

/// Softmax of the weighted sum of `(scalar, term)` pairs, summed in order.
pub fn belief(g: &mut Graph, terms: &[(Var, Var)]) -> Result<Var> {
    let weighted = terms
        .iter()
        .map(|&(w, t)| g.scale_by(w, t))
        .collect::<Result<Vec<_>>>()?;
    let logits = g.add_n(&weighted)?;
    g.softmax(logits)
}

/// `a = Σ_u b(u) û`, as a `d x 1` column.
pub fn attend(g: &mut Graph, m: Var, belief: Var) -> Result<Var> {
    let n = g.value(belief).len();
    let b = g.reshape(belief, &[n, 1])?;
    g.matmul(m, b)
}

/// Tape handles for one utility's attention.
#[derive(Clone, Debug)]
pub struct UtilityAttention {
    pub belief: Var,
    pub attended: Var,
    pub prior: Var,
    pub local: Var,
    /// Raw (unweighted) messages by source utility index; includes the self term.
    pub messages: Vec<(usize, Var)>,
}

/// Concrete attention outputs for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionResult {
    pub utilities: Vec<String>,
    pub beliefs: Vec<Vec<f64>>,
    pub attended: Vec<Vec<f64>>,
    pub prior_terms: Vec<Vec<f64>>,
    pub local_terms: Vec<Vec<f64>>,
    /// `message_terms[i]` lists `(source name, μ_{source→i})`.
    pub message_terms: Vec<Vec<(String, Vec<f64>)>>,
}

impl AttentionResult {
    pub fn resolve(g: &Graph, cfg: &GraphConfig, vars: &[UtilityAttention]) -> Self {
        let val = |v: Var| g.value(v).data().to_vec();
        AttentionResult {
            utilities: cfg.utilities.iter().map(|u| u.name.clone()).collect(),
            beliefs: vars.iter().map(|a| val(a.belief)).collect(),
            attended: vars.iter().map(|a| val(a.attended)).collect(),
            prior_terms: vars.iter().map(|a| val(a.prior)).collect(),
            local_terms: vars.iter().map(|a| val(a.local)).collect(),
            message_terms: vars
                .iter()
                .map(|a| {
                    a.messages
                        .iter()
                        .map(|&(j, m)| (cfg.utilities[j].name.clone(), val(m)))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Batch-norm statistics produced by a training pass, by state name.
pub type BatchNormUpdates = Vec<(String, BatchStats)>;

enum Factor {
    SelfPair(usize),
    Joint { left: usize, right: usize, key: (String, String) },
}

/// One round of message passing for every record in `batch`.
///
/// `batch[r][i]` is the `d_i x n_i` matrix of utility `i` in record `r`. In
/// training mode every factor's batch norm pools all entries of that factor's
/// score matrices across the batch (and across group members sharing it).
pub fn run_attention<R: Rng + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    params: &FactorGraphParams,
    cfg: &GraphConfig,
    batch: &[Vec<Var>],
    local_dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<Vec<UtilityAttention>>, BatchNormUpdates)> {
    let n = cfg.len();
    for record in batch {
        if record.len() != n {
            return Err(FgaError::Config(format!("expected {n} utilities, got {}", record.len())));
        }
        for (u, &m) in cfg.utilities.iter().zip(record) {
            let shape = g.value(m).shape();
            if shape != [u.dim, u.entities] {
                return Err(FgaError::shape("run_attention", format!("utility `{}` is {shape:?}, expected [{}, {}]", u.name, u.dim, u.entities)));
            }
        }
    }

    let mut factors = Vec::new();
    for i in 0..n {
        if cfg.message_enabled(i, i) {
            factors.push(Factor::SelfPair(i));
        }
        for j in i + 1..n {
            if cfg.message_enabled(i, j) || cfg.message_enabled(j, i) {
                let (left, right, key) = cfg.joint_orientation(i, j);
                factors.push(Factor::Joint { left, right, key });
            }
        }
    }

    // Raw scores per factor and record, grouped by batch-norm state.
    let mut pools: BTreeMap<String, Vec<(usize, usize, Var)>> = BTreeMap::new();
    for (r, record) in batch.iter().enumerate() {
        for (f, factor) in factors.iter().enumerate() {
            let (bn, psi) = match factor {
                Factor::SelfPair(i) => {
                    let lp = params.local(cfg, *i)?;
                    let l = g.param(store, lp.self_left)?;
                    let rr = g.param(store, lp.self_right)?;
                    (lp.self_bn.clone(), interaction(g, record[*i], record[*i], l, rr)?)
                }
                Factor::Joint { left, right, key } => {
                    let jp = params.joint(key)?;
                    let l = g.param(store, jp.left)?;
                    let rr = g.param(store, jp.right)?;
                    (jp.bn.clone(), interaction(g, record[*left], record[*right], l, rr)?)
                }
            };
            pools.entry(bn).or_default().push((r, f, psi));
        }
    }

    let mut normalized: BTreeMap<(usize, usize), Var> = BTreeMap::new();
    let mut updates = Vec::new();
    for (name, entries) in &pools {
        let bn = params.bn(name)?;
        let raw: Vec<Var> = entries.iter().map(|e| e.2).collect();
        let (outs, stats) = bn.forward_pooled(g, store, &raw, mode)?;
        for (e, o) in entries.iter().zip(outs) {
            normalized.insert((e.0, e.1), o);
        }
        if let Some(stats) = stats {
            updates.push((name.clone(), stats));
        }
    }

    // Oriented score matrix [n_target x n_source] for each enabled message.
    let mut lookup: BTreeMap<(usize, usize), (usize, bool)> = BTreeMap::new();
    for (f, factor) in factors.iter().enumerate() {
        match factor {
            Factor::SelfPair(i) => {
                lookup.insert((*i, *i), (f, false));
            }
            Factor::Joint { left, right, .. } => {
                lookup.insert((*left, *right), (f, false));
                lookup.insert((*right, *left), (f, true));
            }
        }
    }

    let mut results = Vec::with_capacity(batch.len());
    for (r, record) in batch.iter().enumerate() {
        let mut utilities = Vec::with_capacity(n);
        for i in 0..n {
            let spec = &cfg.utilities[i];
            let lp = params.local(cfg, i)?;
            let info_out = g.param(store, lp.info_out)?;
            let info_in = g.param(store, lp.info_in)?;
            let local = local_info(g, record[i], info_out, info_in, local_dropout, mode, rng)?;
            let prior = g.input(Tensor::vector(spec.prior_vector())?)?;
            let prior_w = g.param(store, lp.prior_weight)?;
            let local_w = g.param(store, lp.local_weight)?;
            let mut terms = vec![(prior_w, prior), (local_w, local)];
            let mut messages = Vec::new();
            for j in 0..n {
                if !cfg.message_enabled(i, j) {
                    continue;
                }
                let (f, transposed) = lookup[&(i, j)];
                let psi = normalized[&(r, f)];
                let psi = if transposed { g.transpose(psi)? } else { psi };
                let mp = params.message(cfg, i, j)?;
                let positions = g.param(store, mp.positions)?;
                let mu = message(g, psi, positions)?;
                terms.push((g.param(store, mp.weight)?, mu));
                messages.push((j, mu));
            }
            let b = belief(g, &terms)?;
            let attended = attend(g, record[i], b)?;
            utilities.push(UtilityAttention {
                belief: b,
                attended,
                prior,
                local,
                messages,
            });
        }
        results.push(utilities);
    }
    Ok((results, updates))
}
