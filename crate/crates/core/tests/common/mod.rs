//! Randomized factor graphs shared by the fga property tests and the acceptance run.
#![allow(dead_code)]

use fga::config::{MessageEdge, PriorSpec};
use fga::fga::{run_attention, AttentionResult, FactorGraphParams, GraphConfig, UtilityKind, UtilitySpec};
use fga::math::{Graph, Mode, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub cfg: GraphConfig,
    pub store: ParamStore,
    pub params: FactorGraphParams,
    pub mats: Vec<Tensor>,
}

const KINDS: [UtilityKind; 4] = [UtilityKind::Image, UtilityKind::Question, UtilityKind::Caption, UtilityKind::Answers];

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Two to four ungrouped utilities with every parameter perturbed away from
/// its initialization and batch norms in eval mode with random statistics.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(2..=4);
    let utilities: Vec<UtilitySpec> = (0..count)
        .map(|k| UtilitySpec {
            name: format!("u{k}"),
            kind: KINDS[k],
            group: None,
            dim: rng.gen_range(2..=5),
            entities: rng.gen_range(2..=5),
            prior: if rng.gen_bool(0.5) { PriorSpec::Last } else { PriorSpec::None },
        })
        .collect();
    let cfg = GraphConfig::new(utilities).unwrap();
    let mut store = ParamStore::new();
    let mut params = FactorGraphParams::init(&cfg, &mut store, 0.1, 1e-5, &mut rng).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    for bn in params.batch_norms.values_mut() {
        bn.running_mean = vec![rng.gen_range(-0.5..0.5)];
        bn.running_var = vec![rng.gen_range(0.2..2.0)];
        bn.ready = true;
    }
    let mats = cfg.utilities.iter().map(|u| random_matrix(&mut rng, u.dim, u.entities)).collect();
    Instance { cfg, store, params, mats }
}

impl Instance {
    pub fn attend(&self, mats: &[Tensor]) -> AttentionResult {
        self.attend_with(&self.store, &self.cfg, mats)
    }

    pub fn attend_with(&self, store: &ParamStore, cfg: &GraphConfig, mats: &[Tensor]) -> AttentionResult {
        let mut g = Graph::new();
        let vars = mats.iter().map(|m| g.input(m.clone()).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (res, _) = run_attention(&mut g, store, &self.params, cfg, &[vars], 0.0, Mode::Eval, &mut rng).unwrap();
        AttentionResult::resolve(&g, cfg, &res[0])
    }

    pub fn positions(&self, target: usize, source: usize) -> fga::math::ParamId {
        self.params.message(&self.cfg, target, source).unwrap().positions
    }

    pub fn disable(&self, target: usize, source: usize) -> GraphConfig {
        let mut cfg = self.cfg.clone();
        cfg.disabled.push(MessageEdge {
            target: cfg.utilities[target].name.clone(),
            source: cfg.utilities[source].name.clone(),
        });
        cfg
    }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A random permutation of `0..n`; keeps the last index in place when `fix_last`.
pub fn permutation<R: Rng>(rng: &mut R, n: usize, fix_last: bool) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let movable = if fix_last { n - 1 } else { n };
    let mut p: Vec<usize> = (0..movable).collect();
    p.shuffle(rng);
    p.extend(movable..n);
    p
}

/// Column `k` of the result is column `perm[k]` of `t`.
pub fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Tensor::zeros(&[r, c]).unwrap();
    for i in 0..r {
        for (k, &src) in perm.iter().enumerate() {
            out.set(i, k, t.get(i, src));
        }
    }
    out
}

pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    permute_cols(&t.transpose(), perm).transpose()
}

/// Outcome of the four belief checks on one instance; each entry is the
/// observed worst deviation.
#[derive(Clone, Copy, Debug, Default)]
pub struct InvariantErrors {
    pub normalization: f64,
    pub shift: f64,
    pub source_permutation: f64,
    pub target_permutation: f64,
    pub scale: f64,
    /// Entries of some belief outside `(0, 1)`.
    pub out_of_range: bool,
}

impl InvariantErrors {
    pub fn merge(self, o: InvariantErrors) -> InvariantErrors {
        InvariantErrors {
            normalization: self.normalization.max(o.normalization),
            shift: self.shift.max(o.shift),
            source_permutation: self.source_permutation.max(o.source_permutation),
            target_permutation: self.target_permutation.max(o.target_permutation),
            scale: self.scale.max(o.scale),
            out_of_range: self.out_of_range || o.out_of_range,
        }
    }
}

fn weights(inst: &Instance, i: usize) -> (f64, f64, Vec<f64>) {
    let local = inst.params.local(&inst.cfg, i).unwrap();
    let s = |id| inst.store.value(id).data()[0];
    let msgs = (0..inst.cfg.len())
        .map(|j| s(inst.params.message(&inst.cfg, i, j).unwrap().weight))
        .collect();
    (s(local.prior_weight), s(local.local_weight), msgs)
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Runs every belief invariant on instance `seed`.
pub fn check_invariants(seed: u64) -> InvariantErrors {
    let inst = random_instance(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let n = inst.cfg.len();
    let base = inst.attend(&inst.mats);
    let mut err = InvariantErrors::default();

    for b in &base.beliefs {
        err.normalization = err.normalization.max((b.iter().sum::<f64>() - 1.0).abs());
        err.out_of_range |= b.iter().any(|&p| !(p > 0.0 && p < 1.0));
    }

    // Adding a constant to every logit leaves the belief unchanged.
    let i = rng.gen_range(0..n);
    let (wp, wl, wm) = weights(&inst, i);
    let logits: Vec<f64> = (0..inst.cfg.utilities[i].entities)
        .map(|u| {
            let msg: f64 = base.message_terms[i].iter().zip(&wm).map(|((_, m), w)| w * m[u]).sum();
            wp * base.prior_terms[i][u] + wl * base.local_terms[i][u] + msg
        })
        .collect();
    let c = rng.gen_range(-50.0..50.0);
    let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
    err.shift = max_diff(&softmax(&logits), &softmax(&shifted)).max(max_diff(&softmax(&logits), &base.beliefs[i]));

    // Permuting the entities of a source j together with W_ij's columns
    // leaves μ_{j→i} and b_i unchanged.
    let (i, j) = loop {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            break (a, b);
        }
    };
    let perm = permutation(&mut rng, inst.cfg.utilities[j].entities, false);
    let mut mats = inst.mats.clone();
    mats[j] = permute_cols(&inst.mats[j], &perm);
    let mut store = inst.store.clone();
    let w = inst.positions(i, j);
    store.set_value(w, permute_cols(inst.store.value(w), &perm)).unwrap();
    let moved = inst.attend_with(&store, &inst.cfg, &mats);
    let msg = |r: &AttentionResult| r.message_terms[i].iter().find(|(s, _)| *s == inst.cfg.utilities[j].name).unwrap().1.clone();
    err.source_permutation = max_diff(&msg(&base), &msg(&moved)).max(max_diff(&base.beliefs[i], &moved.beliefs[i]));

    // Permuting the entities of a target i together with the rows of every
    // W_ij (both axes of W_ii) and the prior permutes b_i and keeps a_i.
    let i = rng.gen_range(0..n);
    let spec = &inst.cfg.utilities[i];
    let perm = permutation(&mut rng, spec.entities, spec.prior == PriorSpec::Last);
    let mut mats = inst.mats.clone();
    mats[i] = permute_cols(&inst.mats[i], &perm);
    let mut store = inst.store.clone();
    for j in 0..n {
        let w = inst.positions(i, j);
        let mut t = permute_rows(inst.store.value(w), &perm);
        if j == i {
            t = permute_cols(&t, &perm);
        }
        store.set_value(w, t).unwrap();
    }
    let moved = inst.attend_with(&store, &inst.cfg, &mats);
    let expected: Vec<f64> = perm.iter().map(|&src| base.beliefs[i][src]).collect();
    err.target_permutation = max_diff(&expected, &moved.beliefs[i]).max(max_diff(&base.attended[i], &moved.attended[i]));

    // Scaling a utility's entities by c > 0 leaves every interaction unchanged.
    let j = rng.gen_range(0..n);
    let c = rng.gen_range(0.01..100.0);
    let mut mats = inst.mats.clone();
    mats[j] = Tensor::new(inst.mats[j].shape().to_vec(), inst.mats[j].data().iter().map(|v| v * c).collect()).unwrap();
    let scaled = inst.attend(&mats);
    for t in 0..n {
        for ((_, a), (_, b)) in base.message_terms[t].iter().zip(&scaled.message_terms[t]) {
            err.scale = err.scale.max(max_diff(a, b));
        }
    }
    err
}
