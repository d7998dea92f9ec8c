//! Text and image encoders producing utility matrices (`dim x entities`).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SentenceState;
use crate::error::{FgaError, Result};
use crate::math::{dropout, Graph, Mode, ParamId, ParamStore, Tensor, Var};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;

/// Closed token vocabulary; id 0 is padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary with `<pad>` = 0, `<unk>` = 1, then `tokens` in order
    /// (duplicates and specials skipped).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [PAD, UNK].into_iter().map(str::to_string).chain(tokens.into_iter().map(|t| t.as_ref().to_string())) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Validates a token -> id map.
    pub fn from_map(map: BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![None; map.len()];
        for (tok, &id) in &map {
            match tokens.get_mut(id) {
                Some(slot @ None) => *slot = Some(tok.clone()),
                _ => return Err(FgaError::Config(format!("vocabulary ids are not dense (token `{tok}` -> {id})"))),
            }
        }
        if map.get(PAD) != Some(&PAD_ID) {
            return Err(FgaError::Config("vocabulary must map `<pad>` to 0".into()));
        }
        if !map.contains_key(UNK) {
            return Err(FgaError::Config("vocabulary lacks `<unk>`".into()));
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("dense")).collect();
        let index = map.into_iter().collect();
        Ok(Vocabulary { tokens, index })
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.index.iter().map(|(k, &v)| (k.clone(), v)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FgaError::io(format!("reading vocabulary {}", path.display()), e))?;
        let map: BTreeMap<String, usize> = serde_json::from_str(&text)
            .map_err(|e| FgaError::json(format!("parsing vocabulary {}", path.display()), e))?;
        Vocabulary::from_map(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_map()).expect("map serializes");
        std::fs::write(path, text).map_err(|e| FgaError::io(format!("writing vocabulary {}", path.display()), e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> usize {
        self.index[UNK]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Maps tokens to ids; unknown tokens become `<unk>`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSequence {
        let unk = self.unk_id();
        let ids: Vec<usize> = tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(unk)).collect();
        TokenSequence {
            true_length: ids.len(),
            ids,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Tokens before padding.
    pub true_length: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence {
            true_length: ids.len(),
            ids,
        }
    }

    /// Exactly `n` ids: keeps the first `n`, or right-pads with PAD.
    pub fn pad_or_truncate(&self, n: usize) -> Result<TokenSequence> {
        if n == 0 {
            return Err(FgaError::InvalidArgument("sequence length must be positive".into()));
        }
        let mut ids: Vec<usize> = self.ids.iter().copied().take(n).collect();
        ids.resize(n, PAD_ID);
        Ok(TokenSequence {
            ids,
            true_length: self.true_length.min(n),
        })
    }

    /// Entity index that represents the sentence as a whole.
    pub fn readout_index(&self, state: SentenceState) -> usize {
        match state {
            SentenceState::PaddedEnd => self.ids.len() - 1,
            SentenceState::LastToken => self.true_length.max(1).min(self.ids.len()) - 1,
        }
    }
}

/// He initialization: `N(0, 2 / fan_in)`.
pub fn kaiming_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// LSTM weights with gates stacked as (input, forget, output, cell).
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_dim;
        let w_input = store.register(format!("{name}.w_input"), kaiming_normal(rng, &[4 * h, input_dim], input_dim)?)?;
        let w_hidden = store.register(format!("{name}.w_hidden"), kaiming_normal(rng, &[4 * h, h], h)?)?;
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        let bias = store.register(format!("{name}.bias"), Tensor::vector(b)?)?;
        Ok(LstmParams {
            w_input,
            w_hidden,
            bias,
            input_dim,
            hidden_dim,
        })
    }

    /// Runs the recurrence from zero state over `steps` (each `input_dim x batch`).
    /// Returns the hidden state after every step (`hidden_dim x batch`).
    pub fn run(&self, g: &mut Graph, store: &ParamStore, steps: &[Var]) -> Result<Vec<Var>> {
        let h = self.hidden_dim;
        let wi = g.param(store, self.w_input)?;
        let wh = g.param(store, self.w_hidden)?;
        let b = g.param(store, self.bias)?;
        let mut outputs = Vec::with_capacity(steps.len());
        let mut state: Option<(Var, Var)> = None;
        for &x in steps {
            let zx = g.matmul(wi, x)?;
            let z = match state {
                Some((hid, _)) => {
                    let zh = g.matmul(wh, hid)?;
                    g.add(zx, zh)?
                }
                None => zx,
            };
            let z = g.add_col(z, b)?;
            let zi = g.slice_rows(z, 0, h)?;
            let zf = g.slice_rows(z, h, h)?;
            let zo = g.slice_rows(z, 2 * h, h)?;
            let zg = g.slice_rows(z, 3 * h, h)?;
            let gi = g.sigmoid(zi)?;
            let gf = g.sigmoid(zf)?;
            let go = g.sigmoid(zo)?;
            let gc = g.tanh(zg)?;
            let write = g.mul(gi, gc)?;
            let cell = match state {
                Some((_, c)) => {
                    let keep = g.mul(gf, c)?;
                    g.add(keep, write)?
                }
                None => write,
            };
            let tc = g.tanh(cell)?;
            let hid = g.mul(go, tc)?;
            outputs.push(hid);
            state = Some((hid, cell));
        }
        Ok(outputs)
    }
}

/// Columns are rows of the embedding table selected by the sequence ids.
pub fn embed_tokens(g: &mut Graph, table: Var, seq: &TokenSequence) -> Result<Var> {
    g.embed(table, &seq.ids)
}

/// Hidden state sequence (`hidden x n`) of a single embedded sentence (`input x n`).
pub fn lstm_encode(g: &mut Graph, store: &ParamStore, lstm: &LstmParams, x: Var) -> Result<Var> {
    let n = g.value(x).cols();
    let steps = (0..n).map(|t| g.slice_cols(x, t, 1)).collect::<Result<Vec<_>>>()?;
    let hidden = lstm.run(g, store, &steps)?;
    g.concat_cols(&hidden)
}

/// Hidden states of equally long sequences encoded side by side.
pub struct EncodedBatch {
    steps: Vec<Var>,
}

impl EncodedBatch {
    /// Utility matrix of sequence `b`: hidden state at every position.
    pub fn sequence(&self, g: &mut Graph, b: usize) -> Result<Var> {
        let cols: Vec<(Var, usize)> = self.steps.iter().map(|&s| (s, b)).collect();
        g.gather_cols(&cols)
    }

    /// Hidden states at `positions[b]` for every sequence `b`, as columns.
    pub fn readout(&self, g: &mut Graph, positions: &[usize]) -> Result<Var> {
        let cols: Vec<(Var, usize)> = positions.iter().enumerate().map(|(b, &t)| (self.steps[t], b)).collect();
        g.gather_cols(&cols)
    }
}

/// Embeds and encodes sequences that already share one padded length.
pub fn encode_batch(
    g: &mut Graph,
    store: &ParamStore,
    table: Var,
    lstm: &LstmParams,
    seqs: &[&TokenSequence],
) -> Result<EncodedBatch> {
    let n = seqs.first().map(|s| s.ids.len()).ok_or_else(|| FgaError::InvalidArgument("no sequences".into()))?;
    if seqs.iter().any(|s| s.ids.len() != n) {
        return Err(FgaError::shape("encode_batch", "sequences must share a padded length"));
    }
    let steps = (0..n)
        .map(|t| {
            let ids: Vec<usize> = seqs.iter().map(|s| s.ids[t]).collect();
            g.embed(table, &ids)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedBatch {
        steps: lstm.run(g, store, &steps)?,
    })
}

/// One entity per answer: the sentence state of each candidate (`hidden x n_A`).
pub fn encode_answer_bank(
    g: &mut Graph,
    store: &ParamStore,
    table: Var,
    lstm: &LstmParams,
    answers: &[TokenSequence],
    state: SentenceState,
) -> Result<Var> {
    if answers.len() < 2 {
        return Err(FgaError::InvalidArgument("answer bank needs at least two candidates".into()));
    }
    let refs: Vec<&TokenSequence> = answers.iter().collect();
    let batch = encode_batch(g, store, table, lstm, &refs)?;
    let positions: Vec<usize> = answers.iter().map(|a| a.readout_index(state)).collect();
    batch.readout(g, &positions)
}

/// Precomputed region features, `regions x dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    pub regions: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl RegionFeatures {
    pub fn new(regions: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if regions * dim != data.len() || regions == 0 || dim == 0 {
            return Err(FgaError::shape("region_features", format!("{regions}x{dim} with {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FgaError::NonFinite { op: "region_features" });
        }
        Ok(RegionFeatures { regions, dim, data })
    }

    /// `dim x regions` matrix, one column per region.
    pub fn to_columns(&self) -> Tensor {
        let t = Tensor::from_parts(self.regions, self.dim, self.data.iter().map(|&v| v as f64).collect());
        t.transpose()
    }
}

/// Per-region 1x1 embedding, ReLU, then dropout. Output is `dim x regions`.
pub fn encode_image<R: Rng + ?Sized>(
    g: &mut Graph,
    w: Var,
    regions: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let y = g.matmul(w, regions)?;
    let y = g.relu(y)?;
    dropout(g, y, rate, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pad_or_truncate_examples() {
        let s = TokenSequence::new(vec![4, 5, 6]);
        let p = s.pad_or_truncate(5).unwrap();
        assert_eq!(p.ids, vec![4, 5, 6, 0, 0]);
        assert_eq!(p.true_length, 3);

        let long = TokenSequence::new((1..=25).collect());
        let t = long.pad_or_truncate(20).unwrap();
        assert_eq!(t.ids, (1..=20).collect::<Vec<_>>());
        assert_eq!(t.true_length, 20);

        let same = TokenSequence::new(vec![3, 2]);
        assert_eq!(same.pad_or_truncate(2).unwrap(), same);
        assert!(same.pad_or_truncate(0).is_err());
    }

    #[test]
    fn vocabulary_specials_and_unknowns() {
        let v = Vocabulary::from_tokens(["a", "b", "a"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id(PAD), Some(0));
        let seq = v.encode(&["b", "zzz"]);
        assert_eq!(seq.ids, vec![3, v.unk_id()]);
        let back = Vocabulary::from_map(v.to_map()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn vocabulary_map_validation() {
        let mut m: BTreeMap<String, usize> = [("<pad>", 1), ("<unk>", 0)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
        assert!(Vocabulary::from_map(m.clone()).is_err());
        m.insert("<pad>".into(), 0);
        m.insert("<unk>".into(), 2);
        assert!(Vocabulary::from_map(m).is_err(), "ids must be dense");
    }

    #[test]
    fn embed_examples() {
        let mut g = Graph::new();
        let e = g.input(Tensor::identity(3).unwrap()).unwrap();
        let y = embed_tokens(&mut g, e, &TokenSequence::new(vec![2, 1])).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let pads = embed_tokens(&mut g, e, &TokenSequence::new(vec![0, 0, 0])).unwrap();
        assert_eq!(g.value(pads).data(), &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            embed_tokens(&mut g, e, &TokenSequence::new(vec![3])),
            Err(FgaError::OutOfVocabulary { id: 3, size: 3 })
        ));
    }

    fn lstm_fixture(seed: u64) -> (ParamStore, LstmParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = LstmParams::register(&mut store, "lstm", 3, 2, &mut rng).unwrap();
        (store, p)
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let (store, p) = lstm_fixture(0);
        assert_eq!(store.value(p.bias).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let (mut store, p) = lstm_fixture(0);
        for id in [p.w_input, p.w_hidden, p.bias] {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape).unwrap()).unwrap();
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(3, 4, (0..12).map(|v| v as f64).collect()).unwrap()).unwrap();
        let h = lstm_encode(&mut g, &store, &p, x).unwrap();
        assert_eq!(g.value(h).shape(), &[2, 4]);
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_hand_cell() {
        let (store, p) = lstm_fixture(3);
        let x = [0.5, -1.0, 2.0];
        let mut g = Graph::new();
        let xv = g.input(Tensor::matrix(3, 1, x.to_vec()).unwrap()).unwrap();
        let h = lstm_encode(&mut g, &store, &p, xv).unwrap();

        // From zero state: z = W x + b; c = i * g; h = o * tanh(c).
        let w = store.value(p.w_input);
        let b = store.value(p.bias).data();
        let z: Vec<f64> = (0..8).map(|r| (0..3).map(|k| w.get(r, k) * x[k]).sum::<f64>() + b[r]).collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for u in 0..2 {
            let c = sig(z[u]) * z[6 + u].tanh();
            let expected = sig(z[4 + u]) * c.tanh();
            assert!((g.value(h).data()[u] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let (mut store, p) = lstm_fixture(11);
        let input = Tensor::matrix(3, 4, vec![0.3, -0.2, 0.9, 0.1, -0.7, 0.4, 0.2, -0.5, 0.8, 0.6, -0.3, 0.05]).unwrap();
        let report = grad_check(&mut store, GradCheckOptions::default(), |g, s| {
            let x = g.input(input.clone())?;
            let h = lstm_encode(g, s, &p, x)?;
            let flat = g.reshape(h, &[1, 8])?;
            let w = g.input(Tensor::matrix(8, 1, vec![1.0, -0.5, 0.25, 2.0, -1.0, 0.75, 0.3, -1.5])?)?;
            g.matmul(flat, w)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn answer_bank_columns_follow_answers() {
        let (store, p) = lstm_fixture(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = kaiming_normal(&mut rng, &[6, 3], 3).unwrap();
        let a = TokenSequence::new(vec![1, 2, 0]);
        let b = TokenSequence::new(vec![3, 4, 5]);
        let mut g = Graph::new();
        let e = g.input(table).unwrap();
        let bank = encode_answer_bank(&mut g, &store, e, &p, &[a.clone(), b.clone(), a.clone()], SentenceState::PaddedEnd).unwrap();
        let m = g.value(bank).clone();
        assert_eq!(m.shape(), &[2, 3]);
        assert_eq!(m.column(0), m.column(2));
        let swapped = encode_answer_bank(&mut g, &store, e, &p, &[b, a.clone(), a], SentenceState::PaddedEnd).unwrap();
        let s = g.value(swapped).clone();
        assert_eq!(s.column(0), m.column(1));
        assert_eq!(s.column(1), m.column(0));
        assert!(encode_answer_bank(&mut g, &store, e, &p, &[TokenSequence::new(vec![1])], SentenceState::PaddedEnd).is_err());
    }

    #[test]
    fn image_embedding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = RegionFeatures::new(3, 2, vec![0.5, 1.0, 0.0, 2.0, 3.0, 0.25]).unwrap();
        let mut g = Graph::new();
        let cols = g.input(feats.to_columns()).unwrap();
        let eye = g.input(Tensor::identity(2).unwrap()).unwrap();
        let y = encode_image(&mut g, eye, cols, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(g.value(y), &feats.to_columns());

        let zero = g.input(Tensor::zeros(&[2, 2]).unwrap()).unwrap();
        let y = encode_image(&mut g, zero, cols, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn image_shape_at_default_dims() {
        let feats = RegionFeatures::new(49, 512, vec![0.1; 49 * 512]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let cols = g.input(feats.to_columns()).unwrap();
        let w = g.input(kaiming_normal(&mut rng, &[512, 512], 512).unwrap()).unwrap();
        let y = encode_image(&mut g, w, cols, 0.5, Mode::Train, &mut rng).unwrap();
        assert_eq!(g.value(y).shape(), &[512, 49]);
    }
}
