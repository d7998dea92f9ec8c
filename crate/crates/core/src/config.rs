//! Run configuration: the single source of model dimensions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FgaError, Result};
use crate::math::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    /// Word embedding width shared by every text encoder.
    pub embed_dim: usize,
    pub question_dim: usize,
    pub caption_dim: usize,
    /// Width of each history question / answer utility.
    pub history_dim: usize,
    pub answer_dim: usize,
    /// Image region feature width (kept by the 1x1 embedding).
    pub image_dim: usize,
    /// Width of each fused history round.
    pub round_dim: usize,
    pub regions: usize,
    pub question_len: usize,
    pub caption_len: usize,
    pub history_len: usize,
    pub answer_len: usize,
    /// Candidates per record.
    pub candidates: usize,
    /// History rounds T.
    pub rounds: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            embed_dim: 128,
            question_dim: 512,
            caption_dim: 128,
            history_dim: 128,
            answer_dim: 512,
            image_dim: 512,
            round_dim: 128,
            regions: 49,
            question_len: 20,
            caption_len: 20,
            history_len: 20,
            answer_len: 20,
            candidates: 100,
            rounds: 10,
        }
    }
}

impl Dims {
    /// Length of the concatenated attention vector `(a_I, a_Q, a_C, a_A, a_H)`.
    pub fn attention_len(&self) -> usize {
        self.image_dim + self.question_dim + self.caption_dim + self.answer_dim + self.rounds * self.round_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutRates {
    /// After the 1x1 image embedding.
    pub image: f64,
    /// After `V_i u_i` in the local information factor.
    pub local: f64,
    /// Before the final fusion layer.
    pub fusion: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates {
            image: 0.5,
            local: 0.1,
            fusion: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Rank candidate answers to the current question.
    #[default]
    Answer,
    /// Rank candidate questions given the previous interaction.
    QuestionGeneration,
}

/// Which hidden state represents a whole sentence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceState {
    /// State at index `n - 1` of the padded sequence.
    #[default]
    PaddedEnd,
    /// State at the last real token.
    LastToken,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSpec {
    /// Zero potential.
    #[default]
    None,
    /// One-hot at the last entity index.
    Last,
}

/// Directed message `source -> target`, by utility name.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MessageEdge {
    pub target: String,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dims: Dims,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: DropoutRates,
    pub batchnorm: BatchNormConfig,
    pub mode: TaskMode,
    pub sentence_state: SentenceState,
    /// When false, only prior, local information and self-interaction terms
    /// reach each belief.
    pub joint_factors: bool,
    pub disabled_messages: Vec<MessageEdge>,
    /// Prior per utility kind (`image`, `question`, `caption`, `answers`,
    /// `history_question`, `history_answer`). Missing kinds get no prior.
    pub priors: BTreeMap<String, PriorSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let priors = [("question", PriorSpec::Last), ("caption", PriorSpec::Last)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        RunConfig {
            dims: Dims::default(),
            optimizer: AdamConfig::default(),
            batch_size: 64,
            epochs: 4,
            seed: 0,
            dropout: DropoutRates::default(),
            batchnorm: BatchNormConfig::default(),
            mode: TaskMode::Answer,
            sentence_state: SentenceState::PaddedEnd,
            joint_factors: true,
            disabled_messages: Vec::new(),
            priors,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FgaError::io(format!("reading config {}", path.display()), e))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| FgaError::json(format!("parsing config {}", path.display()), e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let named = [
            ("embed_dim", d.embed_dim),
            ("question_dim", d.question_dim),
            ("caption_dim", d.caption_dim),
            ("history_dim", d.history_dim),
            ("answer_dim", d.answer_dim),
            ("image_dim", d.image_dim),
            ("round_dim", d.round_dim),
            ("regions", d.regions),
            ("question_len", d.question_len),
            ("caption_len", d.caption_len),
            ("history_len", d.history_len),
            ("answer_len", d.answer_len),
            ("candidates", d.candidates),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(FgaError::Config(format!("`{name}` must be positive")));
        }
        if d.candidates < 2 {
            return Err(FgaError::Config("at least two candidates are required".into()));
        }
        for (name, rate) in [
            ("image", self.dropout.image),
            ("local", self.dropout.local),
            ("fusion", self.dropout.fusion),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(FgaError::Config(format!("dropout.{name} = {rate} outside [0, 1)")));
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(FgaError::Config("invalid optimizer settings".into()));
        }
        if !(self.batchnorm.momentum > 0.0 && self.batchnorm.momentum < 1.0 && self.batchnorm.eps > 0.0) {
            return Err(FgaError::Config("invalid batch norm settings".into()));
        }
        Ok(())
    }

    /// Canonical JSON; field order is fixed by the struct definitions.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// Hash of everything that fixes the parameter layout and forward pass,
    /// ignoring training-only fields (seed, epochs, optimizer, batch size).
    pub fn architecture_hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.epochs = 0;
        c.batch_size = 1;
        c.optimizer = AdamConfig::default();
        c.hash()
    }
}
