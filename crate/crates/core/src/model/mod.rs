//! Goal-conditioned recurrent dialogue model.
//!
//! A goal encoder GRU summarises the six goal integers into `h^g`. The
//! dialogue GRU reads the previous token (embedded with `E`) together with
//! `h^g` and predicts the next token through the same matrix `E`. At the
//! end of a dialogue a bidirectional GRU with attention over the dialogue
//! states feeds six independent output classifiers.
//!
//! Two forward paths exist: [`tape`] builds differentiable graphs for
//! training, [`infer`] runs the same arithmetic on plain slices for
//! sampling, rollouts and evaluation.

mod infer;
mod tape;

pub use infer::{
    sample_token, temperature_probs, ChoiceDistribution, ModelState,
};
pub use tape::ExampleLoss;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::compute::{add_gru, ComputeError, GruParams, ParamId, ParamStore};
use crate::corpus::{TokenId, TrainingExample, Vocabulary};
use crate::env::NUM_ITEMS;

pub const CHECKPOINT_MAGIC: &str = "NEGOTIATOR-CKPT v1";
/// Goal tokens: item counts 0..=7, then values 0..=10.
pub const MAX_GOAL_COUNT: u32 = 7;
pub const MAX_GOAL_VALUE: u32 = 10;
pub const GOAL_VOCAB: usize = (MAX_GOAL_COUNT + 1 + MAX_GOAL_VALUE + 1) as usize;
pub const NUM_OUTPUTS: usize = 2 * NUM_ITEMS;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error("goal must have {NUM_OUTPUTS} integers, got {0}")]
    GoalLength(usize),
    #[error("goal field {index} = {value} outside the goal-token range")]
    GoalOutOfRange { index: usize, value: u32 },
    #[error("{0} tokens but {1} dialogue states")]
    LengthMismatch(usize, usize),
    #[error("empty dialogue")]
    EmptyDialogue,
    #[error("token {0} outside vocabulary of {1}")]
    TokenOutOfRange(u32, usize),
    #[error("output loss weight must be non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub goal_embed: usize,
    pub word_embed: usize,
    pub goal_hidden: usize,
    pub lm_hidden: usize,
    pub output_hidden: usize,
    pub attn_hidden: usize,
    pub sel_hidden: usize,
    /// Largest per-type count the output classifiers can name.
    pub max_count: u32,
    pub init_range: f64,
}

impl ModelConfig {
    /// Full-size dimensions.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            goal_embed: 64,
            word_embed: 256,
            goal_hidden: 64,
            lm_hidden: 128,
            output_hidden: 256,
            attn_hidden: 256,
            sel_hidden: 256,
            max_count: 4,
            init_range: 0.1,
        }
    }

    /// Reduced dimensions for single-core desk runs.
    pub fn small(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            goal_embed: 16,
            word_embed: 32,
            goal_hidden: 32,
            lm_hidden: 64,
            output_hidden: 32,
            attn_hidden: 32,
            sel_hidden: 32,
            max_count: 4,
            init_range: 0.3,
        }
    }

    /// Tiny dimensions for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            goal_embed: 4,
            word_embed: 6,
            goal_hidden: 4,
            lm_hidden: 8,
            output_hidden: 4,
            attn_hidden: 4,
            sel_hidden: 6,
            max_count: 4,
            init_range: 0.1,
        }
    }

    /// Classes per output position: counts `0..=max_count`, then no-agreement.
    pub fn output_classes(&self) -> usize {
        self.max_count as usize + 2
    }

    pub fn no_agreement_class(&self) -> usize {
        self.max_count as usize + 1
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab", self.vocab_size.to_string()),
            ("goal_embed", self.goal_embed.to_string()),
            ("word_embed", self.word_embed.to_string()),
            ("goal_hidden", self.goal_hidden.to_string()),
            ("lm_hidden", self.lm_hidden.to_string()),
            ("output_hidden", self.output_hidden.to_string()),
            ("attn_hidden", self.attn_hidden.to_string()),
            ("sel_hidden", self.sel_hidden.to_string()),
            ("max_count", self.max_count.to_string()),
            ("init_range", format!("{:?}", self.init_range)),
        ]
    }

    pub fn header(&self) -> String {
        let mut s = CHECKPOINT_MAGIC.to_string();
        for (k, v) in self.fields() {
            s.push_str(&format!(" {k}={v}"));
        }
        s
    }

    pub fn from_header(header: &str) -> Result<Self, ModelError> {
        let rest = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| ModelError::Checkpoint(format!("bad header {header:?}")))?;
        let kv: BTreeMap<&str, &str> = rest
            .split_whitespace()
            .filter_map(|f| f.split_once('='))
            .collect();
        let get = |k: &str| -> Result<&str, ModelError> {
            kv.get(k)
                .copied()
                .ok_or_else(|| ModelError::Checkpoint(format!("header missing {k}")))
        };
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Checkpoint(format!("bad header field {k}")))
        };
        Ok(Self {
            vocab_size: num("vocab")?,
            goal_embed: num("goal_embed")?,
            word_embed: num("word_embed")?,
            goal_hidden: num("goal_hidden")?,
            lm_hidden: num("lm_hidden")?,
            output_hidden: num("output_hidden")?,
            attn_hidden: num("attn_hidden")?,
            sel_hidden: num("sel_hidden")?,
            max_count: num("max_count")? as u32,
            init_range: get("init_range")?
                .parse()
                .map_err(|_| ModelError::Checkpoint("bad init_range".into()))?,
        })
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.fields().into_iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Params {
    pub goal_emb: ParamId,
    pub goal_gru: GruParams,
    pub word_emb: ParamId,
    pub lm_h0: ParamId,
    pub lm_gru: GruParams,
    pub lm_proj: ParamId,
    pub sel_fwd: GruParams,
    pub sel_bwd: GruParams,
    pub attn_in: ParamId,
    pub attn_hidden: ParamId,
    pub attn_score: ParamId,
    pub sel_combine: ParamId,
    pub classifiers: [ParamId; NUM_OUTPUTS],
}

/// Parameters and configuration of one negotiation agent.
#[derive(Debug, Clone)]
pub struct NegotiationModel {
    cfg: ModelConfig,
    store: ParamStore,
    p: Params,
}

fn build_store(cfg: &ModelConfig) -> (ParamStore, Params) {
    let mut s = ParamStore::new();
    let goal_emb = s.add("goal.emb", &[GOAL_VOCAB, cfg.goal_embed]);
    let goal_gru = add_gru(&mut s, "goal.gru", cfg.goal_embed, cfg.goal_hidden);
    let word_emb = s.add("word.emb", &[cfg.vocab_size, cfg.word_embed]);
    let lm_h0 = s.add("lm.h0", &[cfg.lm_hidden]);
    let lm_gru = add_gru(&mut s, "lm.gru", cfg.word_embed + cfg.goal_hidden, cfg.lm_hidden);
    let lm_proj = s.add("lm.proj", &[cfg.word_embed, cfg.lm_hidden]);
    let sel_in = cfg.word_embed + cfg.lm_hidden;
    let sel_fwd = add_gru(&mut s, "sel.fwd", sel_in, cfg.output_hidden);
    let sel_bwd = add_gru(&mut s, "sel.bwd", sel_in, cfg.output_hidden);
    let attn_in = s.add("attn.in", &[cfg.attn_hidden, 2 * cfg.output_hidden]);
    let attn_hidden = s.add("attn.hidden", &[cfg.attn_hidden, cfg.attn_hidden]);
    let attn_score = s.add("attn.score", &[cfg.attn_hidden]);
    let sel_combine = s.add("sel.combine", &[cfg.sel_hidden, cfg.goal_hidden + cfg.lm_hidden]);
    let classifiers = std::array::from_fn(|i| {
        s.add(&format!("sel.out{i}"), &[cfg.output_classes(), cfg.sel_hidden])
    });
    let p = Params {
        goal_emb,
        goal_gru,
        word_emb,
        lm_h0,
        lm_gru,
        lm_proj,
        sel_fwd,
        sel_bwd,
        attn_in,
        attn_hidden,
        attn_score,
        sel_combine,
        classifiers,
    };
    (s, p)
}

impl NegotiationModel {
    /// Fresh model with all parameters uniform in `±cfg.init_range`.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Self {
        let (mut store, p) = build_store(&cfg);
        store.init_uniform(cfg.init_range, rng);
        Self { cfg, store, p }
    }

    /// Model with every parameter zero.
    pub fn zeroed(cfg: ModelConfig) -> Self {
        let (store, p) = build_store(&cfg);
        Self { cfg, store, p }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn params(&self) -> &Params {
        &self.p
    }

    pub fn word_embedding(&self) -> ParamId {
        self.p.word_emb
    }

    pub fn classifier(&self, i: usize) -> ParamId {
        self.p.classifiers[i]
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    pub fn save(&self) -> String {
        self.store.to_checkpoint(&self.cfg.header())
    }

    pub fn load(text: &str) -> Result<Self, ModelError> {
        let (header, loaded) = ParamStore::from_checkpoint(text)?;
        let cfg = ModelConfig::from_header(&header)?;
        let (mut store, p) = build_store(&cfg);
        store.copy_values_from(&loaded)?;
        Ok(Self { cfg, store, p })
    }

    pub(crate) fn goal_token(&self, goal: &[u32]) -> Result<[usize; NUM_OUTPUTS], ModelError> {
        if goal.len() != NUM_OUTPUTS {
            return Err(ModelError::GoalLength(goal.len()));
        }
        let mut ids = [0; NUM_OUTPUTS];
        for (i, &v) in goal.iter().enumerate() {
            ids[i] = if i % 2 == 0 {
                if v > MAX_GOAL_COUNT {
                    return Err(ModelError::GoalOutOfRange { index: i, value: v });
                }
                v as usize
            } else {
                if v > MAX_GOAL_VALUE {
                    return Err(ModelError::GoalOutOfRange { index: i, value: v });
                }
                (MAX_GOAL_COUNT + 1 + v) as usize
            };
        }
        Ok(ids)
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        match tokens.iter().find(|t| t.index() >= self.cfg.vocab_size) {
            Some(t) => Err(ModelError::TokenOutOfRange(t.0, self.cfg.vocab_size)),
            None => Ok(()),
        }
    }
}

/// A perspective mapped to token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub goal: [u32; NUM_OUTPUTS],
    pub tokens: Vec<TokenId>,
    /// Output classes (own take then partner take) when trainable.
    pub output: Option<[u32; NUM_OUTPUTS]>,
}

impl EncodedExample {
    pub fn new(ex: &TrainingExample, vocab: &Vocabulary) -> Self {
        Self {
            goal: ex.goal,
            tokens: vocab.encode(&ex.dialogue),
            output: ex.output,
        }
    }

    pub fn encode_all(examples: &[TrainingExample], vocab: &Vocabulary) -> Vec<Self> {
        examples.iter().map(|e| Self::new(e, vocab)).collect()
    }
}
