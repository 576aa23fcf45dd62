//! Optional TOML configuration. Every field may be omitted; command-line
//! flags take precedence over the file, which takes precedence over the
//! built-in defaults.

use std::path::Path;

use anyhow::{bail, Context};
use negotiator::agents::EngineConfig;
use negotiator::corpus::SynthStyle;
use negotiator::model::ModelConfig;
use negotiator::train::{RlConfig, SupervisedConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub supervised: SupervisedSection,
    pub rl: RlSection,
    pub engine: EngineSection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `tiny`, `small` or `paper`.
    pub size: Option<String>,
    pub init_range: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedSection {
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub clip: Option<f64>,
    pub epochs: Option<usize>,
    pub anneal: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub lr: Option<f64>,
    pub clip: Option<f64>,
    pub gamma: Option<f64>,
    pub interleave: Option<usize>,
    pub sup_lr: Option<f64>,
    pub sup_clip: Option<f64>,
    pub sup_batch: Option<usize>,
    pub sup_alpha: Option<f64>,
    pub temperature: Option<f64>,
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub max_turns: Option<usize>,
    pub max_turn_tokens: Option<usize>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub max_offers: Option<usize>,
    pub accept_noise: Option<f64>,
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn model(&self, vocab_size: usize) -> anyhow::Result<ModelConfig> {
        let mut cfg = match self.model.size.as_deref().unwrap_or("small") {
            "tiny" => ModelConfig::tiny(vocab_size),
            "small" => ModelConfig::small(vocab_size),
            "paper" => ModelConfig::paper(vocab_size),
            other => bail!("unknown model size {other:?} (expected tiny, small or paper)"),
        };
        set(&mut cfg.init_range, &self.model.init_range);
        Ok(cfg)
    }

    pub fn supervised(&self) -> SupervisedConfig {
        let s = &self.supervised;
        let mut cfg = SupervisedConfig::default();
        set(&mut cfg.batch_size, &s.batch_size);
        set(&mut cfg.lr, &s.lr);
        set(&mut cfg.momentum, &s.momentum);
        set(&mut cfg.clip, &s.clip);
        set(&mut cfg.epochs, &s.epochs);
        set(&mut cfg.anneal, &s.anneal);
        set(&mut cfg.alpha, &s.alpha);
        cfg
    }

    pub fn rl(&self) -> RlConfig {
        let s = &self.rl;
        let e = self.engine();
        let mut cfg = RlConfig {
            max_turns: e.max_turns,
            max_turn_tokens: e.max_turn_tokens,
            ..RlConfig::default()
        };
        set(&mut cfg.lr, &s.lr);
        set(&mut cfg.clip, &s.clip);
        set(&mut cfg.gamma, &s.gamma);
        set(&mut cfg.interleave, &s.interleave);
        set(&mut cfg.sup_lr, &s.sup_lr);
        set(&mut cfg.sup_clip, &s.sup_clip);
        set(&mut cfg.sup_batch, &s.sup_batch);
        set(&mut cfg.sup_alpha, &s.sup_alpha);
        set(&mut cfg.temperature, &s.temperature);
        set(&mut cfg.episodes, &s.episodes);
        cfg
    }

    pub fn engine(&self) -> EngineConfig {
        let s = &self.engine;
        let mut cfg = EngineConfig::default();
        set(&mut cfg.max_turns, &s.max_turns);
        set(&mut cfg.max_turn_tokens, &s.max_turn_tokens);
        set(&mut cfg.temperature, &s.temperature);
        cfg
    }

    pub fn synth(&self) -> SynthStyle {
        let mut style = SynthStyle::default();
        set(&mut style.max_offers, &self.synth.max_offers);
        set(&mut style.accept_noise, &self.synth.accept_noise);
        style
    }
}
