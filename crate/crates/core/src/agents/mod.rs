//! Negotiating agents and the turn-taking dialogue engine.
//!
//! An agent reads the dialogue from its own side: its words follow
//! `write:` and the partner's follow `read:`. Whoever speaks first opens
//! with a forced `write:`; every turn after that ends with a sampled
//! `read:` (handing over) or `<choose>` (ending the dialogue). The partner
//! sees the same tokens with the two markers swapped.

mod engine;
pub mod toy;

pub use engine::{run_dialogue, EngineConfig, OwnedToken, Transcript};

use rand::Rng;

use crate::corpus::{pool_of, valuation_of, TokenId};
use crate::env::{enumerate_allocations, score, Allocation, ItemPool, Selection, Valuation, NUM_ITEMS};
use crate::model::{
    sample_token, temperature_probs, ModelError, ModelState, NegotiationModel, NUM_OUTPUTS,
};

/// What a dialogue agent needs from a model: incremental reading, next-token
/// scores and end-of-dialogue output distributions.
pub trait DialogueModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    fn start(&self, goal: &[u32; NUM_OUTPUTS]) -> Result<Self::State, ModelError>;
    fn observe(&self, state: &mut Self::State, token: TokenId) -> Result<(), ModelError>;
    fn next_logits(&self, state: &Self::State) -> Vec<f64>;
    /// One distribution per output position; class `i` is a count of `i`
    /// and the last class is no-agreement.
    fn choice_probs(&self, state: &Self::State) -> Result<[Vec<f64>; NUM_OUTPUTS], ModelError>;
}

impl DialogueModel for NegotiationModel {
    type State = ModelState;

    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn start(&self, goal: &[u32; NUM_OUTPUTS]) -> Result<ModelState, ModelError> {
        NegotiationModel::start(self, goal)
    }

    fn observe(&self, state: &mut ModelState, token: TokenId) -> Result<(), ModelError> {
        self.push(state, token)
    }

    fn next_logits(&self, state: &ModelState) -> Vec<f64> {
        NegotiationModel::next_logits(self, state)
    }

    fn choice_probs(&self, state: &ModelState) -> Result<[Vec<f64>; NUM_OUTPUTS], ModelError> {
        Ok(self.predict_choice(state)?.probs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutConfig {
    /// Candidate turns sampled per decision.
    pub candidates: usize,
    /// Simulated continuations per candidate.
    pub samples: usize,
    /// Token cap on one simulated continuation.
    pub max_rollout_tokens: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            candidates: 10,
            samples: 5,
            max_rollout_tokens: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Sample each turn from the model.
    Likelihood,
    /// Sample candidate turns and keep the one with the best simulated outcome.
    Rollout(RolloutConfig),
}

impl std::str::FromStr for Policy {
    type Err = String;

    /// `likelihood`, `rollout` or `rollout:C,S`.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "likelihood" => Ok(Policy::Likelihood),
            "rollout" => Ok(Policy::Rollout(RolloutConfig::default())),
            _ => {
                let spec = s
                    .strip_prefix("rollout:")
                    .ok_or_else(|| format!("unknown policy {s:?}"))?;
                let (c, n) = spec
                    .split_once(',')
                    .ok_or_else(|| format!("expected rollout:C,S, got {s:?}"))?;
                let candidates: usize = c.trim().parse().map_err(|_| format!("bad C in {s:?}"))?;
                let samples: usize = n.trim().parse().map_err(|_| format!("bad S in {s:?}"))?;
                if candidates == 0 || samples == 0 {
                    return Err("rollout C and S must be at least 1".into());
                }
                Ok(Policy::Rollout(RolloutConfig {
                    candidates,
                    samples,
                    ..RolloutConfig::default()
                }))
            }
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Likelihood => f.write_str("likelihood"),
            Policy::Rollout(c) => write!(f, "rollout:{},{}", c.candidates, c.samples),
        }
    }
}

/// The best feasible division under the product of per-position
/// probabilities, with its joint probability. No-agreement wins only when
/// its joint probability beats every feasible division; ties go to the
/// first division in enumeration order.
pub fn choose_from(probs: &[Vec<f64>; NUM_OUTPUTS], pool: &ItemPool) -> (Selection, f64) {
    let p = |pos: usize, class: usize| probs[pos].get(class).copied().unwrap_or(0.0);
    let mut best: Option<(Allocation, f64)> = None;
    for own in enumerate_allocations(pool) {
        let other = pool.complement(&own).expect("enumerated allocations are feasible");
        let mut joint = 1.0;
        for i in 0..NUM_ITEMS {
            joint *= p(i, own.take[i] as usize) * p(NUM_ITEMS + i, other.take[i] as usize);
        }
        if best.map_or(true, |(_, b)| joint > b) {
            best = Some((own, joint));
        }
    }
    let na: f64 = (0..NUM_OUTPUTS)
        .map(|i| probs[i].last().copied().unwrap_or(0.0))
        .product();
    match best {
        Some((own, joint)) if na <= joint => (Selection::Claim(own), joint),
        _ => (Selection::NoAgreement, na),
    }
}

/// Forced and sampled tokens of one turn, in the speaker's own view.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Turn {
    pub tokens: Vec<TokenId>,
    /// Whether each token was drawn from the policy (as opposed to forced
    /// by the engine).
    pub sampled: Vec<bool>,
}

impl Turn {
    pub fn ends_dialogue(&self) -> bool {
        self.tokens.last() == Some(&TokenId::CHOOSE)
    }

    fn push(&mut self, t: TokenId, sampled: bool) {
        self.tokens.push(t);
        self.sampled.push(sampled);
    }
}

/// One side of a dialogue in progress.
#[derive(Debug, Clone)]
pub struct AgentSession<'m, M: DialogueModel> {
    model: &'m M,
    goal: [u32; NUM_OUTPUTS],
    state: M::State,
    history: Vec<TokenId>,
    policy: Policy,
    temperature: f64,
    max_turn_tokens: usize,
}

/// Mask applied while sampling inside an agent's own turn: it may not open
/// another turn for itself.
fn sample_own<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> TokenId {
    let mut probs = temperature_probs(logits, temperature);
    let w = TokenId::WRITE.index();
    if probs.len() > w && probs[w] < 1.0 {
        probs[w] = 0.0;
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
    }
    TokenId(sample_token(&probs, rng) as u32)
}

impl<'m, M: DialogueModel> AgentSession<'m, M> {
    pub fn new(
        model: &'m M,
        goal: [u32; NUM_OUTPUTS],
        policy: Policy,
        temperature: f64,
        max_turn_tokens: usize,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            model,
            state: model.start(&goal)?,
            goal,
            history: Vec::new(),
            policy,
            temperature,
            max_turn_tokens,
        })
    }

    pub fn goal(&self) -> &[u32; NUM_OUTPUTS] {
        &self.goal
    }

    pub fn pool(&self) -> ItemPool {
        pool_of(&self.goal)
    }

    pub fn valuation(&self) -> Valuation {
        valuation_of(&self.goal)
    }

    pub fn history(&self) -> &[TokenId] {
        &self.history
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn model(&self) -> &'m M {
        self.model
    }

    /// Reads tokens produced by the partner, already in this agent's view.
    pub fn observe(&mut self, tokens: &[TokenId]) -> Result<(), ModelError> {
        for &t in tokens {
            self.model.observe(&mut self.state, t)?;
            self.history.push(t);
        }
        Ok(())
    }

    /// Produces and records this agent's next turn.
    pub fn write_turn<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Turn, ModelError> {
        match self.policy {
            Policy::Likelihood => self.write_turn_likelihood(rng),
            Policy::Rollout(cfg) => self.write_turn_rollout(&cfg, rng),
        }
    }

    fn sample_turn<R: Rng + ?Sized>(
        &self,
        state: &mut M::State,
        rng: &mut R,
    ) -> Result<Turn, ModelError> {
        let mut turn = Turn::default();
        if self.history.is_empty() {
            self.model.observe(state, TokenId::WRITE)?;
            turn.push(TokenId::WRITE, false);
        }
        for _ in 0..self.max_turn_tokens {
            let t = sample_own(&self.model.next_logits(state), self.temperature, rng);
            self.model.observe(state, t)?;
            turn.push(t, true);
            if t == TokenId::READ || t == TokenId::CHOOSE {
                return Ok(turn);
            }
        }
        self.model.observe(state, TokenId::READ)?;
        turn.push(TokenId::READ, false);
        Ok(turn)
    }

    fn commit(&mut self, turn: &Turn, state: M::State) {
        self.state = state;
        self.history.extend_from_slice(&turn.tokens);
    }

    pub fn write_turn_likelihood<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Turn, ModelError> {
        let mut st = self.state.clone();
        let turn = self.sample_turn(&mut st, rng)?;
        self.commit(&turn, st);
        Ok(turn)
    }

    /// Samples `cfg.candidates` turns, scores each by simulated
    /// continuations and keeps the best-scoring one.
    pub fn write_turn_rollout<R: Rng + ?Sized>(
        &mut self,
        cfg: &RolloutConfig,
        rng: &mut R,
    ) -> Result<Turn, ModelError> {
        if cfg.candidates <= 1 {
            return self.write_turn_likelihood(rng);
        }
        let mut best: Option<(f64, Turn, M::State)> = None;
        for _ in 0..cfg.candidates {
            let mut st = self.state.clone();
            let turn = self.sample_turn(&mut st, rng)?;
            let value = if turn.ends_dialogue() {
                self.outcome_value(&st)?
            } else {
                self.estimate_value(&st, cfg.samples, cfg.max_rollout_tokens, rng)?
            };
            if best.as_ref().map_or(true, |(b, _, _)| value > *b) {
                best = Some((value, turn, st));
            }
        }
        let (_, turn, st) = best.expect("at least one candidate");
        self.commit(&turn, st);
        Ok(turn)
    }

    /// `r(o) · p(o)` for the division this agent would choose now.
    pub fn outcome_value(&self, state: &M::State) -> Result<f64, ModelError> {
        let probs = self.model.choice_probs(state)?;
        let (sel, p) = choose_from(&probs, &self.pool());
        Ok(match sel {
            Selection::Claim(own) => score(&self.valuation(), &own) as f64 * p,
            Selection::NoAgreement => 0.0,
        })
    }

    /// Mean of `r(o) · p(o)` over `samples` continuations from `state`,
    /// each sampled (both sides, by this agent's model) until `<choose>`.
    /// Continuations that hit the token cap score zero.
    pub fn estimate_value<R: Rng + ?Sized>(
        &self,
        state: &M::State,
        samples: usize,
        max_tokens: usize,
        rng: &mut R,
    ) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for _ in 0..samples {
            let mut st = state.clone();
            let mut finished = false;
            for _ in 0..max_tokens {
                let probs = temperature_probs(&self.model.next_logits(&st), self.temperature);
                let t = TokenId(sample_token(&probs, rng) as u32);
                self.model.observe(&mut st, t)?;
                if t == TokenId::CHOOSE {
                    finished = true;
                    break;
                }
            }
            if finished {
                total += self.outcome_value(&st)?;
            }
        }
        Ok(total / samples.max(1) as f64)
    }

    /// The agent's final division given everything read so far.
    pub fn choose(&self) -> Result<Selection, ModelError> {
        let probs = self.model.choice_probs(&self.state)?;
        Ok(choose_from(&probs, &self.pool()).0)
    }

    pub fn state(&self) -> &M::State {
        &self.state
    }
}

#[cfg(test)]
mod tests;
