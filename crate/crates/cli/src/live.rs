//! A negotiation between a human (side A, speaking first) and a loaded
//! agent (side B), driven one message at a time.

use std::time::{Duration, Instant};

use negotiator::agents::{AgentSession, DialogueModel, EngineConfig, Policy};
use negotiator::corpus::{goal_of, CorpusError, TokenId, Vocabulary, CHOOSE, SPECIALS};
use negotiator::env::{resolve, DealOutcome, Scenario, Selection, NUM_ITEMS};
use negotiator::model::{ModelError, NegotiationModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

/// Longest human message, in tokens.
pub const MAX_MESSAGE_TOKENS: usize = 100;
/// Sessions left untouched this long are closed without agreement.
pub const IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    HumanTurn,
    AgentTurn,
    AwaitingSelections,
    Done,
}

impl SessionState {
    /// Whether the state machine may move from `self` to `next`.
    pub fn allows(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (HumanTurn, AgentTurn)
                | (AgentTurn, HumanTurn)
                | (HumanTurn | AgentTurn, AwaitingSelections)
                | (HumanTurn | AgentTurn | AwaitingSelections, Done)
        )
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("selection required")]
    SelectionRequired,
    #[error("session finished")]
    Finished,
    #[error("not accepting selections yet")]
    NotAwaitingSelection,
    #[error("empty message")]
    EmptyMessage,
    #[error("message has {0} tokens, limit is {MAX_MESSAGE_TOKENS}")]
    MessageTooLong(usize),
    #[error("infeasible selection: {}", .0.join("; "))]
    Infeasible(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl SessionError {
    /// Short machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            SessionError::SelectionRequired => "selection_required",
            SessionError::Finished => "session_finished",
            SessionError::NotAwaitingSelection => "wrong_state",
            SessionError::EmptyMessage => "empty_message",
            SessionError::MessageTooLong(_) => "message_too_long",
            SessionError::Infeasible(_) => "infeasible_selection",
            SessionError::Model(_) | SessionError::Corpus(_) => "model_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub speaker: Role,
    pub text: String,
}

/// What the human may see once the session is over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutcomeView {
    pub agreed: bool,
    pub reward_human: u32,
    pub reward_agent: u32,
    pub agent_values: [u32; NUM_ITEMS],
    pub pareto: Option<bool>,
    pub human_take: Option<[u32; NUM_ITEMS]>,
    pub agent_take: Option<[u32; NUM_ITEMS]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionView {
    pub id: String,
    pub pool: [u32; NUM_ITEMS],
    pub values: [u32; NUM_ITEMS],
    pub messages: Vec<Event>,
    pub state: SessionState,
    pub turns: usize,
    pub outcome: Option<OutcomeView>,
}

pub struct LiveSession<'m, M: DialogueModel = NegotiationModel> {
    id: String,
    scenario: Scenario,
    agent: AgentSession<'m, M>,
    vocab: &'m Vocabulary,
    messages: Vec<Event>,
    state: SessionState,
    transitions: Vec<(SessionState, SessionState)>,
    turns: usize,
    max_turns: usize,
    rng: ChaCha8Rng,
    last_active: Instant,
    outcome: Option<OutcomeView>,
}

impl<'m, M: DialogueModel> LiveSession<'m, M> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: String,
        model: &'m M,
        vocab: &'m Vocabulary,
        scenario: Scenario,
        policy: Policy,
        engine: &EngineConfig,
        seed: u64,
        now: Instant,
    ) -> Result<Self, SessionError> {
        let agent = engine.session(model, goal_of(&scenario.pool, &scenario.valuation_b), policy)?;
        Ok(Self {
            id,
            scenario,
            agent,
            vocab,
            messages: Vec::new(),
            state: SessionState::HumanTurn,
            transitions: Vec::new(),
            turns: 0,
            max_turns: engine.max_turns,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_active: now,
            outcome: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Every state change so far, in order.
    pub fn transitions(&self) -> &[(SessionState, SessionState)] {
        &self.transitions
    }

    pub fn last_active(&self) -> Instant {
        self.last_active
    }

    /// The human's view. The agent's values appear only in the outcome.
    pub fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            pool: self.scenario.pool.counts,
            values: self.scenario.valuation_a.values,
            messages: self.messages.clone(),
            state: self.state,
            turns: self.turns,
            outcome: self.outcome.clone(),
        }
    }

    pub fn outcome(&self) -> Option<&OutcomeView> {
        self.outcome.as_ref()
    }

    fn set_state(&mut self, next: SessionState) {
        debug_assert!(self.state.allows(next), "{:?} -> {:?}", self.state, next);
        self.transitions.push((self.state, next));
        self.state = next;
    }

    fn finish(&mut self, human: Selection, agent: Selection) {
        let s = &self.scenario;
        let out = resolve(&s.pool, &human, &agent, &s.valuation_a, &s.valuation_b);
        self.outcome = Some(outcome_view(&out, s, human, agent));
        self.set_state(SessionState::Done);
    }

    /// Closes the session without agreement if it sat idle too long.
    /// Returns whether it did.
    pub fn expire_if_idle(&mut self, now: Instant) -> bool {
        if self.state != SessionState::Done && now.duration_since(self.last_active) > IDLE_TIMEOUT {
            self.finish(Selection::NoAgreement, Selection::NoAgreement);
            return true;
        }
        false
    }

    fn touch(&mut self, now: Instant) {
        self.expire_if_idle(now);
        self.last_active = now;
    }

    /// Normalizes human text into dialogue tokens: lowercase, split on
    /// whitespace, unknown words (and stray markers) become `<unk>`. A
    /// final `<choose>` is kept as the decision signal.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, SessionError> {
        let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        if words.is_empty() {
            return Err(SessionError::EmptyMessage);
        }
        if words.len() > MAX_MESSAGE_TOKENS {
            return Err(SessionError::MessageTooLong(words.len()));
        }
        let last = words.len() - 1;
        Ok(words
            .iter()
            .enumerate()
            .map(|(i, w)| match self.vocab.id(w) {
                TokenId::CHOOSE if i == last => TokenId::CHOOSE,
                t if t.index() < SPECIALS.len() => TokenId::UNK,
                t => t,
            })
            .collect())
    }

    /// Feeds a human turn to the agent and lets the agent reply. Returns
    /// the agent's events.
    pub fn post_message(&mut self, text: &str, now: Instant) -> Result<Vec<Event>, SessionError> {
        self.touch(now);
        match self.state {
            SessionState::HumanTurn => {}
            SessionState::AwaitingSelections => return Err(SessionError::SelectionRequired),
            _ => return Err(SessionError::Finished),
        }
        let mut words = self.tokenize(text)?;
        let chose = words.last() == Some(&TokenId::CHOOSE);
        if chose {
            words.pop();
        }

        // Human turn in the agent's view: partner words follow `read:`,
        // and handing over shows up as `write:`.
        let mut seen = Vec::with_capacity(words.len() + 2);
        if self.agent.history().is_empty() {
            seen.push(TokenId::READ);
        }
        seen.extend_from_slice(&words);
        seen.push(if chose { TokenId::CHOOSE } else { TokenId::WRITE });
        self.agent.observe(&seen)?;
        self.turns += 1;
        if !words.is_empty() {
            self.messages.push(Event {
                speaker: Role::Human,
                text: self.vocab.decode(&words)?.join(" "),
            });
        }
        if chose {
            self.messages.push(choose_event(Role::Human));
            self.set_state(SessionState::AwaitingSelections);
            return Ok(Vec::new());
        }
        if self.turns >= self.max_turns {
            self.finish(Selection::NoAgreement, Selection::NoAgreement);
            return Ok(Vec::new());
        }

        self.set_state(SessionState::AgentTurn);
        let turn = self.agent.write_turn(&mut self.rng)?;
        self.turns += 1;
        let said: Vec<TokenId> = turn
            .tokens
            .iter()
            .copied()
            .filter(|t| !t.is_marker() && *t != TokenId::CHOOSE)
            .collect();
        let mut events = Vec::new();
        if !said.is_empty() {
            events.push(Event {
                speaker: Role::Agent,
                text: self.vocab.decode(&said)?.join(" "),
            });
        }
        if turn.ends_dialogue() {
            events.push(choose_event(Role::Agent));
            self.messages.extend(events.iter().cloned());
            self.set_state(SessionState::AwaitingSelections);
        } else {
            self.messages.extend(events.iter().cloned());
            if self.turns >= self.max_turns {
                self.finish(Selection::NoAgreement, Selection::NoAgreement);
            } else {
                self.set_state(SessionState::HumanTurn);
            }
        }
        Ok(events)
    }

    /// Settles the dialogue once the human names their division.
    pub fn post_selection(&mut self, take: Selection, now: Instant) -> Result<OutcomeView, SessionError> {
        self.touch(now);
        match self.state {
            SessionState::AwaitingSelections => {}
            SessionState::Done => return Err(SessionError::Finished),
            _ => return Err(SessionError::NotAwaitingSelection),
        }
        if let Selection::Claim(a) = take {
            let problems: Vec<String> = ["books", "hats", "balls"]
                .iter()
                .zip(a.take.iter().zip(self.scenario.pool.counts))
                .filter(|(_, (t, c))| **t > *c)
                .map(|(name, (t, c))| format!("{name}: claimed {t}, pool has {c}"))
                .collect();
            if !problems.is_empty() {
                return Err(SessionError::Infeasible(problems));
            }
        }
        let agent = self.agent.choose()?;
        self.finish(take, agent);
        Ok(self.outcome.clone().expect("finished sessions have an outcome"))
    }
}

fn choose_event(speaker: Role) -> Event {
    Event {
        speaker,
        text: CHOOSE.to_string(),
    }
}

fn outcome_view(out: &DealOutcome, s: &Scenario, human: Selection, agent: Selection) -> OutcomeView {
    let take = |sel: Selection| match sel {
        Selection::Claim(a) => Some(a.take),
        Selection::NoAgreement => None,
    };
    OutcomeView {
        agreed: out.agreed,
        reward_human: out.reward_a,
        reward_agent: out.reward_b,
        agent_values: s.valuation_b.values,
        pareto: out.pareto_optimal,
        human_take: take(human),
        agent_take: take(agent),
    }
}
