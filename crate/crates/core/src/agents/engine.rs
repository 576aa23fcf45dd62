use rand::Rng;

use super::{AgentSession, DialogueModel, Policy};
use crate::corpus::{format_record, goal_of, CorpusError, Speaker, TokenId, TrainingExample, Vocabulary};
use crate::env::{resolve, DealOutcome, Scenario, Selection, NUM_ITEMS};
use crate::model::{ModelError, NUM_OUTPUTS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Turns allowed before the dialogue is closed with no agreement.
    pub max_turns: usize,
    /// Tokens one turn may sample before it is closed with `read:`.
    pub max_turn_tokens: usize,
    pub temperature: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_turns: 20,
            max_turn_tokens: 100,
            temperature: 0.5,
        }
    }
}

impl EngineConfig {
    pub fn session<'m, M: DialogueModel>(
        &self,
        model: &'m M,
        goal: [u32; NUM_OUTPUTS],
        policy: Policy,
    ) -> Result<AgentSession<'m, M>, ModelError> {
        AgentSession::new(model, goal, policy, self.temperature, self.max_turn_tokens)
    }
}

/// A dialogue token in side A's view, tagged with who produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OwnedToken {
    pub token: TokenId,
    pub owner: Speaker,
    pub sampled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub scenario: Scenario,
    /// Side A's view of the dialogue.
    pub tokens: Vec<OwnedToken>,
    pub turns: usize,
    /// The turn cap ended the dialogue before `<choose>`.
    pub forced_end: bool,
    pub selection_a: Selection,
    pub selection_b: Selection,
    pub outcome: DealOutcome,
}

fn flip(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().map(|t| t.flipped()).collect()
}

impl Transcript {
    /// The dialogue as seen by `side`.
    pub fn view(&self, side: Speaker) -> Vec<TokenId> {
        let a: Vec<TokenId> = self.tokens.iter().map(|t| t.token).collect();
        match side {
            Speaker::A => a,
            Speaker::B => flip(&a),
        }
    }

    /// Positions of the tokens `side` sampled itself.
    pub fn sampled_positions(&self, side: Speaker) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.owner == side && t.sampled)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn reward(&self, side: Speaker) -> u32 {
        match side {
            Speaker::A => self.outcome.reward_a,
            Speaker::B => self.outcome.reward_b,
        }
    }

    fn example(&self, side: Speaker, vocab: &Vocabulary) -> Result<TrainingExample, CorpusError> {
        let s = match side {
            Speaker::A => self.scenario,
            Speaker::B => self.scenario.swapped(),
        };
        let (own, other) = match side {
            Speaker::A => (self.selection_a, self.selection_b),
            Speaker::B => (self.selection_b, self.selection_a),
        };
        let output = match (self.outcome.agreed, own, other) {
            (true, Selection::Claim(o), Selection::Claim(p)) => {
                let mut v = [0; NUM_OUTPUTS];
                v[..NUM_ITEMS].copy_from_slice(&o.take);
                v[NUM_ITEMS..].copy_from_slice(&p.take);
                Some(v)
            }
            _ => None,
        };
        Ok(TrainingExample {
            goal: goal_of(&s.pool, &s.valuation_a),
            dialogue: vocab.decode(&self.view(side))?,
            output,
            partner_goal: goal_of(&s.pool, &s.valuation_b),
        })
    }

    /// Both perspectives in corpus form followed by an outcome line.
    pub fn to_text(&self, vocab: &Vocabulary) -> Result<String, CorpusError> {
        let pareto = match self.outcome.pareto_optimal {
            Some(true) => "1",
            Some(false) => "0",
            None => "-",
        };
        Ok(format!(
            "{}\n{}\n#outcome agreed={} ra={} rb={} pareto={}\n",
            format_record(&self.example(Speaker::A, vocab)?),
            format_record(&self.example(Speaker::B, vocab)?),
            u8::from(self.outcome.agreed),
            self.outcome.reward_a,
            self.outcome.reward_b,
            pareto,
        ))
    }
}

/// Alternates turns between `a` and `b` until one of them emits
/// `<choose>` or `max_turns` turns have passed, then has both choose and
/// settles the scenario. `a` holds side A's valuation.
pub fn run_dialogue<MA, MB, R>(
    a: &mut AgentSession<'_, MA>,
    b: &mut AgentSession<'_, MB>,
    scenario: &Scenario,
    first: Speaker,
    max_turns: usize,
    rng: &mut R,
) -> Result<Transcript, ModelError>
where
    MA: DialogueModel,
    MB: DialogueModel,
    R: Rng + ?Sized,
{
    let mut tokens = Vec::new();
    let mut speaker = first;
    let mut turns = 0;
    let mut chose = false;
    while turns < max_turns {
        let turn = match speaker {
            Speaker::A => a.write_turn(rng)?,
            Speaker::B => b.write_turn(rng)?,
        };
        let flipped = flip(&turn.tokens);
        let in_a_view = match speaker {
            Speaker::A => {
                b.observe(&flipped)?;
                turn.tokens.clone()
            }
            Speaker::B => {
                a.observe(&flipped)?;
                flipped
            }
        };
        tokens.extend(in_a_view.iter().zip(&turn.sampled).map(|(&token, &sampled)| OwnedToken {
            token,
            owner: speaker,
            sampled,
        }));
        turns += 1;
        if turn.ends_dialogue() {
            chose = true;
            break;
        }
        speaker = speaker.other();
    }
    let (selection_a, selection_b) = if chose {
        (a.choose()?, b.choose()?)
    } else {
        (Selection::NoAgreement, Selection::NoAgreement)
    };
    let outcome = resolve(
        &scenario.pool,
        &selection_a,
        &selection_b,
        &scenario.valuation_a,
        &scenario.valuation_b,
    );
    Ok(Transcript {
        scenario: *scenario,
        tokens,
        turns,
        forced_end: !chose,
        selection_a,
        selection_b,
        outcome,
    })
}
