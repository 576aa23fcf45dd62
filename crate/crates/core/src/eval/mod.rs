//! Tournaments between agent pairings and corpus statistics.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agents::{run_dialogue, DialogueModel, EngineConfig, Policy, Transcript};
use crate::corpus::{goal_of, DialogueRecord, Speaker, TokenId, CHOOSE};
use crate::env::{resolve, Scenario};
use crate::model::{EncodedExample, ModelError, NegotiationModel};
use crate::train::{perplexity, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("no {0} to evaluate")]
    Empty(&'static str),
}

/// Exact counters for one side of a set of dialogues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub dialogues: u64,
    pub agreed: u64,
    pub pareto: u64,
    pub points_a: u64,
    pub points_b: u64,
    pub message_turns: u64,
    pub words: u64,
}

impl Tally {
    /// Records one dialogue. `points` are (first policy, second policy).
    pub fn add(&mut self, points: (u32, u32), agreed: bool, pareto: Option<bool>, turn_words: &[usize]) {
        self.dialogues += 1;
        if agreed {
            self.agreed += 1;
            self.points_a += points.0 as u64;
            self.points_b += points.1 as u64;
            if pareto == Some(true) {
                self.pareto += 1;
            }
        }
        self.message_turns += turn_words.len() as u64;
        self.words += turn_words.iter().sum::<usize>() as u64;
    }

    pub fn report(&self) -> MetricsReport {
        let n = self.dialogues as f64;
        let per = |x: u64, d: u64| if d == 0 { 0.0 } else { x as f64 / d as f64 };
        MetricsReport {
            n_dialogues: self.dialogues as usize,
            score_all_a: per(self.points_a, self.dialogues),
            score_all_b: per(self.points_b, self.dialogues),
            score_agreed_a: (self.agreed > 0).then(|| per(self.points_a, self.agreed)),
            score_agreed_b: (self.agreed > 0).then(|| per(self.points_b, self.agreed)),
            pct_agreed: if n == 0.0 { 0.0 } else { 100.0 * self.agreed as f64 / n },
            pct_pareto: (self.agreed > 0).then(|| 100.0 * per(self.pareto, self.agreed)),
            avg_turns: per(self.message_turns, self.dialogues),
            avg_words_per_turn: per(self.words, self.message_turns),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n_dialogues: usize,
    /// Mean points per dialogue, failed negotiations counting zero.
    pub score_all_a: f64,
    pub score_all_b: f64,
    /// Mean points over agreed dialogues.
    pub score_agreed_a: Option<f64>,
    pub score_agreed_b: Option<f64>,
    pub pct_agreed: f64,
    /// Share of agreed deals that are Pareto optimal.
    pub pct_pareto: Option<f64>,
    pub avg_turns: f64,
    pub avg_words_per_turn: f64,
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

impl MetricsReport {
    pub const TABLE_HEADER: &'static str = "model                vs                   score(all)      score(agreed)   agreed%  pareto%";

    pub fn table_row(&self, name_a: &str, name_b: &str) -> String {
        format!(
            "{:<20} {:<20} {:>5.2} vs {:<5.2} {:>5} vs {:<5} {:>7.1}  {:>7}",
            name_a,
            name_b,
            self.score_all_a,
            self.score_all_b,
            opt(self.score_agreed_a, 2),
            opt(self.score_agreed_b, 2),
            self.pct_agreed,
            opt(self.pct_pareto, 1),
        )
    }

    /// One `key=value` pair per line.
    pub fn to_kv(&self) -> String {
        format!(
            "n_dialogues={}\nscore_all_a={:.4}\nscore_all_b={:.4}\nscore_agreed_a={}\nscore_agreed_b={}\npct_agreed={:.4}\npct_pareto={}\navg_turns={:.4}\navg_words_per_turn={:.4}\n",
            self.n_dialogues,
            self.score_all_a,
            self.score_all_b,
            opt(self.score_agreed_a, 4),
            opt(self.score_agreed_b, 4),
            self.pct_agreed,
            opt(self.pct_pareto, 4),
            self.avg_turns,
            self.avg_words_per_turn,
        )
    }
}

/// Word counts of the turns that carry a message (a bare `<choose>` is a
/// decision, not a message).
pub fn transcript_turn_words(t: &Transcript) -> Vec<usize> {
    let mut out = Vec::new();
    let mut current: Option<(Speaker, usize)> = None;
    for tok in &t.tokens {
        let w = is_word(tok.token) as usize;
        current = match current {
            Some((owner, n)) if owner == tok.owner => Some((owner, n + w)),
            prev => {
                out.extend(prev.map(|(_, n)| n).filter(|&n| n > 0));
                Some((tok.owner, w))
            }
        };
    }
    out.extend(current.map(|(_, n)| n).filter(|&n| n > 0));
    out
}

fn is_word(t: TokenId) -> bool {
    !t.is_marker() && t != TokenId::CHOOSE
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub engine: EngineConfig,
    /// Play each scenario a second time with sides and speaking order
    /// exchanged.
    pub role_swap: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            role_swap: true,
            seed: 0,
        }
    }
}

/// A dialogue from a tournament, with the side the first policy played.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayedDialogue {
    pub transcript: Transcript,
    pub first_policy_side: Speaker,
}

/// Plays `first` against `second` on every scenario. In the plain game
/// `first` holds side A's valuation and opens; with role swapping each
/// scenario is replayed with `second` holding A's valuation and opening.
/// Dialogue `k` draws from its own stream of the seeded generator.
pub fn evaluate_pairing<MA, MB>(
    first: (&MA, Policy),
    second: (&MB, Policy),
    scenarios: &[Scenario],
    cfg: &EvalConfig,
) -> Result<(MetricsReport, Vec<PlayedDialogue>), EvalError>
where
    MA: DialogueModel,
    MB: DialogueModel,
{
    if scenarios.is_empty() {
        return Err(EvalError::Empty("scenarios"));
    }
    let mut tally = Tally::default();
    let mut played = Vec::new();
    let mut stream = 0u64;
    let mut next_rng = || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        stream += 1;
        rng
    };
    for s in scenarios {
        let ga = goal_of(&s.pool, &s.valuation_a);
        let gb = goal_of(&s.pool, &s.valuation_b);
        {
            let mut a = cfg.engine.session(first.0, ga, first.1)?;
            let mut b = cfg.engine.session(second.0, gb, second.1)?;
            let t = run_dialogue(&mut a, &mut b, s, Speaker::A, cfg.engine.max_turns, &mut next_rng())?;
            tally.add(
                (t.outcome.reward_a, t.outcome.reward_b),
                t.outcome.agreed,
                t.outcome.pareto_optimal,
                &transcript_turn_words(&t),
            );
            played.push(PlayedDialogue {
                transcript: t,
                first_policy_side: Speaker::A,
            });
        }
        if cfg.role_swap {
            let mut a = cfg.engine.session(second.0, ga, second.1)?;
            let mut b = cfg.engine.session(first.0, gb, first.1)?;
            let t = run_dialogue(&mut a, &mut b, s, Speaker::A, cfg.engine.max_turns, &mut next_rng())?;
            tally.add(
                (t.outcome.reward_b, t.outcome.reward_a),
                t.outcome.agreed,
                t.outcome.pareto_optimal,
                &transcript_turn_words(&t),
            );
            played.push(PlayedDialogue {
                transcript: t,
                first_policy_side: Speaker::B,
            });
        }
    }
    Ok((tally.report(), played))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub avg_turns: f64,
    pub avg_words_per_turn: f64,
    pub pct_agreed: f64,
    /// Mean points per agent over agreed dialogues.
    pub avg_score: Option<f64>,
    /// Share of agreed dialogues that are Pareto optimal.
    pub pct_pareto: Option<f64>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dialogues={}", self.dialogues)?;
        writeln!(f, "avg_turns={:.2}", self.avg_turns)?;
        writeln!(f, "avg_words_per_turn={:.2}", self.avg_words_per_turn)?;
        writeln!(f, "pct_agreed={:.2}", self.pct_agreed)?;
        writeln!(f, "avg_score={}", opt(self.avg_score, 2))?;
        writeln!(f, "pct_pareto={}", opt(self.pct_pareto, 2))
    }
}

pub fn corpus_stats(records: &[DialogueRecord]) -> Result<CorpusStats, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("dialogues"));
    }
    let mut tally = Tally::default();
    for r in records {
        let s = &r.scenario;
        let out = resolve(&s.pool, &r.selection_a, &r.selection_b, &s.valuation_a, &s.valuation_b);
        let words: Vec<usize> = r
            .turns
            .iter()
            .map(|(_, ws)| ws.iter().filter(|w| w.as_str() != CHOOSE).count())
            .filter(|&n| n > 0)
            .collect();
        tally.add((out.reward_a, out.reward_b), out.agreed, out.pareto_optimal, &words);
    }
    let rep = tally.report();
    Ok(CorpusStats {
        dialogues: rep.n_dialogues,
        avg_turns: rep.avg_turns,
        avg_words_per_turn: rep.avg_words_per_turn,
        pct_agreed: rep.pct_agreed,
        avg_score: (tally.agreed > 0)
            .then(|| (tally.points_a + tally.points_b) as f64 / (2 * tally.agreed) as f64),
        pct_pareto: rep.pct_pareto,
    })
}

/// Perplexity of `model` on each named split.
pub fn perplexity_report(
    model: &NegotiationModel,
    splits: &[(&str, &[EncodedExample])],
) -> Result<Vec<(String, f64)>, EvalError> {
    splits
        .iter()
        .map(|(name, data)| Ok((name.to_string(), perplexity(model, data)?)))
        .collect()
}
