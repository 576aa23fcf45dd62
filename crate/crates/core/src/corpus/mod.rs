//! Dialogue data: vocabulary, the two-perspective training representation,
//! the line-oriented record format and a synthetic scripted corpus.

mod synth;
mod vocab;

pub use synth::{synth_corpus, SynthStyle};
pub use vocab::{
    build_vocab, TokenId, Vocabulary, CHOOSE, NO_AGREEMENT, PAD, READ, SPECIALS, UNK, WRITE,
};

use std::fmt;

use thiserror::Error;

use crate::env::{resolve, ItemPool, Scenario, Selection, Valuation, NUM_ITEMS};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("record turns do not alternate speakers at turn {0}")]
    NonAlternating(usize),
    #[error("record has no turns")]
    EmptyDialogue,
    #[error("record format: {0}")]
    Format(String),
    #[error("token id {0} out of range for vocabulary of size {1}")]
    TokenOutOfRange(u32, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::A => "A",
            Speaker::B => "B",
        })
    }
}

/// A complete dialogue as collected. The final turn ends with `<choose>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueRecord {
    pub scenario: Scenario,
    pub turns: Vec<(Speaker, Vec<String>)>,
    pub selection_a: Selection,
    pub selection_b: Selection,
}

/// One agent's view of a dialogue.
///
/// `goal` and `partner_goal` are `count value` pairs per item type. The
/// dialogue holds words with `write:`/`read:` markers and a final
/// `<choose>`. `output` is this agent's take followed by the partner's
/// take, or `None` when there is nothing to train the output classifiers
/// against (no agreement, or conflicting selections).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub goal: [u32; 2 * NUM_ITEMS],
    pub dialogue: Vec<String>,
    pub output: Option<[u32; 2 * NUM_ITEMS]>,
    pub partner_goal: [u32; 2 * NUM_ITEMS],
}

pub fn goal_of(pool: &ItemPool, v: &Valuation) -> [u32; 2 * NUM_ITEMS] {
    let mut g = [0; 2 * NUM_ITEMS];
    for i in 0..NUM_ITEMS {
        g[2 * i] = pool.counts[i];
        g[2 * i + 1] = v.values[i];
    }
    g
}

pub fn pool_of(goal: &[u32; 2 * NUM_ITEMS]) -> ItemPool {
    ItemPool::new([goal[0], goal[2], goal[4]])
}

pub fn valuation_of(goal: &[u32; 2 * NUM_ITEMS]) -> Valuation {
    Valuation::new([goal[1], goal[3], goal[5]])
}

impl TrainingExample {
    pub fn trainable_output(&self) -> bool {
        self.output.is_some()
    }

    pub fn pool(&self) -> ItemPool {
        pool_of(&self.goal)
    }

    /// The scenario with this example's agent as side A.
    pub fn scenario(&self) -> Scenario {
        Scenario::new(self.pool(), valuation_of(&self.goal), valuation_of(&self.partner_goal))
    }

    /// The partner's perspective of the same dialogue.
    pub fn mirrored(&self) -> TrainingExample {
        TrainingExample {
            goal: self.partner_goal,
            dialogue: self
                .dialogue
                .iter()
                .map(|w| match w.as_str() {
                    WRITE => READ.to_string(),
                    READ => WRITE.to_string(),
                    _ => w.clone(),
                })
                .collect(),
            output: self.output.map(|o| [o[3], o[4], o[5], o[0], o[1], o[2]]),
            partner_goal: self.goal,
        }
    }
}

impl DialogueRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.turns.is_empty() {
            return Err(CorpusError::EmptyDialogue);
        }
        for (i, w) in self.turns.windows(2).enumerate() {
            if w[0].0 == w[1].0 {
                return Err(CorpusError::NonAlternating(i + 1));
            }
        }
        let last = &self.turns[self.turns.len() - 1].1;
        if last.last().map(String::as_str) != Some(CHOOSE) {
            return Err(CorpusError::Format("final turn must end with <choose>".into()));
        }
        let chooses = self
            .turns
            .iter()
            .flat_map(|(_, ws)| ws.iter())
            .filter(|w| w.as_str() == CHOOSE)
            .count();
        if chooses != 1 {
            return Err(CorpusError::Format("<choose> must appear exactly once".into()));
        }
        Ok(())
    }

    pub fn agreed(&self) -> bool {
        let s = &self.scenario;
        resolve(
            &s.pool,
            &self.selection_a,
            &self.selection_b,
            &s.valuation_a,
            &s.valuation_b,
        )
        .agreed
    }

    fn dialogue_for(&self, who: Speaker) -> Vec<String> {
        let mut out = Vec::new();
        for (speaker, words) in &self.turns {
            out.push(if *speaker == who { WRITE } else { READ }.to_string());
            out.extend(words.iter().cloned());
        }
        out
    }

    /// Rebuilds a record from side A's perspective.
    pub fn from_perspective(ex: &TrainingExample) -> Result<DialogueRecord, CorpusError> {
        let mut turns: Vec<(Speaker, Vec<String>)> = Vec::new();
        for w in &ex.dialogue {
            match w.as_str() {
                WRITE => turns.push((Speaker::A, Vec::new())),
                READ => turns.push((Speaker::B, Vec::new())),
                _ => match turns.last_mut() {
                    Some((_, ws)) => ws.push(w.clone()),
                    None => {
                        return Err(CorpusError::Format("dialogue must start with a marker".into()))
                    }
                },
            }
        }
        let (sel_a, sel_b) = match ex.output {
            Some(o) => (
                Selection::claim([o[0], o[1], o[2]]),
                Selection::claim([o[3], o[4], o[5]]),
            ),
            None => (Selection::NoAgreement, Selection::NoAgreement),
        };
        let rec = DialogueRecord {
            scenario: ex.scenario(),
            turns,
            selection_a: sel_a,
            selection_b: sel_b,
        };
        rec.validate()?;
        Ok(rec)
    }
}

/// Splits a record into the two agents' training examples.
pub fn to_perspectives(
    rec: &DialogueRecord,
) -> Result<(TrainingExample, TrainingExample), CorpusError> {
    rec.validate()?;
    let s = &rec.scenario;
    let output_a = if rec.agreed() {
        match (rec.selection_a, rec.selection_b) {
            (Selection::Claim(a), Selection::Claim(b)) => Some([
                a.take[0], a.take[1], a.take[2], b.take[0], b.take[1], b.take[2],
            ]),
            _ => None,
        }
    } else {
        None
    };
    let a = TrainingExample {
        goal: goal_of(&s.pool, &s.valuation_a),
        dialogue: rec.dialogue_for(Speaker::A),
        output: output_a,
        partner_goal: goal_of(&s.pool, &s.valuation_b),
    };
    let b = TrainingExample {
        goal: goal_of(&s.pool, &s.valuation_b),
        dialogue: rec.dialogue_for(Speaker::B),
        output: output_a.map(|o| [o[3], o[4], o[5], o[0], o[1], o[2]]),
        partner_goal: goal_of(&s.pool, &s.valuation_a),
    };
    Ok((a, b))
}

/// Both perspectives of every record, in order.
pub fn examples_of(records: &[DialogueRecord]) -> Result<Vec<TrainingExample>, CorpusError> {
    let mut out = Vec::with_capacity(2 * records.len());
    for r in records {
        let (a, b) = to_perspectives(r)?;
        out.push(a);
        out.push(b);
    }
    Ok(out)
}

fn join_ints(xs: &[u32]) -> String {
    xs.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

/// Canonical single-line form of a perspective.
pub fn format_record(ex: &TrainingExample) -> String {
    let output = match ex.output {
        Some(o) => join_ints(&o),
        None => vec![NO_AGREEMENT; 2 * NUM_ITEMS].join(" "),
    };
    format!(
        "<input> {} </input> <dialogue> {} </dialogue> <output> {} </output> <partner_input> {} </partner_input>",
        join_ints(&ex.goal),
        ex.dialogue.join(" "),
        output,
        join_ints(&ex.partner_goal),
    )
}

fn section<'a>(tokens: &'a [&'a str], open: &str, close: &str) -> Result<(&'a [&'a str], usize), CorpusError> {
    let start = tokens
        .iter()
        .position(|t| *t == open)
        .ok_or_else(|| CorpusError::Format(format!("missing {open}")))?;
    let len = tokens[start + 1..]
        .iter()
        .position(|t| *t == close)
        .ok_or_else(|| CorpusError::Format(format!("missing {close}")))?;
    Ok((&tokens[start + 1..start + 1 + len], start + len + 2))
}

fn parse_goal(fields: &[&str]) -> Result<[u32; 2 * NUM_ITEMS], CorpusError> {
    if fields.len() != 2 * NUM_ITEMS {
        return Err(CorpusError::Format(format!(
            "expected {} goal integers, found {}",
            2 * NUM_ITEMS,
            fields.len()
        )));
    }
    let mut g = [0; 2 * NUM_ITEMS];
    for (slot, f) in g.iter_mut().zip(fields) {
        *slot = f
            .parse()
            .map_err(|_| CorpusError::Format(format!("non-integer field {f:?}")))?;
    }
    Ok(g)
}

pub fn parse_record(line: &str) -> Result<TrainingExample, CorpusError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let (input, _) = section(&tokens, "<input>", "</input>")?;
    let (dialogue, _) = section(&tokens, "<dialogue>", "</dialogue>")?;
    let (output, _) = section(&tokens, "<output>", "</output>")?;
    let (partner, _) = section(&tokens, "<partner_input>", "</partner_input>")?;
    let goal = parse_goal(input)?;
    let partner_goal = parse_goal(partner)?;
    if output.len() != 2 * NUM_ITEMS {
        return Err(CorpusError::Format("output must have six fields".into()));
    }
    let output = if output.iter().all(|f| *f == NO_AGREEMENT) {
        None
    } else {
        let o = parse_goal(output)?;
        let pool = pool_of(&goal);
        for i in 0..NUM_ITEMS {
            if o[i] + o[i + NUM_ITEMS] != pool.counts[i] {
                return Err(CorpusError::Format(format!(
                    "output halves do not sum to the pool for item {i}"
                )));
            }
        }
        Some(o)
    };
    let dialogue: Vec<String> = dialogue.iter().map(|w| w.to_string()).collect();
    if !dialogue.first().is_some_and(|w| w == WRITE || w == READ)
        || dialogue.last().map(String::as_str) != Some(CHOOSE)
    {
        return Err(CorpusError::Format(
            "dialogue must start with a marker and end with <choose>".into(),
        ));
    }
    Ok(TrainingExample {
        goal,
        dialogue,
        output,
        partner_goal,
    })
}

pub fn parse_records(text: &str) -> Result<Vec<TrainingExample>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_record(l).map_err(|e| CorpusError::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Pairs the two perspectives of each dialogue back into records. Lines
/// are expected in consecutive perspective pairs, as written by
/// [`format_corpus`]; unpaired examples are rebuilt on their own.
pub fn records_from_examples(examples: &[TrainingExample]) -> Result<Vec<DialogueRecord>, CorpusError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < examples.len() {
        out.push(DialogueRecord::from_perspective(&examples[i])?);
        if i + 1 < examples.len() && examples[i + 1] == examples[i].mirrored() {
            i += 2;
        } else {
            i += 1;
        }
    }
    Ok(out)
}

/// Both perspectives of every record, one canonical line each.
pub fn format_corpus(records: &[DialogueRecord]) -> Result<String, CorpusError> {
    let mut s = String::new();
    for r in records {
        let (a, b) = to_perspectives(r)?;
        s.push_str(&format_record(&a));
        s.push('\n');
        s.push_str(&format_record(&b));
        s.push('\n');
    }
    Ok(s)
}

/// Reads the line format used by the publicly released human negotiation
/// data (`YOU:`/`THEM:` speaker tags, `<eos>` turn ends, `<selection>`,
/// `itemK=N` outputs) into canonical examples.
pub fn import_released_line(line: &str) -> Result<TrainingExample, CorpusError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let (input, _) = section(&tokens, "<input>", "</input>")?;
    let (dialogue, _) = section(&tokens, "<dialogue>", "</dialogue>")?;
    let (output, _) = section(&tokens, "<output>", "</output>")?;
    let (partner, _) = section(&tokens, "<partner_input>", "</partner_input>")?;
    let goal = parse_goal(input)?;
    let partner_goal = parse_goal(partner)?;
    let mut words = Vec::new();
    for t in dialogue {
        match *t {
            "YOU:" => words.push(WRITE.to_string()),
            "THEM:" => words.push(READ.to_string()),
            "<eos>" => {}
            "<selection>" => words.push(CHOOSE.to_string()),
            w => words.push(w.to_lowercase()),
        }
    }
    let mut o = [0u32; 2 * NUM_ITEMS];
    let mut agreed = output.len() == 2 * NUM_ITEMS;
    if agreed {
        for (slot, f) in o.iter_mut().zip(output) {
            match f.split_once('=').and_then(|(_, n)| n.parse().ok()) {
                Some(n) => *slot = n,
                None => agreed = false,
            }
        }
    }
    let pool = pool_of(&goal);
    let consistent = (0..NUM_ITEMS).all(|i| o[i] + o[i + NUM_ITEMS] == pool.counts[i]);
    Ok(TrainingExample {
        goal,
        dialogue: words,
        output: (agreed && consistent).then_some(o),
        partner_goal,
    })
}
