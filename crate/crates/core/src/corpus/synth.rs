//! Scripted template negotiators used to produce a small, learnable corpus.
//!
//! Each negotiator opens by claiming every item it values, then concedes
//! along a private aspiration schedule. An offer is accepted once the
//! complement is worth at least the current aspiration. Utterances are
//! drawn from a few fixed templates built around explicit item counts.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DialogueRecord, Speaker, CHOOSE};
use crate::env::{
    enumerate_allocations, sample_scenario, score, Allocation, GeneratorConfig, ItemPool,
    Selection, Valuation, NUM_ITEMS, TOTAL_VALUE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthStyle {
    pub generator: GeneratorConfig,
    /// Proposal turns before a negotiator gives up.
    pub max_offers: usize,
    /// Chance of accepting an offer one point below aspiration.
    pub accept_noise: f64,
    pub floors: Vec<u32>,
    pub steps: Vec<u32>,
}

impl Default for SynthStyle {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            max_offers: 8,
            accept_noise: 0.1,
            floors: vec![4, 5, 6],
            steps: vec![1, 2],
        }
    }
}

const QUANTITIES: [&str; 5] = ["zero", "one", "two", "three", "four"];
const SINGULAR: [&str; NUM_ITEMS] = ["book", "hat", "ball"];
const PLURAL: [&str; NUM_ITEMS] = ["books", "hats", "balls"];

const OPENERS: [&str; 5] = [
    "i want",
    "i need",
    "give me",
    "how about i get",
    "i would like",
];
const REJECTIONS: [&str; 3] = ["no ,", "sorry , i can not do that .", "that does not work for me ,"];
const ACCEPTS: [&str; 4] = ["ok deal", "deal", "that works for me , deal", "ok , deal"];
const GIVE_UP: &str = "i can not make a deal";

struct Negotiator {
    valuation: Valuation,
    floor: u32,
    step: u32,
    offers_made: u32,
}

impl Negotiator {
    fn aspiration(&self) -> u32 {
        TOTAL_VALUE
            .saturating_sub(self.step * self.offers_made)
            .max(self.floor)
    }

    /// Cheapest claim still meeting the aspiration. Ties favour leaving
    /// the partner what it asked for, then claiming fewer worthless items.
    fn propose(&self, pool: &ItemPool, partner_wants: Option<&Allocation>) -> Allocation {
        let target = self.aspiration();
        let mut best: Option<(u32, i64, u32, Allocation)> = None;
        for a in enumerate_allocations(pool) {
            let s = score(&self.valuation, &a);
            if s < target {
                continue;
            }
            let rest = pool.complement(&a).expect("feasible");
            let overlap = partner_wants
                .map(|w| (0..NUM_ITEMS).map(|i| w.take[i].min(rest.take[i])).sum::<u32>())
                .unwrap_or(0) as i64;
            let worthless = (0..NUM_ITEMS)
                .filter(|&i| self.valuation.values[i] == 0)
                .map(|i| a.take[i])
                .sum::<u32>();
            let key = (s, -overlap, worthless, a);
            if best.as_ref().is_none_or(|b| key < *b) {
                best = Some(key);
            }
        }
        best.map(|b| b.3).unwrap_or(Allocation::new(pool.counts))
    }
}

fn items_phrase(take: &Allocation, pool: &ItemPool) -> Vec<String> {
    if take.take == pool.counts {
        return vec!["everything".into()];
    }
    let parts: Vec<String> = (0..NUM_ITEMS)
        .filter(|&i| take.take[i] > 0)
        .map(|i| {
            let n = take.take[i] as usize;
            let noun = if n == 1 { SINGULAR[i] } else { PLURAL[i] };
            format!("{} {}", QUANTITIES[n.min(4)], noun)
        })
        .collect();
    let joined = match parts.len() {
        1 => parts[0].clone(),
        2 => format!("{} and {}", parts[0], parts[1]),
        _ => format!("{} , {} and {}", parts[0], parts[1], parts[2]),
    };
    joined.split_whitespace().map(String::from).collect()
}

fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().map(String::from)
}

fn proposal_utterance<R: Rng + ?Sized>(
    rng: &mut R,
    take: &Allocation,
    pool: &ItemPool,
    rejecting: bool,
) -> Vec<String> {
    let mut out = Vec::new();
    if rejecting {
        out.extend(words(REJECTIONS.choose(rng).unwrap()));
    }
    if take.take.iter().all(|&t| t == 0) {
        out.extend(words("you can have everything"));
        return out;
    }
    out.extend(words(OPENERS.choose(rng).unwrap()));
    out.extend(items_phrase(take, pool));
    if take.take != pool.counts && rng.gen_bool(0.5) {
        out.extend(words(", you get the rest"));
    }
    out
}

/// Generates `n` dialogues between two scripted negotiators. Selections
/// always match what was agreed in the dialogue.
pub fn synth_corpus<R: Rng + ?Sized>(rng: &mut R, n: usize, style: &SynthStyle) -> Vec<DialogueRecord> {
    (0..n).map(|_| synth_one(rng, style)).collect()
}

fn synth_one<R: Rng + ?Sized>(rng: &mut R, style: &SynthStyle) -> DialogueRecord {
    let scenario = sample_scenario(rng, &style.generator)
        .expect("synthetic corpus generator config must admit scenarios");
    let pool = scenario.pool;
    let mut make = |valuation| Negotiator {
        valuation,
        floor: *style.floors.choose(rng).unwrap(),
        step: *style.steps.choose(rng).unwrap(),
        offers_made: 0,
    };
    let mut agents = [make(scenario.valuation_a), make(scenario.valuation_b)];
    let mut speaker = if rng.gen_bool(0.5) { Speaker::A } else { Speaker::B };
    let idx = |s: Speaker| if s == Speaker::A { 0 } else { 1 };

    let mut turns: Vec<(Speaker, Vec<String>)> = Vec::new();
    // (speaker who offered, the offerer's claim)
    let mut last_offer: Option<(Speaker, Allocation)> = None;
    let mut deal: Option<(Speaker, Allocation)> = None;

    for _ in 0..style.max_offers {
        let me = &agents[idx(speaker)];
        if let Some((_, their_take)) = last_offer {
            let mine = pool.complement(&their_take).expect("feasible offer");
            let s = score(&me.valuation, &mine);
            let asp = me.aspiration();
            let accept = s >= asp || (s + 1 >= asp && rng.gen_bool(style.accept_noise));
            if accept {
                turns.push((speaker, words(ACCEPTS.choose(rng).unwrap()).collect()));
                deal = last_offer;
                speaker = speaker.other();
                break;
            }
        }
        let partner_wants = last_offer.map(|(_, t)| t);
        let take = me.propose(&pool, partner_wants.as_ref());
        let utt = proposal_utterance(rng, &take, &pool, last_offer.is_some());
        turns.push((speaker, utt));
        agents[idx(speaker)].offers_made += 1;
        last_offer = Some((speaker, take));
        speaker = speaker.other();
    }

    let (selection_a, selection_b) = match deal {
        Some((offerer, take)) => {
            let rest = pool.complement(&take).expect("feasible");
            let (a, b) = if offerer == Speaker::A { (take, rest) } else { (rest, take) };
            (Selection::Claim(a), Selection::Claim(b))
        }
        None => {
            turns.push((speaker, words(GIVE_UP).collect()));
            speaker = speaker.other();
            (Selection::NoAgreement, Selection::NoAgreement)
        }
    };
    turns.push((speaker, vec![CHOOSE.to_string()]));

    DialogueRecord {
        scenario,
        turns,
        selection_a,
        selection_b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, format_corpus, parse_records, to_perspectives};
    use crate::env::validate_scenario;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn corpus_postconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let recs = synth_corpus(&mut rng, 1000, &SynthStyle::default());
        assert_eq!(recs.len(), 1000);
        let text = format_corpus(&recs).unwrap();
        let examples = parse_records(&text).unwrap();
        assert_eq!(examples.len(), 2000);
        assert!(recs.iter().all(|r| validate_scenario(&r.scenario).is_empty()));

        let agreed = recs.iter().filter(|r| r.agreed()).count() as f64 / 1000.0;
        assert!(agreed >= 0.70, "agreement rate {agreed}");
        let avg_turns = recs.iter().map(|r| r.turns.len()).sum::<usize>() as f64 / 1000.0;
        assert!((2.0..=10.0).contains(&avg_turns), "avg turns {avg_turns}");

        let v = build_vocab(&examples, 1);
        assert!(v.len() - 6 <= 60, "{} distinct words", v.len() - 6);
    }

    #[test]
    fn selections_match_spoken_deal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for r in synth_corpus(&mut rng, 200, &SynthStyle::default()) {
            let (a, _) = to_perspectives(&r).unwrap();
            let ended_with_deal = r.turns[r.turns.len() - 2].1.contains(&"deal".to_string())
                && !r.turns[r.turns.len() - 2].1.contains(&"make".to_string());
            assert_eq!(a.trainable_output(), ended_with_deal);
            assert_eq!(r.agreed(), ended_with_deal);
        }
    }

    #[test]
    fn opening_claims_every_valued_item() {
        let pool = ItemPool::new([3, 2, 1]);
        let n = Negotiator {
            valuation: Valuation::new([0, 4, 2]),
            floor: 5,
            step: 1,
            offers_made: 0,
        };
        assert_eq!(n.propose(&pool, None), Allocation::new([0, 2, 1]));
    }
}
