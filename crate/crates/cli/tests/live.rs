use std::time::{Duration, Instant};

use negotiator::agents::{DialogueModel, EngineConfig, Policy};
use negotiator::corpus::{TokenId, Vocabulary};
use negotiator::env::{ItemPool, Scenario, Selection, Valuation};
use negotiator::model::{ModelError, NUM_OUTPUTS};
use negotiator_cli::live::{LiveSession, Role, SessionError, SessionState, IDLE_TIMEOUT};
use proptest::prelude::*;

/// Says `words_per_turn` copies of word 6 each turn, then hands over, or
/// ends the dialogue on its own turn `choose_on_turn` (0-based).
struct Scripted {
    words_per_turn: usize,
    choose_on_turn: Option<usize>,
}

const VOCAB: usize = 10;

fn vocab() -> Vocabulary {
    Vocabulary::from_words(["i", "want", "the", "books"])
}

impl DialogueModel for Scripted {
    type State = Vec<TokenId>;

    fn vocab_size(&self) -> usize {
        VOCAB
    }

    fn start(&self, _goal: &[u32; NUM_OUTPUTS]) -> Result<Vec<TokenId>, ModelError> {
        Ok(Vec::new())
    }

    fn observe(&self, state: &mut Vec<TokenId>, token: TokenId) -> Result<(), ModelError> {
        state.push(token);
        Ok(())
    }

    fn next_logits(&self, state: &Vec<TokenId>) -> Vec<f64> {
        let own_turns = state.iter().filter(|&&t| t == TokenId::READ).count().saturating_sub(1);
        let since = state.iter().rev().take_while(|&&t| t != TokenId::WRITE).count();
        let target = if since < self.words_per_turn {
            TokenId(6)
        } else if self.choose_on_turn == Some(own_turns) {
            TokenId::CHOOSE
        } else {
            TokenId::READ
        };
        let mut l = vec![-60.0; VOCAB];
        l[target.index()] = 0.0;
        l
    }

    fn choice_probs(&self, _state: &Vec<TokenId>) -> Result<[Vec<f64>; NUM_OUTPUTS], ModelError> {
        Ok(std::array::from_fn(|_| vec![1.0 / 6.0; 6]))
    }
}

fn scenario() -> Scenario {
    Scenario::new(
        ItemPool::new([3, 2, 1]),
        Valuation::new([1, 3, 1]),
        Valuation::new([2, 1, 2]),
    )
}

fn session<'m>(model: &'m Scripted, vocab: &'m Vocabulary, now: Instant) -> LiveSession<'m, Scripted> {
    LiveSession::new(
        "t".into(),
        model,
        vocab,
        scenario(),
        Policy::Likelihood,
        &EngineConfig::default(),
        1,
        now,
    )
    .unwrap()
}

#[test]
fn view_hides_agent_values_until_done() {
    let m = Scripted { words_per_turn: 2, choose_on_turn: Some(0) };
    let v = vocab();
    let now = Instant::now();
    let mut s = session(&m, &v, now);
    let view = s.view();
    assert_eq!(view.state, SessionState::HumanTurn);
    assert_eq!(view.pool, [3, 2, 1]);
    let total: u32 = view.pool.iter().zip(view.values).map(|(c, v)| c * v).sum();
    assert_eq!(total, 10);
    assert!(!serde_json::to_string(&view).unwrap().contains("agent_values"));

    let events = s.post_message("I want THE books", now).unwrap();
    assert_eq!(events.len(), 2);
    assert_eq!(events[0].speaker, Role::Agent);
    assert_eq!(events[0].text, "i i");
    assert_eq!(events[1].text, "<choose>");
    assert_eq!(s.state(), SessionState::AwaitingSelections);
    assert!(!serde_json::to_string(&s.view()).unwrap().contains("agent_values"));
    assert_eq!(s.view().messages[0].text, "i want the books");

    assert!(matches!(s.post_message("hello", now), Err(SessionError::SelectionRequired)));
    let out = s.post_selection(Selection::claim([3, 2, 1]), now).unwrap();
    assert!(out.agreed);
    assert_eq!((out.reward_human, out.reward_agent), (10, 0));
    assert_eq!(out.agent_values, [2, 1, 2]);
    assert_eq!(s.state(), SessionState::Done);
    assert!(serde_json::to_string(&s.view()).unwrap().contains("agent_values"));
    assert!(matches!(s.post_message("more", now), Err(SessionError::Finished)));
}

#[test]
fn unknown_words_become_unk() {
    let m = Scripted { words_per_turn: 1, choose_on_turn: None };
    let v = vocab();
    let now = Instant::now();
    let mut s = session(&m, &v, now);
    s.post_message("zebra want", now).unwrap();
    assert_eq!(s.view().messages[0].text, "<unk> want");
    assert_eq!(
        s.tokenize("Books ZEBRA").unwrap(),
        vec![v.id("books"), TokenId::UNK]
    );
}

#[test]
fn conflicting_selection_scores_zero() {
    let m = Scripted { words_per_turn: 1, choose_on_turn: Some(0) };
    let v = vocab();
    let now = Instant::now();
    let mut s = session(&m, &v, now);
    s.post_message("deal", now).unwrap();
    let out = s.post_selection(Selection::claim([1, 0, 0]), now).unwrap();
    assert!(!out.agreed);
    assert_eq!((out.reward_human, out.reward_agent), (0, 0));
}

#[test]
fn human_can_end_the_dialogue() {
    let m = Scripted { words_per_turn: 1, choose_on_turn: None };
    let v = vocab();
    let now = Instant::now();
    let mut s = session(&m, &v, now);
    let events = s.post_message("i want the books <choose>", now).unwrap();
    assert!(events.is_empty());
    assert_eq!(s.state(), SessionState::AwaitingSelections);
    let out = s.post_selection(Selection::NoAgreement, now).unwrap();
    assert!(!out.agreed);
}

#[test]
fn message_validation() {
    let m = Scripted { words_per_turn: 1, choose_on_turn: None };
    let v = vocab();
    let now = Instant::now();
    let mut s = session(&m, &v, now);
    assert!(matches!(s.post_message("   ", now), Err(SessionError::EmptyMessage)));
    let long = vec!["i"; 101].join(" ");
    assert!(matches!(s.post_message(&long, now), Err(SessionError::MessageTooLong(101))));
    assert!(s.post_message(&vec!["i"; 100].join(" "), now).is_ok());
    assert!(matches!(
        s.post_selection(Selection::claim([0, 0, 0]), now),
        Err(SessionError::NotAwaitingSelection)
    ));
    // Markers typed by the human are neutralized.
    s.post_message("write: read: <choose> i", now).unwrap();
    assert_eq!(s.view().messages[2].text, "<unk> <unk> <unk> i");
    assert_eq!(s.state(), SessionState::HumanTurn);
}

#[test]
fn infeasible_claim_is_rejected_without_state_change() {
    let m = Scripted { words_per_turn: 1, choose_on_turn: Some(0) };
    let v = vocab();
    let now = Instant::now();
    let mut s = session(&m, &v, now);
    s.post_message("deal", now).unwrap();
    match s.post_selection(Selection::claim([9, 9, 9]), now) {
        Err(SessionError::Infeasible(fields)) => assert_eq!(fields.len(), 3),
        other => panic!("{other:?}"),
    }
    assert_eq!(s.state(), SessionState::AwaitingSelections);
    assert!(s.post_selection(Selection::claim([3, 2, 1]), now).is_ok());
}

#[test]
fn turn_cap_forces_no_agreement() {
    let m = Scripted { words_per_turn: 1, choose_on_turn: None };
    let v = vocab();
    let now = Instant::now();
    let mut s = session(&m, &v, now);
    for _ in 0..10 {
        s.post_message("i want the books", now).unwrap();
    }
    assert_eq!(s.state(), SessionState::Done);
    assert_eq!(s.view().turns, 20);
    let o = s.outcome().unwrap();
    assert!(!o.agreed);
    assert_eq!((o.reward_human, o.reward_agent), (0, 0));
    assert!(matches!(s.post_message("hello", now), Err(SessionError::Finished)));
}

#[test]
fn idle_sessions_expire() {
    let m = Scripted { words_per_turn: 1, choose_on_turn: None };
    let v = vocab();
    let now = Instant::now();
    let mut s = session(&m, &v, now);
    s.post_message("hello", now).unwrap();
    assert!(!s.expire_if_idle(now + IDLE_TIMEOUT));
    let later = now + IDLE_TIMEOUT + Duration::from_secs(1);
    assert!(matches!(s.post_message("hello", later), Err(SessionError::Finished)));
    assert_eq!(s.state(), SessionState::Done);
    assert!(!s.outcome().unwrap().agreed);
}

#[derive(Debug, Clone)]
enum Action {
    Say(String),
    Take([u32; 3]),
    NoDeal,
    Wait(u64),
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        4 => prop::collection::vec(prop::sample::select(vec!["i", "want", "books", "<choose>", "zebra", "write:"]), 0..6)
            .prop_map(|w| Action::Say(w.join(" "))),
        2 => prop::array::uniform3(0u32..5).prop_map(Action::Take),
        1 => Just(Action::NoDeal),
        1 => (0u64..3000).prop_map(Action::Wait),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn state_machine_stays_on_the_declared_graph(
        words in 0usize..4,
        choose_on in prop::option::of(0usize..4),
        actions in prop::collection::vec(action(), 0..40),
    ) {
        let m = Scripted { words_per_turn: words, choose_on_turn: choose_on };
        let v = vocab();
        let start = Instant::now();
        let mut now = start;
        let mut s = session(&m, &v, now);
        for a in actions {
            let before = s.state();
            let _ = match a {
                Action::Say(t) => s.post_message(&t, now).map(|_| ()),
                Action::Take(t) => s.post_selection(Selection::claim(t), now).map(|_| ()),
                Action::NoDeal => s.post_selection(Selection::NoAgreement, now).map(|_| ()),
                Action::Wait(secs) => {
                    now += Duration::from_secs(secs);
                    Ok(())
                }
            };
            if before == SessionState::Done {
                prop_assert_eq!(s.state(), SessionState::Done);
            }
            let json = serde_json::to_string(&s.view()).unwrap();
            prop_assert_eq!(json.contains("agent_values"), s.state() == SessionState::Done);
            prop_assert!(s.view().turns <= 20);
        }
        for &(from, to) in s.transitions() {
            prop_assert!(from.allows(to), "{:?} -> {:?}", from, to);
        }
        prop_assert_ne!(s.state(), SessionState::AgentTurn);
    }
}
