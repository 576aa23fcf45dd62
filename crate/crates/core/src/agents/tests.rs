use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::toy::{ToyModel, WORD_X, WORD_Y};
use super::*;
use crate::corpus::Speaker;
use crate::env::{ItemPool, Scenario, Valuation};
use crate::model::ModelConfig;

/// Deterministic test model: `next` picks the next token from the history,
/// and the output distributions are fixed.
#[derive(Clone)]
struct Scripted {
    next: fn(&[TokenId]) -> TokenId,
    choice: [Vec<f64>; NUM_OUTPUTS],
}

impl DialogueModel for Scripted {
    type State = Vec<TokenId>;

    fn vocab_size(&self) -> usize {
        8
    }

    fn start(&self, _goal: &[u32; NUM_OUTPUTS]) -> Result<Vec<TokenId>, ModelError> {
        Ok(Vec::new())
    }

    fn observe(&self, state: &mut Vec<TokenId>, token: TokenId) -> Result<(), ModelError> {
        state.push(token);
        Ok(())
    }

    fn next_logits(&self, state: &Vec<TokenId>) -> Vec<f64> {
        let t = (self.next)(state);
        (0..8).map(|i| if i == t.index() { 0.0 } else { -1e9 }).collect()
    }

    fn choice_probs(&self, _state: &Vec<TokenId>) -> Result<[Vec<f64>; NUM_OUTPUTS], ModelError> {
        Ok(self.choice.clone())
    }
}

const WORD: TokenId = TokenId(6);

fn one_hot(class: usize) -> Vec<f64> {
    let mut v = vec![0.0; 6];
    v[class] = 1.0;
    v
}

fn claiming(take: [usize; 6]) -> [Vec<f64>; NUM_OUTPUTS] {
    std::array::from_fn(|i| {
        let mut v = vec![0.01; 6];
        v[take[i]] = 0.95;
        v
    })
}

fn figure2() -> Scenario {
    Scenario::new(
        ItemPool::new([3, 2, 1]),
        Valuation::new([1, 3, 1]),
        Valuation::new([2, 1, 2]),
    )
}

fn goals(s: &Scenario) -> ([u32; 6], [u32; 6]) {
    use crate::corpus::goal_of;
    (goal_of(&s.pool, &s.valuation_a), goal_of(&s.pool, &s.valuation_b))
}

#[test]
fn choose_hand_example() {
    let mut probs: [Vec<f64>; 6] = std::array::from_fn(|_| one_hot(0));
    probs[0] = vec![0.4, 0.6, 0.0, 0.0, 0.0, 0.0];
    probs[3] = vec![0.7, 0.3, 0.0, 0.0, 0.0, 0.0];
    let (sel, p) = choose_from(&probs, &ItemPool::new([1, 0, 0]));
    assert_eq!(sel, Selection::claim([1, 0, 0]));
    assert!((p - 0.42).abs() < 1e-12);
}

/// Scans every six-tuple of classes independently of the allocation
/// enumerator.
fn brute_force(probs: &[Vec<f64>; 6], pool: &ItemPool) -> (Selection, f64) {
    let mut best: Option<([u32; 3], f64)> = None;
    for code in 0..5usize.pow(6) {
        let mut c = [0usize; 6];
        let mut x = code;
        for slot in c.iter_mut().rev() {
            *slot = x % 5;
            x /= 5;
        }
        if (0..3).any(|i| (c[i] + c[i + 3]) as u32 != pool.counts[i]) {
            continue;
        }
        let p: f64 = (0..6).map(|i| probs[i][c[i]]).product();
        let own = [c[0] as u32, c[1] as u32, c[2] as u32];
        let better = match best {
            None => true,
            Some((b_own, b)) => p > b || (p == b && own < b_own),
        };
        if better {
            best = Some((own, p));
        }
    }
    let (own, p) = best.unwrap();
    let na: f64 = probs.iter().map(|v| v[5]).product();
    if na > p {
        (Selection::NoAgreement, na)
    } else {
        (Selection::claim(own), p)
    }
}

#[test]
fn choose_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool = ItemPool::new([3, 2, 1]);
    assert_eq!(crate::env::enumerate_allocations(&pool).len(), 24);
    for _ in 0..200 {
        let probs: [Vec<f64>; 6] = std::array::from_fn(|_| {
            let w: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        });
        let (got, p) = choose_from(&probs, &pool);
        let (want, q) = brute_force(&probs, &pool);
        assert_eq!(got, want);
        assert!((p - q).abs() <= 1e-15 * q);
    }
}

#[test]
fn uniform_choice_takes_first_allocation() {
    let probs: [Vec<f64>; 6] = std::array::from_fn(|_| vec![1.0 / 6.0; 6]);
    let (sel, _) = choose_from(&probs, &ItemPool::new([3, 2, 1]));
    assert_eq!(sel, Selection::claim([0, 0, 0]));
}

#[test]
fn no_agreement_needs_a_strictly_larger_product() {
    let probs: [Vec<f64>; 6] = std::array::from_fn(|_| {
        let mut v = vec![0.01; 6];
        v[5] = 0.95;
        v
    });
    assert_eq!(choose_from(&probs, &ItemPool::new([1, 1, 1])).0, Selection::NoAgreement);
}

proptest! {
    #[test]
    fn choose_ignores_per_position_scale(
        w in prop::collection::vec(0.01f64..1.0, 36),
        scales in prop::collection::vec(0.1f64..10.0, 6),
    ) {
        let pool = ItemPool::new([2, 1, 3]);
        let probs: [Vec<f64>; 6] = std::array::from_fn(|i| w[6 * i..6 * i + 6].to_vec());
        let scaled: [Vec<f64>; 6] =
            std::array::from_fn(|i| probs[i].iter().map(|v| v * scales[i]).collect());
        prop_assert_eq!(choose_from(&probs, &pool).0, choose_from(&scaled, &pool).0);
    }
}

#[test]
fn chooser_turn_is_write_then_choose() {
    let m = Scripted {
        next: |_| TokenId::CHOOSE,
        choice: claiming([0; 6]),
    };
    let mut s = AgentSession::new(&m, [1, 4, 4, 1, 1, 2], Policy::Likelihood, 0.5, 100).unwrap();
    let turn = s.write_turn(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(turn.tokens, vec![TokenId::WRITE, TokenId::CHOOSE]);
    assert_eq!(turn.sampled, vec![false, true]);
}

#[test]
fn figure2_agreement_pays_8_and_4() {
    let speak_then_choose: fn(&[TokenId]) -> TokenId = |h| match h.last() {
        Some(&TokenId::WRITE) if !h.contains(&WORD) => WORD,
        Some(&WORD) => TokenId::READ,
        _ => TokenId::CHOOSE,
    };
    let a = Scripted {
        next: speak_then_choose,
        choice: claiming([2, 2, 0, 1, 0, 1]),
    };
    let b = Scripted {
        next: speak_then_choose,
        choice: claiming([1, 0, 1, 2, 2, 0]),
    };
    let s = figure2();
    let (ga, gb) = goals(&s);
    let cfg = EngineConfig::default();
    let mut sa = cfg.session(&a, ga, Policy::Likelihood).unwrap();
    let mut sb = cfg.session(&b, gb, Policy::Likelihood).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = run_dialogue(&mut sa, &mut sb, &s, Speaker::A, 20, &mut rng).unwrap();
    assert!(t.outcome.agreed);
    assert_eq!((t.outcome.reward_a, t.outcome.reward_b), (8, 4));
    assert_eq!(t.outcome.pareto_optimal, Some(true));
    assert!(!t.forced_end);
    assert_eq!(t.view(Speaker::A), sa.history());
    assert_eq!(t.view(Speaker::B), sb.history());
}

#[test]
fn greedy_claims_conflict() {
    let m = Scripted {
        next: |_| TokenId::CHOOSE,
        choice: claiming([3, 2, 1, 0, 0, 0]),
    };
    let s = figure2();
    let (ga, gb) = goals(&s);
    let cfg = EngineConfig::default();
    let mut sa = cfg.session(&m, ga, Policy::Likelihood).unwrap();
    let mut sb = cfg.session(&m, gb, Policy::Likelihood).unwrap();
    let t = run_dialogue(&mut sa, &mut sb, &s, Speaker::A, 20, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap();
    assert!(!t.outcome.agreed);
    assert_eq!((t.outcome.reward_a, t.outcome.reward_b), (0, 0));
}

#[test]
fn babblers_hit_both_caps() {
    let m = Scripted {
        next: |_| WORD,
        choice: claiming([0; 6]),
    };
    let s = figure2();
    let (ga, gb) = goals(&s);
    let cfg = EngineConfig::default();
    let mut sa = cfg.session(&m, ga, Policy::Likelihood).unwrap();
    let mut sb = cfg.session(&m, gb, Policy::Likelihood).unwrap();
    let t = run_dialogue(&mut sa, &mut sb, &s, Speaker::B, 20, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    assert!(t.forced_end);
    assert_eq!(t.turns, 20);
    assert_eq!((t.outcome.reward_a, t.outcome.reward_b), (0, 0));
    assert_eq!(t.tokens.len(), 20 * 101 + 1);
    // Every turn was closed by the engine rather than sampled.
    let closers: Vec<_> = t.tokens.iter().filter(|o| o.token.is_marker() && !o.sampled).collect();
    assert_eq!(closers.len(), 21);
    assert_eq!(t.tokens[0].owner, Speaker::B);
}

fn random_model(seed: u64) -> NegotiationModel {
    let mut cfg = ModelConfig::tiny(12);
    cfg.init_range = 1.0;
    NegotiationModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn histories_mirror_each_other() {
    let m = random_model(4);
    let s = figure2();
    let (ga, gb) = goals(&s);
    let cfg = EngineConfig {
        max_turn_tokens: 15,
        ..EngineConfig::default()
    };
    for seed in 0..10 {
        let mut sa = cfg.session(&m, ga, Policy::Likelihood).unwrap();
        let mut sb = cfg.session(&m, gb, Policy::Likelihood).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = run_dialogue(&mut sa, &mut sb, &s, Speaker::A, 20, &mut rng).unwrap();
        let flipped: Vec<TokenId> = sa.history().iter().map(|t| t.flipped()).collect();
        assert_eq!(flipped, sb.history());
        assert_eq!(t.view(Speaker::A), sa.history());
        assert!(t.tokens.len() <= 20 * 16 + 1);
        // A turn never contains a second marker of the speaker's own.
        for w in t.tokens.windows(2) {
            if w[0].owner == w[1].owner && w[1].sampled {
                assert!(!(w[0].token.is_marker() && w[0].sampled && w[1].token.is_marker()));
            }
        }
    }
}

#[test]
fn single_candidate_rollout_is_likelihood() {
    let m = random_model(5);
    let goal = [3, 1, 2, 3, 1, 1];
    let single = Policy::Rollout(RolloutConfig {
        candidates: 1,
        ..RolloutConfig::default()
    });
    let mut a = AgentSession::new(&m, goal, Policy::Likelihood, 0.5, 30).unwrap();
    let mut b = AgentSession::new(&m, goal, single, 0.5, 30).unwrap();
    let ta = a.write_turn(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let tb = b.write_turn(&mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn rollout_turns_are_well_formed() {
    let m = random_model(6);
    let goal = [3, 1, 2, 3, 1, 1];
    let policy = Policy::Rollout(RolloutConfig {
        candidates: 4,
        samples: 2,
        max_rollout_tokens: 40,
    });
    let mut s = AgentSession::new(&m, goal, policy, 0.5, 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let turn = s.write_turn(&mut rng).unwrap();
    assert_eq!(turn.tokens[0], TokenId::WRITE);
    let last = *turn.tokens.last().unwrap();
    assert!(last == TokenId::READ || last == TokenId::CHOOSE);
    assert!(turn.tokens[1..turn.tokens.len() - 1].iter().all(|t| !t.is_marker()));
    assert_eq!(s.history(), turn.tokens.as_slice());
}

/// Exact `E[r(o) p(o)]` over all toy continuations of `history`.
fn exact_value(m: &ToyModel, history: &mut Vec<TokenId>, valuation: &Valuation, pool: &ItemPool) -> f64 {
    if history.last() == Some(&TokenId::CHOOSE) {
        let (sel, p) = brute_force(&m.output_probs(history), pool);
        return match sel {
            Selection::Claim(a) => crate::env::score(valuation, &a) as f64 * p,
            Selection::NoAgreement => 0.0,
        };
    }
    let probs = m.next_probs(history);
    let mut total = 0.0;
    for (t, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            history.push(TokenId(t as u32));
            total += p * exact_value(m, history, valuation, pool);
            history.pop();
        }
    }
    total
}

#[test]
fn rollout_estimate_matches_enumeration() {
    let m = ToyModel::default();
    let goal = [2, 2, 1, 3, 1, 3];
    let pool = ItemPool::new([2, 1, 1]);
    let valuation = Valuation::new([2, 3, 3]);
    let s = AgentSession::new(&m, goal, Policy::Likelihood, 1.0, 10).unwrap();
    for prefix in [vec![TokenId::WRITE, WORD_X, TokenId::READ], vec![TokenId::WRITE, WORD_Y]] {
        let exact = exact_value(&m, &mut prefix.clone(), &valuation, &pool);
        let est = s
            .estimate_value(&prefix, 10_000, 50, &mut ChaCha8Rng::seed_from_u64(11))
            .unwrap();
        assert!(exact > 0.0);
        assert!(((est - exact) / exact).abs() < 0.02, "{est} vs {exact}");
    }
}
