//! The bargaining game: item pools, private valuations, allocations,
//! deal resolution and Pareto analysis.
//!
//! Three item types (books, hats, balls) are divided between two agents.
//! Each agent values the pool at exactly 10 points. A deal only pays out
//! when both agents declare complementary claims.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

/// Number of item types in every scenario.
pub const NUM_ITEMS: usize = 3;
/// Points each agent assigns to the full pool.
pub const TOTAL_VALUE: u32 = 10;
pub const ITEM_NAMES: [&str; NUM_ITEMS] = ["book", "hat", "ball"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("no valid scenario after {0} attempts; generator config is infeasible")]
    SamplerExhausted(usize),
    #[error("malformed scenario line: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ItemPool {
    pub counts: [u32; NUM_ITEMS],
}

impl ItemPool {
    pub fn new(counts: [u32; NUM_ITEMS]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    /// Whether `take` claims no more than the pool holds.
    pub fn admits(&self, take: &Allocation) -> bool {
        take.take.iter().zip(self.counts.iter()).all(|(t, c)| t <= c)
    }

    /// The items left for the other agent. `None` when `take` is infeasible.
    pub fn complement(&self, take: &Allocation) -> Option<Allocation> {
        if !self.admits(take) {
            return None;
        }
        let mut rest = [0; NUM_ITEMS];
        for i in 0..NUM_ITEMS {
            rest[i] = self.counts[i] - take.take[i];
        }
        Some(Allocation::new(rest))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Valuation {
    pub values: [u32; NUM_ITEMS],
}

impl Valuation {
    pub fn new(values: [u32; NUM_ITEMS]) -> Self {
        Self { values }
    }

    pub fn total(&self, pool: &ItemPool) -> u32 {
        dot(&self.values, &pool.counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scenario {
    pub pool: ItemPool,
    pub valuation_a: Valuation,
    pub valuation_b: Valuation,
}

impl Scenario {
    pub fn new(pool: ItemPool, valuation_a: Valuation, valuation_b: Valuation) -> Self {
        Self {
            pool,
            valuation_a,
            valuation_b,
        }
    }

    /// The same scenario seen with the two agents exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.pool, self.valuation_b, self.valuation_a)
    }
}

/// Scenario text form:
/// `c_book va_book c_hat va_hat c_ball va_ball | vb_book vb_hat vb_ball`.
impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.pool.counts;
        let a = &self.valuation_a.values;
        let b = &self.valuation_b.values;
        write!(
            f,
            "{} {} {} {} {} {} | {} {} {}",
            c[0], a[0], c[1], a[1], c[2], a[2], b[0], b[1], b[2]
        )
    }
}

impl FromStr for Scenario {
    type Err = EnvError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let err = || EnvError::Parse(line.trim().to_string());
        let (left, right) = line.split_once('|').ok_or_else(err)?;
        let parse = |s: &str| -> Result<Vec<u32>, EnvError> {
            s.split_whitespace()
                .map(|w| w.parse::<u32>().map_err(|_| err()))
                .collect()
        };
        let left = parse(left)?;
        let right = parse(right)?;
        if left.len() != 2 * NUM_ITEMS || right.len() != NUM_ITEMS {
            return Err(err());
        }
        let pool = ItemPool::new([left[0], left[2], left[4]]);
        if pool.total() == 0 || pool.total() > 7 {
            return Err(err());
        }
        Ok(Scenario::new(
            pool,
            Valuation::new([left[1], left[3], left[5]]),
            Valuation::new([right[0], right[1], right[2]]),
        ))
    }
}

/// Item counts claimed by one agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Allocation {
    pub take: [u32; NUM_ITEMS],
}

impl Allocation {
    pub fn new(take: [u32; NUM_ITEMS]) -> Self {
        Self { take }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Selection {
    Claim(Allocation),
    NoAgreement,
}

impl Selection {
    pub fn claim(take: [u32; NUM_ITEMS]) -> Self {
        Selection::Claim(Allocation::new(take))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DealOutcome {
    pub agreed: bool,
    pub reward_a: u32,
    pub reward_b: u32,
    /// Only defined for agreed deals.
    pub pareto_optimal: Option<bool>,
}

impl DealOutcome {
    pub fn no_deal() -> Self {
        Self {
            agreed: false,
            reward_a: 0,
            reward_b: 0,
            pareto_optimal: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// An agent's valuation does not total 10 against the pool.
    Total { agent: char, total: u32 },
    /// An item type is worth nothing to either agent.
    ValuedByNoOne { item: usize },
    /// No item type has positive value to both agents.
    NoSharedInterest,
    ValueOutOfRange { agent: char, item: usize, value: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Total { agent, total } => {
                write!(f, "valuation {agent} totals {total}, expected {TOTAL_VALUE}")
            }
            Violation::ValuedByNoOne { item } => {
                write!(f, "{} valued by no one", ITEM_NAMES[*item])
            }
            Violation::NoSharedInterest => write!(f, "no item is valued by both agents"),
            Violation::ValueOutOfRange { agent, item, value } => write!(
                f,
                "valuation {agent} gives {} value {value} outside [0, 10]",
                ITEM_NAMES[*item]
            ),
        }
    }
}

fn dot(a: &[u32; NUM_ITEMS], b: &[u32; NUM_ITEMS]) -> u32 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Reports every violated scenario constraint; an empty list means valid.
pub fn validate_scenario(s: &Scenario) -> Vec<Violation> {
    let mut out = Vec::new();
    for (agent, v) in [('a', &s.valuation_a), ('b', &s.valuation_b)] {
        for (item, &value) in v.values.iter().enumerate() {
            if value > TOTAL_VALUE {
                out.push(Violation::ValueOutOfRange { agent, item, value });
            }
        }
        let total = v.total(&s.pool);
        if total != TOTAL_VALUE {
            out.push(Violation::Total { agent, total });
        }
    }
    for item in 0..NUM_ITEMS {
        if s.valuation_a.values[item] == 0 && s.valuation_b.values[item] == 0 {
            out.push(Violation::ValuedByNoOne { item });
        }
    }
    let shared = (0..NUM_ITEMS)
        .any(|i| s.valuation_a.values[i] > 0 && s.valuation_b.values[i] > 0);
    if !shared {
        out.push(Violation::NoSharedInterest);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub min_total: u32,
    pub max_total: u32,
    pub min_per_type: u32,
    pub max_per_type: u32,
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            min_total: 5,
            max_total: 7,
            min_per_type: 1,
            max_per_type: 4,
            max_attempts: 10_000,
        }
    }
}

/// All value vectors with `dot(values, counts) == 10`.
fn valuations_for(pool: &ItemPool) -> Vec<Valuation> {
    let c = pool.counts;
    let mut out = Vec::new();
    for v0 in 0..=TOTAL_VALUE {
        for v1 in 0..=TOTAL_VALUE {
            for v2 in 0..=TOTAL_VALUE {
                let v = [v0, v1, v2];
                if dot(&v, &c) == TOTAL_VALUE {
                    out.push(Valuation::new(v));
                }
            }
        }
    }
    out
}

/// Rejection sampler: uniform pool within the count bounds, then two
/// independent uniform valuations summing to 10; rejects until all
/// constraints hold.
pub fn sample_scenario<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &GeneratorConfig,
) -> Result<Scenario, EnvError> {
    for _ in 0..cfg.max_attempts {
        if cfg.min_per_type > cfg.max_per_type {
            break;
        }
        let mut counts = [0; NUM_ITEMS];
        for c in counts.iter_mut() {
            *c = rng.gen_range(cfg.min_per_type..=cfg.max_per_type);
        }
        let pool = ItemPool::new(counts);
        let total = pool.total();
        if total < cfg.min_total || total > cfg.max_total || total == 0 {
            continue;
        }
        let options = valuations_for(&pool);
        if options.is_empty() {
            continue;
        }
        let a = options[rng.gen_range(0..options.len())];
        let b = options[rng.gen_range(0..options.len())];
        let s = Scenario::new(pool, a, b);
        if validate_scenario(&s).is_empty() {
            return Ok(s);
        }
    }
    Err(EnvError::SamplerExhausted(cfg.max_attempts))
}

/// Every feasible claim on `pool`, in lexicographic order.
pub fn enumerate_allocations(pool: &ItemPool) -> Vec<Allocation> {
    let c = pool.counts;
    let mut out = Vec::with_capacity(((c[0] + 1) * (c[1] + 1) * (c[2] + 1)) as usize);
    for a in 0..=c[0] {
        for b in 0..=c[1] {
            for d in 0..=c[2] {
                out.push(Allocation::new([a, b, d]));
            }
        }
    }
    out
}

pub fn score(v: &Valuation, a: &Allocation) -> u32 {
    dot(&v.values, &a.take)
}

/// Settles a finished negotiation. Claims must be exact complements to pay out.
pub fn resolve(
    pool: &ItemPool,
    sel_a: &Selection,
    sel_b: &Selection,
    val_a: &Valuation,
    val_b: &Valuation,
) -> DealOutcome {
    let (ta, tb) = match (sel_a, sel_b) {
        (Selection::Claim(a), Selection::Claim(b)) => (a, b),
        _ => return DealOutcome::no_deal(),
    };
    let complementary = (0..NUM_ITEMS).all(|i| ta.take[i] + tb.take[i] == pool.counts[i]);
    if !complementary {
        return DealOutcome::no_deal();
    }
    let scenario = Scenario::new(*pool, *val_a, *val_b);
    DealOutcome {
        agreed: true,
        reward_a: score(val_a, ta),
        reward_b: score(val_b, tb),
        pareto_optimal: Some(is_pareto_optimal(&scenario, ta)),
    }
}

/// True when no feasible split gives one agent more points without giving
/// the other fewer. Agent B holds the complement of `alloc_a`.
pub fn is_pareto_optimal(s: &Scenario, alloc_a: &Allocation) -> bool {
    let Some(alloc_b) = s.pool.complement(alloc_a) else {
        return false;
    };
    let ra = score(&s.valuation_a, alloc_a);
    let rb = score(&s.valuation_b, &alloc_b);
    !enumerate_allocations(&s.pool).iter().any(|other| {
        let ob = s.pool.complement(other).expect("enumerated allocations are feasible");
        let oa_score = score(&s.valuation_a, other);
        let ob_score = score(&s.valuation_b, &ob);
        oa_score >= ra && ob_score >= rb && (oa_score > ra || ob_score > rb)
    })
}
