use log::{info, warn};
use rand::Rng;

use super::{supervised_step, TrainError};
use crate::agents::{run_dialogue, AgentSession, Policy};
use crate::compute::Graph;
use crate::corpus::{goal_of, Speaker, TokenId};
use crate::env::{sample_scenario, GeneratorConfig};
use crate::model::{EncodedExample, NegotiationModel};

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    pub lr: f64,
    pub clip: f64,
    pub gamma: f64,
    /// Episodes between interleaved supervised updates.
    pub interleave: usize,
    pub sup_lr: f64,
    pub sup_clip: f64,
    pub sup_batch: usize,
    /// Output-loss weight for the interleaved supervised updates.
    pub sup_alpha: f64,
    pub temperature: f64,
    pub episodes: usize,
    pub max_turns: usize,
    pub max_turn_tokens: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            clip: 1.0,
            gamma: 0.95,
            interleave: 4,
            sup_lr: 0.5,
            sup_clip: 1.0,
            sup_batch: 16,
            sup_alpha: 0.5,
            temperature: 0.5,
            episodes: 4086,
            max_turns: 20,
            max_turn_tokens: 100,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(TrainError::Config("gamma must lie in (0, 1]".into()));
        }
        if !(self.lr > 0.0 && self.clip > 0.0 && self.sup_lr > 0.0 && self.sup_clip > 0.0) {
            return Err(TrainError::Config("learning rates and clips must be positive".into()));
        }
        if self.temperature <= 0.0 {
            return Err(TrainError::Config("temperature must be positive".into()));
        }
        if self.sup_batch == 0 || self.max_turns == 0 || self.max_turn_tokens == 0 {
            return Err(TrainError::Config("batch size and caps must be positive".into()));
        }
        Ok(())
    }

    /// Whether an interleaved supervised update follows episode `n`
    /// (1-based). A period of 0 disables them.
    pub fn supervised_due(&self, n: usize) -> bool {
        self.interleave > 0 && n > 0 && n % self.interleave == 0
    }
}

/// Running mean of completed episode rewards.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaselineState {
    sum: f64,
    count: usize,
}

impl BaselineState {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn update(&mut self, reward: f64) {
        self.sum += reward;
        self.count += 1;
    }
}

/// `γ^(T−t) (r − μ)` for each position `t`, where `T` is the index of the
/// final dialogue token; the baseline then absorbs `r`.
pub fn compute_returns(
    positions: &[usize],
    last: usize,
    reward: f64,
    baseline: &mut BaselineState,
    gamma: f64,
) -> Vec<f64> {
    let adv = reward - baseline.mean();
    let out = positions
        .iter()
        .map(|&t| gamma.powi(last.saturating_sub(t) as i32) * adv)
        .collect();
    baseline.update(reward);
    out
}

/// One clipped SGD step on `−Σ R(x_t) log p(x_t | x_<t, g)` over the given
/// positions. Returns `false` (and leaves the model alone) when there is
/// nothing to learn from.
pub fn reinforce_update(
    model: &mut NegotiationModel,
    goal: &[u32],
    tokens: &[TokenId],
    positions: &[usize],
    returns: &[f64],
    lr: f64,
    clip: f64,
) -> Result<bool, TrainError> {
    if positions.is_empty() {
        warn!("episode without agent tokens; skipping update");
        return Ok(false);
    }
    if positions.len() != returns.len() {
        return Err(TrainError::Config("one return per agent token required".into()));
    }
    if returns.iter().all(|r| *r == 0.0) {
        return Ok(false);
    }
    let mut weights = vec![0.0; tokens.len()];
    for (&p, &r) in positions.iter().zip(returns) {
        weights[p] = r;
    }
    let grads = {
        let mut g = Graph::new(model.store());
        let loss = model.weighted_nll_node(&mut g, goal, tokens, &weights)?;
        g.backward(loss)?
    };
    let store = model.store_mut();
    store.zero_grad();
    store.accumulate(&grads);
    store.clip_global_norm(clip)?;
    store.sgd_step(lr);
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlEpisode {
    pub reward: u32,
    pub partner_reward: u32,
    pub agreed: bool,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RlReport {
    pub episodes: Vec<RlEpisode>,
    pub supervised_updates: usize,
    pub partner_checksum_before: u64,
    pub partner_checksum_after: u64,
}

impl RlReport {
    /// Mean reward over episodes `range`.
    pub fn mean_reward(&self, range: std::ops::Range<usize>) -> f64 {
        let xs = &self.episodes[range];
        xs.iter().map(|e| e.reward as f64).sum::<f64>() / xs.len().max(1) as f64
    }
}

impl std::fmt::Display for RlReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# episode reward partner_reward agreed baseline")?;
        for (i, e) in self.episodes.iter().enumerate() {
            writeln!(
                f,
                "{} {} {} {} {:.6}",
                i + 1,
                e.reward,
                e.partner_reward,
                u8::from(e.agreed),
                e.baseline
            )?;
        }
        writeln!(
            f,
            "# supervised_updates={} partner_checksum={:016x}",
            self.supervised_updates, self.partner_checksum_after
        )
    }
}

/// Self-play fine-tuning of `model` against the fixed `partner`. Each
/// episode samples a scenario and a first speaker, runs a dialogue with
/// both sides sampling at `cfg.temperature`, and applies REINFORCE to
/// `model`'s own tokens. After every `cfg.interleave` episodes one
/// supervised minibatch drawn from `sup` is applied.
pub fn train_rl<R: Rng + ?Sized>(
    model: &mut NegotiationModel,
    partner: &NegotiationModel,
    generator: &GeneratorConfig,
    sup: &[EncodedExample],
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<RlReport, TrainError> {
    cfg.validate()?;
    if cfg.interleave > 0 && sup.is_empty() {
        return Err(TrainError::EmptySet("supervised"));
    }
    let mut report = RlReport {
        partner_checksum_before: partner.checksum(),
        ..RlReport::default()
    };
    let mut baseline = BaselineState::default();
    for n in 1..=cfg.episodes {
        let scenario = sample_scenario(rng, generator)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let first = if rng.gen::<bool>() { Speaker::A } else { Speaker::B };
        let goal = goal_of(&scenario.pool, &scenario.valuation_a);
        let transcript = {
            let mut me = AgentSession::new(
                &*model,
                goal,
                Policy::Likelihood,
                cfg.temperature,
                cfg.max_turn_tokens,
            )?;
            let mut other = AgentSession::new(
                partner,
                goal_of(&scenario.pool, &scenario.valuation_b),
                Policy::Likelihood,
                cfg.temperature,
                cfg.max_turn_tokens,
            )?;
            run_dialogue(&mut me, &mut other, &scenario, first, cfg.max_turns, rng)?
        };
        let tokens = transcript.view(Speaker::A);
        let positions = transcript.sampled_positions(Speaker::A);
        let reward = transcript.outcome.reward_a;
        let returns = compute_returns(
            &positions,
            tokens.len() - 1,
            reward as f64,
            &mut baseline,
            cfg.gamma,
        );
        reinforce_update(model, &goal, &tokens, &positions, &returns, cfg.lr, cfg.clip)?;
        report.episodes.push(RlEpisode {
            reward,
            partner_reward: transcript.outcome.reward_b,
            agreed: transcript.outcome.agreed,
            baseline: baseline.mean(),
        });

        if cfg.supervised_due(n) {
            let batch: Vec<&EncodedExample> = (0..cfg.sup_batch)
                .map(|_| &sup[rng.gen_range(0..sup.len())])
                .collect();
            let lr = cfg.sup_lr;
            supervised_step(model, &batch, cfg.sup_alpha, cfg.sup_clip, |s| s.sgd_step(lr))?;
            report.supervised_updates += 1;
        }
        if n % 100 == 0 {
            let from = n.saturating_sub(100);
            info!("episode {n}: mean reward (last 100) {:.3}", report.mean_reward(from..n));
        }
    }
    report.partner_checksum_after = partner.checksum();
    Ok(report)
}
