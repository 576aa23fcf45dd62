//! End-to-end negotiation dialogue agents.
//!
//! The crate covers the full pipeline: a multi-issue bargaining
//! environment ([`env`]), dialogue corpora ([`corpus`]), a small
//! reverse-mode differentiation engine ([`compute`]), the goal-conditioned
//! recurrent dialogue model ([`model`]), supervised and self-play
//! reinforcement training ([`train`]), likelihood and rollout agents
//! ([`agents`]) and tournament metrics ([`eval`]).

pub mod corpus;
pub mod compute;
pub mod env;
pub mod model;
pub mod agents;
pub mod train;
pub mod eval;
