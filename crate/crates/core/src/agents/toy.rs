//! A hand-built five-token model whose every dialogue ends within a few
//! tokens, so expectations over its continuations can be enumerated
//! exactly. Token ids: `write:`, `read:`, `<choose>`, then two words.

use super::DialogueModel;
use crate::corpus::TokenId;
use crate::model::{ModelError, NUM_OUTPUTS};

pub const TOY_VOCAB: usize = 5;
pub const WORD_X: TokenId = TokenId(3);
pub const WORD_Y: TokenId = TokenId(4);
/// Output classes: counts `0..=4`, then no-agreement.
pub const TOY_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyModel {
    /// Dialogue length at which `<choose>` becomes certain.
    pub horizon: usize,
}

impl Default for ToyModel {
    fn default() -> Self {
        Self { horizon: 4 }
    }
}

impl ToyModel {
    /// Next-token probabilities after `history`.
    pub fn next_probs(&self, history: &[TokenId]) -> [f64; TOY_VOCAB] {
        if history.len() >= self.horizon || history.last() == Some(&TokenId::CHOOSE) {
            return [0.0, 0.0, 1.0, 0.0, 0.0];
        }
        let n = history.len() as f64;
        let nx = history.iter().filter(|&&t| t == WORD_X).count() as f64;
        let ny = history.iter().filter(|&&t| t == WORD_Y).count() as f64;
        let w = [0.5 + 0.25 * ny, 1.0 + nx, 0.5 + 0.5 * n, 2.0, 1.0 + 0.5 * ny];
        let s: f64 = w.iter().sum();
        w.map(|v| v / s)
    }

    /// Output distributions after `history`.
    pub fn output_probs(&self, history: &[TokenId]) -> [Vec<f64>; NUM_OUTPUTS] {
        let nx = history.iter().filter(|&&t| t == WORD_X).count();
        let ny = history.iter().filter(|&&t| t == WORD_Y).count();
        std::array::from_fn(|i| {
            let w: Vec<f64> = (0..TOY_CLASSES)
                .map(|k| 1.0 + (((i + 1) * (k + 1) * (1 + nx) + 3 * ny * k) % 5) as f64)
                .collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
    }
}

impl DialogueModel for ToyModel {
    type State = Vec<TokenId>;

    fn vocab_size(&self) -> usize {
        TOY_VOCAB
    }

    fn start(&self, _goal: &[u32; NUM_OUTPUTS]) -> Result<Vec<TokenId>, ModelError> {
        Ok(Vec::new())
    }

    fn observe(&self, state: &mut Vec<TokenId>, token: TokenId) -> Result<(), ModelError> {
        if token.index() >= TOY_VOCAB {
            return Err(ModelError::TokenOutOfRange(token.0, TOY_VOCAB));
        }
        state.push(token);
        Ok(())
    }

    fn next_logits(&self, state: &Vec<TokenId>) -> Vec<f64> {
        self.next_probs(state).iter().map(|p| p.ln()).collect()
    }

    fn choice_probs(&self, state: &Vec<TokenId>) -> Result<[Vec<f64>; NUM_OUTPUTS], ModelError> {
        Ok(self.output_probs(state))
    }
}
