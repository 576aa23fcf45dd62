use rand::Rng;

use crate::compute::{dot, gru_forward, log_softmax_in_place, matvec, softmax_in_place, GruParams};
use crate::corpus::TokenId;

use super::{EncodedExample, ModelError, NegotiationModel, NUM_OUTPUTS};

/// Running state of one reader of a dialogue: the goal encoding, the tokens
/// seen so far with their dialogue states, and the state that will predict
/// the next token.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    goal: Vec<f64>,
    next_h: Vec<f64>,
    tokens: Vec<TokenId>,
    states: Vec<Vec<f64>>,
}

impl ModelState {
    pub fn goal_encoding(&self) -> &[f64] {
        &self.goal
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// `h_t` for every consumed token.
    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Output-classifier distributions at the end of a dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceDistribution {
    /// One distribution per output position; the last class is no-agreement.
    pub probs: [Vec<f64>; NUM_OUTPUTS],
    /// Attention weights over dialogue tokens.
    pub attention: Vec<f64>,
}

impl ChoiceDistribution {
    pub fn prob(&self, position: usize, class: usize) -> f64 {
        self.probs[position].get(class).copied().unwrap_or(0.0)
    }
}

fn gru_step(m: &NegotiationModel, p: GruParams, h: &[f64], x: &[f64]) -> Vec<f64> {
    let s = m.store();
    gru_forward(
        s.value(p.w).data(),
        s.value(p.u).data(),
        s.value(p.b).data(),
        h,
        x,
    )
    .0
}

/// `softmax(logits / temperature)`; a non-positive temperature gives the
/// one-hot argmax (first maximum on ties).
pub fn temperature_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        let mut out = vec![0.0; logits.len()];
        if !out.is_empty() {
            out[best] = 1.0;
        }
        return out;
    }
    let mut p: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut p);
    p
}

/// Inverse-CDF draw from a normalised distribution.
pub fn sample_token<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the final cumulative sum.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl NegotiationModel {
    /// `h^g` for a six-integer goal.
    pub fn encode_goal(&self, goal: &[u32]) -> Result<Vec<f64>, ModelError> {
        let ids = self.goal_token(goal)?;
        let p = self.params();
        let emb = self.store().value(p.goal_emb);
        let mut h = vec![0.0; self.cfg.goal_hidden];
        for id in ids {
            h = gru_step(self, p.goal_gru, &h, emb.row(id));
        }
        Ok(h)
    }

    fn lm_input(&self, prev: TokenId, goal: &[f64]) -> Vec<f64> {
        let emb = self.store().value(self.params().word_emb);
        let mut x = Vec::with_capacity(self.cfg.word_embed + goal.len());
        x.extend_from_slice(emb.row(prev.index()));
        x.extend_from_slice(goal);
        x
    }

    /// State before any dialogue token has been read.
    pub fn start(&self, goal: &[u32]) -> Result<ModelState, ModelError> {
        let hg = self.encode_goal(goal)?;
        let h0 = self.store().value(self.params().lm_h0).data().to_vec();
        let next_h = gru_step(self, self.params().lm_gru, &h0, &self.lm_input(TokenId::PAD, &hg));
        Ok(ModelState {
            goal: hg,
            next_h,
            tokens: Vec::new(),
            states: Vec::new(),
        })
    }

    /// Consumes one token.
    pub fn push(&self, state: &mut ModelState, token: TokenId) -> Result<(), ModelError> {
        self.check_tokens(&[token])?;
        let h = std::mem::take(&mut state.next_h);
        state.next_h = gru_step(self, self.params().lm_gru, &h, &self.lm_input(token, &state.goal));
        state.states.push(h);
        state.tokens.push(token);
        Ok(())
    }

    /// Unnormalised scores for the next token, `E · (P h)`.
    pub fn next_logits(&self, state: &ModelState) -> Vec<f64> {
        let p = self.params();
        let proj = self.store().value(p.lm_proj);
        let mut q = vec![0.0; self.cfg.word_embed];
        matvec(proj.data(), proj.rows(), proj.cols(), &state.next_h, &mut q);
        let emb = self.store().value(p.word_emb);
        let mut logits = vec![0.0; self.cfg.vocab_size];
        matvec(emb.data(), emb.rows(), emb.cols(), &q, &mut logits);
        logits
    }

    /// Output distributions after reading the dialogue in `state`.
    pub fn predict_choice(&self, state: &ModelState) -> Result<ChoiceDistribution, ModelError> {
        let n = state.tokens.len();
        if n == 0 {
            return Err(ModelError::EmptyDialogue);
        }
        let p = *self.params();
        let s = self.store();
        let emb = s.value(p.word_emb);
        let inputs: Vec<Vec<f64>> = state
            .tokens
            .iter()
            .zip(&state.states)
            .map(|(t, h)| {
                let mut x = emb.row(t.index()).to_vec();
                x.extend_from_slice(h);
                x
            })
            .collect();
        let oh = self.cfg.output_hidden;
        let mut fwd = Vec::with_capacity(n);
        let mut h = vec![0.0; oh];
        for x in &inputs {
            h = gru_step(self, p.sel_fwd, &h, x);
            fwd.push(h.clone());
        }
        let mut bwd = vec![Vec::new(); n];
        let mut h = vec![0.0; oh];
        for t in (0..n).rev() {
            h = gru_step(self, p.sel_bwd, &h, &inputs[t]);
            bwd[t] = h.clone();
        }

        let w_in = s.value(p.attn_in);
        let w_hid = s.value(p.attn_hidden);
        let w_score = s.value(p.attn_score).data();
        let ah = self.cfg.attn_hidden;
        let mut scores = Vec::with_capacity(n);
        let mut ho = vec![0.0; 2 * oh];
        let mut a = vec![0.0; ah];
        let mut ha = vec![0.0; ah];
        for t in 0..n {
            ho[..oh].copy_from_slice(&bwd[t]);
            ho[oh..].copy_from_slice(&fwd[t]);
            matvec(w_in.data(), ah, 2 * oh, &ho, &mut a);
            a.iter_mut().for_each(|v| *v = v.tanh());
            matvec(w_hid.data(), ah, ah, &a, &mut ha);
            scores.push(dot(w_score, &ha));
        }
        softmax_in_place(&mut scores);

        let lh = self.cfg.lm_hidden;
        let mut joined = state.goal.clone();
        let mut ctx = vec![0.0; lh];
        for (w, h) in scores.iter().zip(&state.states) {
            for (c, v) in ctx.iter_mut().zip(h) {
                *c += w * v;
            }
        }
        joined.extend_from_slice(&ctx);
        let wc = s.value(p.sel_combine);
        let mut hs = vec![0.0; self.cfg.sel_hidden];
        matvec(wc.data(), wc.rows(), wc.cols(), &joined, &mut hs);
        hs.iter_mut().for_each(|v| *v = v.tanh());

        let probs = std::array::from_fn(|i| {
            let w = s.value(p.classifiers[i]);
            let mut out = vec![0.0; w.rows()];
            matvec(w.data(), w.rows(), w.cols(), &hs, &mut out);
            softmax_in_place(&mut out);
            out
        });
        Ok(ChoiceDistribution {
            probs,
            attention: scores,
        })
    }

    /// Reads `tokens` from a fresh state and returns `−Σ log p(x_t)`
    /// together with the final state.
    pub fn score_tokens(
        &self,
        goal: &[u32],
        tokens: &[TokenId],
    ) -> Result<(f64, ModelState), ModelError> {
        let mut st = self.start(goal)?;
        let mut nll = 0.0;
        for &t in tokens {
            self.check_tokens(&[t])?;
            let mut lp = self.next_logits(&st);
            log_softmax_in_place(&mut lp);
            nll -= lp[t.index()];
            self.push(&mut st, t)?;
        }
        Ok((nll, st))
    }

    /// Token NLL and, when the example has a trainable output, output NLL.
    pub fn example_nll(&self, ex: &EncodedExample) -> Result<(f64, Option<f64>), ModelError> {
        if ex.tokens.is_empty() {
            return Err(ModelError::EmptyDialogue);
        }
        let (nll, st) = self.score_tokens(&ex.goal, &ex.tokens)?;
        let target = ex
            .output
            .filter(|o| o.iter().all(|&c| c <= self.cfg.max_count));
        let out = match target {
            Some(o) => {
                let d = self.predict_choice(&st)?;
                Some(
                    o.iter()
                        .enumerate()
                        .map(|(i, &c)| -d.probs[i][c as usize].ln())
                        .sum(),
                )
            }
            None => None,
        };
        Ok((nll, out))
    }
}
