use crate::compute::{Graph, NodeId, Tensor};
use crate::corpus::TokenId;

use super::{EncodedExample, ModelError, NegotiationModel, NUM_OUTPUTS};

/// Loss nodes for one example.
#[derive(Debug, Clone, Copy)]
pub struct ExampleLoss {
    /// `−Σ_t log p(x_t | x_<t, g)`
    pub token_nll: NodeId,
    /// `−Σ_j log p(o_j | x, g)`; absent for non-trainable outputs.
    pub output_nll: Option<NodeId>,
    pub n_tokens: usize,
}

pub(crate) struct LmTrace {
    pub goal: NodeId,
    pub states: Vec<NodeId>,
    pub log_probs: Vec<NodeId>,
}

impl NegotiationModel {
    pub fn goal_node(&self, g: &mut Graph<'_>, goal: &[u32]) -> Result<NodeId, ModelError> {
        let ids = self.goal_token(goal)?;
        let p = self.params();
        let emb = g.param(p.goal_emb);
        let mut h = g.input(Tensor::zeros(&[self.cfg.goal_hidden]));
        for id in ids {
            let x = g.gather(emb, id)?;
            h = g.gru(p.goal_gru, h, x)?;
        }
        Ok(h)
    }

    /// Teacher-forces `tokens`, returning the dialogue states `h_0..h_T`
    /// and the log-distribution over each next token.
    pub(crate) fn lm_trace(
        &self,
        g: &mut Graph<'_>,
        goal: &[u32],
        tokens: &[TokenId],
    ) -> Result<LmTrace, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyDialogue);
        }
        self.check_tokens(tokens)?;
        let p = *self.params();
        let hg = self.goal_node(g, goal)?;
        let emb = g.param(p.word_emb);
        let proj = g.param(p.lm_proj);
        let mut h = g.param(p.lm_h0);
        let mut prev = TokenId::PAD;
        let mut states = Vec::with_capacity(tokens.len());
        let mut log_probs = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let e = g.gather(emb, prev.index())?;
            let inp = g.concat(&[e, hg])?;
            h = g.gru(p.lm_gru, h, inp)?;
            let q = g.matmul(proj, h)?;
            let logits = g.matmul(emb, q)?;
            log_probs.push(g.log_softmax(logits)?);
            states.push(h);
            prev = tok;
        }
        Ok(LmTrace {
            goal: hg,
            states,
            log_probs,
        })
    }

    /// Output-classifier log-distributions given a teacher-forced trace.
    pub(crate) fn choice_nodes(
        &self,
        g: &mut Graph<'_>,
        tokens: &[TokenId],
        trace: &LmTrace,
    ) -> Result<[NodeId; NUM_OUTPUTS], ModelError> {
        if tokens.len() != trace.states.len() {
            return Err(ModelError::LengthMismatch(tokens.len(), trace.states.len()));
        }
        let p = *self.params();
        let emb = g.param(p.word_emb);
        let n = tokens.len();
        let mut inputs = Vec::with_capacity(n);
        for (tok, &h) in tokens.iter().zip(&trace.states) {
            let e = g.gather(emb, tok.index())?;
            inputs.push(g.concat(&[e, h])?);
        }
        let zero = g.input(Tensor::zeros(&[self.cfg.output_hidden]));
        let mut fwd = Vec::with_capacity(n);
        let mut h = zero;
        for &x in &inputs {
            h = g.gru(p.sel_fwd, h, x)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; n];
        let mut h = zero;
        for t in (0..n).rev() {
            h = g.gru(p.sel_bwd, h, inputs[t])?;
            bwd[t] = h;
        }
        let w_in = g.param(p.attn_in);
        let w_hid = g.param(p.attn_hidden);
        let w_score = g.param(p.attn_score);
        let mut scores = Vec::with_capacity(n);
        for t in 0..n {
            let ho = g.concat(&[bwd[t], fwd[t]])?;
            let a = g.matmul(w_in, ho)?;
            let a = g.tanh(a)?;
            let ha = g.matmul(w_hid, a)?;
            scores.push(g.matmul(w_score, ha)?);
        }
        let scores = g.concat(&scores)?;
        let alpha = g.softmax(scores)?;
        let states = g.stack(&trace.states)?;
        let ctx = g.matmul(alpha, states)?;
        let joined = g.concat(&[trace.goal, ctx])?;
        let ws = g.param(p.sel_combine);
        let hs = g.matmul(ws, joined)?;
        let hs = g.tanh(hs)?;
        let mut out = [hs; NUM_OUTPUTS];
        for (i, slot) in out.iter_mut().enumerate() {
            let w = g.param(p.classifiers[i]);
            let logits = g.matmul(w, hs)?;
            *slot = g.log_softmax(logits)?;
        }
        Ok(out)
    }

    /// Token and output losses for one example.
    pub fn example_loss(
        &self,
        g: &mut Graph<'_>,
        ex: &EncodedExample,
    ) -> Result<ExampleLoss, ModelError> {
        let trace = self.lm_trace(g, &ex.goal, &ex.tokens)?;
        let mut picks = Vec::with_capacity(ex.tokens.len());
        for (lp, tok) in trace.log_probs.iter().zip(&ex.tokens) {
            picks.push(g.pick(*lp, tok.index())?);
        }
        let all = g.concat(&picks)?;
        let s = g.sum(all)?;
        let token_nll = g.scale(s, -1.0)?;

        let target = ex
            .output
            .filter(|o| o.iter().all(|&c| c <= self.cfg.max_count));
        let output_nll = match target {
            Some(o) => {
                let dists = self.choice_nodes(g, &ex.tokens, &trace)?;
                let mut picks = Vec::with_capacity(NUM_OUTPUTS);
                for (d, &c) in dists.iter().zip(&o) {
                    picks.push(g.pick(*d, c as usize)?);
                }
                let all = g.concat(&picks)?;
                let s = g.sum(all)?;
                Some(g.scale(s, -1.0)?)
            }
            None => None,
        };
        Ok(ExampleLoss {
            token_nll,
            output_nll,
            n_tokens: ex.tokens.len(),
        })
    }

    pub fn sequence_nll_node(
        &self,
        g: &mut Graph<'_>,
        ex: &EncodedExample,
    ) -> Result<NodeId, ModelError> {
        let trace = self.lm_trace(g, &ex.goal, &ex.tokens)?;
        let mut picks = Vec::with_capacity(ex.tokens.len());
        for (lp, tok) in trace.log_probs.iter().zip(&ex.tokens) {
            picks.push(g.pick(*lp, tok.index())?);
        }
        let all = g.concat(&picks)?;
        let s = g.sum(all)?;
        Ok(g.scale(s, -1.0)?)
    }

    /// Token loss plus `alpha` times the output loss. The output term is
    /// dropped for examples without a trainable output.
    pub fn total_loss_node(
        &self,
        g: &mut Graph<'_>,
        ex: &EncodedExample,
        alpha: f64,
    ) -> Result<NodeId, ModelError> {
        if alpha < 0.0 {
            return Err(ModelError::NegativeAlpha(alpha));
        }
        let l = self.example_loss(g, ex)?;
        match l.output_nll {
            Some(o) if alpha > 0.0 => {
                let w = g.scale(o, alpha)?;
                Ok(g.add(l.token_nll, w)?)
            }
            _ => Ok(l.token_nll),
        }
    }

    /// `−Σ_t weight_t · log p(x_t | x_<t, g)`, skipping zero weights. The
    /// REINFORCE surrogate uses per-token returns as weights.
    pub fn weighted_nll_node(
        &self,
        g: &mut Graph<'_>,
        goal: &[u32],
        tokens: &[TokenId],
        weights: &[f64],
    ) -> Result<NodeId, ModelError> {
        if weights.len() != tokens.len() {
            return Err(ModelError::LengthMismatch(tokens.len(), weights.len()));
        }
        let trace = self.lm_trace(g, goal, tokens)?;
        let mut terms = Vec::new();
        for ((lp, tok), &w) in trace.log_probs.iter().zip(tokens).zip(weights) {
            if w != 0.0 {
                let lp = g.pick(*lp, tok.index())?;
                terms.push(g.scale(lp, -w)?);
            }
        }
        if terms.is_empty() {
            return Ok(g.input(Tensor::scalar(0.0)));
        }
        let all = g.concat(&terms)?;
        Ok(g.sum(all)?)
    }
}
