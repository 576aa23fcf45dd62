//! Dense `f64` tensors, a reverse-mode tape, parameter storage and a
//! finite-difference gradient checker.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, GruParams, NodeId};
pub(crate) use graph::gru_forward;
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{
    dot, log_softmax_in_place, matvec, matvec_t_acc, outer_acc, sigmoid, softmax_in_place, Tensor,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("reduction over an empty axis")]
    EmptyAxis,
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("clip threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Registers a GRU cell's stacked parameters under `prefix`.
pub fn add_gru(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize) -> GruParams {
    GruParams {
        w: store.add(&format!("{prefix}.w"), &[3 * hidden, input]),
        u: store.add(&format!("{prefix}.u"), &[3 * hidden, hidden]),
        b: store.add(&format!("{prefix}.b"), &[3 * hidden]),
    }
}

/// The GRU step built from primitive ops only. Used to cross-check the
/// fused node.
pub fn gru_cell_composed(
    g: &mut Graph<'_>,
    p: GruParams,
    h: NodeId,
    x: NodeId,
) -> Result<NodeId, ComputeError> {
    let hd = g.value(h).len();
    let w = g.param(p.w);
    let u = g.param(p.u);
    let b = g.param(p.b);
    let wx = g.matmul(w, x)?;
    let pre = g.add(wx, b)?;
    let gate = |g: &mut Graph<'_>, k: usize| g.slice(pre, k * hd, hd);
    let (pz, pr, ph) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?);
    let uh = g.matmul(u, h)?;
    let (uz, ur) = (g.slice(uh, 0, hd)?, g.slice(uh, hd, hd)?);
    let az = g.add(pz, uz)?;
    let z = g.sigmoid(az)?;
    let ar = g.add(pr, ur)?;
    let r = g.sigmoid(ar)?;
    let rh = g.mul(r, h)?;
    // U_h (r ⊙ h): last third of U applied to r ⊙ h.
    let u_rh = g.matmul(u, rh)?;
    let uhr = g.slice(u_rh, 2 * hd, hd)?;
    let ac = g.add(ph, uhr)?;
    let cand = g.tanh(ac)?;
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

/// Below this magnitude central differences at `ε ≈ 1e-5` are dominated by
/// rounding in the loss (about `1e-10` absolute for losses of order 10), so
/// such entries are compared on this absolute scale instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Maximum relative error between backward gradients and central
/// differences, over every parameter element:
/// `|a − n| / max(GRAD_CHECK_FLOOR, |a| + |n|)`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> Result<f64, ComputeError>
where
    F: for<'s> Fn(&mut Graph<'s>) -> Result<NodeId, ComputeError>,
{
    grad_check_with(store, eps, f, |_| {})
}

pub(crate) fn grad_check_with<F, C>(
    store: &mut ParamStore,
    eps: f64,
    f: F,
    configure: C,
) -> Result<f64, ComputeError>
where
    F: for<'s> Fn(&mut Graph<'s>) -> Result<NodeId, ComputeError>,
    C: for<'a, 's> Fn(&'a mut Graph<'s>),
{
    let analytic = {
        let mut g = Graph::new(store);
        configure(&mut g);
        let loss = f(&mut g)?;
        let l = g.value(loss).item()?;
        if !l.is_finite() {
            return Err(ComputeError::NonFinite("loss".into()));
        }
        g.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64, ComputeError> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        let l = g.value(loss).item()?;
        if l.is_finite() {
            Ok(l)
        } else {
            Err(ComputeError::NonFinite("loss".into()))
        }
    };
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - eps;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
