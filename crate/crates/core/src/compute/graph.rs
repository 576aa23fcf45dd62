//! Tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.
//! Parameter nodes read straight from the borrowed [`ParamStore`].

use super::tensor::{
    dot, log_softmax_in_place, matvec, matvec_t_acc, outer_acc, sigmoid, softmax_in_place,
};
use super::{ComputeError, Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Parameters of one GRU cell, gates stacked in `z, r, h` order:
/// `w` is `3H × I`, `u` is `3H × H`, `b` is `3H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

#[derive(Debug)]
struct GruCache {
    w: NodeId,
    u: NodeId,
    b: NodeId,
    h: NodeId,
    x: NodeId,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    Stack(Vec<NodeId>),
    Slice(NodeId, usize),
    Gather(NodeId, usize),
    Pick(NodeId, usize),
    Gru(Box<GruCache>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    #[cfg(test)]
    pub(crate) corrupt_tanh_backward: bool,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> ComputeError {
    ComputeError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            #[cfg(test)]
            corrupt_tanh_backward: false,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match self.nodes[id.0].op {
            Op::Param(p) => self.store.value(p),
            _ => &self.nodes[id.0].value,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, ComputeError> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(ComputeError::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value: t,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Node for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, p: ParamId) -> NodeId {
        if let Some(id) = self.param_nodes[p.0] {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param(p),
            value: Tensor::zeros(&[0]),
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes[p.0] = Some(id);
        id
    }

    /// Matrix/vector product: `[m,k]·[k]`, `[k]·[k,n]`, `[m,k]·[k,n]` or
    /// the dot product `[k]·[k]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let out = match (sa.len(), sb.len()) {
            (2, 1) if sa[1] == sb[0] => {
                let mut o = vec![0.0; sa[0]];
                matvec(ta.data(), sa[0], sa[1], tb.data(), &mut o);
                Tensor::vector(o)
            }
            (1, 2) if sa[0] == sb[0] => {
                let mut o = vec![0.0; sb[1]];
                matvec_t_acc(tb.data(), sb[0], sb[1], ta.data(), &mut o);
                Tensor::vector(o)
            }
            (2, 2) if sa[1] == sb[0] => {
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut o = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ta.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            o[i * n + j] += av * tb.data()[p * n + j];
                        }
                    }
                }
                Tensor::matrix(m, n, o)?
            }
            (1, 1) if sa[0] == sb[0] => Tensor::scalar(dot(ta.data(), tb.data())),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        self.push(Op::MatMul(a, b), out)
    }

    fn zip_with(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, ComputeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("same length")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ComputeError> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, ComputeError> {
        let v = self.map(a, |x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, ComputeError> {
        let v = self.map(a, sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, ComputeError> {
        let v = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, ComputeError> {
        let v = self.map(a, f64::ln);
        self.push(Op::Log(a), v)
    }

    fn vector_of(&self, name: &str, a: NodeId) -> Result<Vec<f64>, ComputeError> {
        let t = self.value(a);
        if t.rank() != 1 {
            return Err(ComputeError::Shape(format!("{name} expects a vector, got {:?}", t.shape())));
        }
        if t.is_empty() {
            return Err(ComputeError::EmptyAxis);
        }
        Ok(t.data().to_vec())
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, ComputeError> {
        let mut v = self.vector_of("softmax", a)?;
        softmax_in_place(&mut v);
        self.push(Op::Softmax(a), Tensor::vector(v))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, ComputeError> {
        let mut v = self.vector_of("log_softmax", a)?;
        log_softmax_in_place(&mut v);
        self.push(Op::LogSoftmax(a), Tensor::vector(v))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, ComputeError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Joins vectors (or scalars) end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, ComputeError> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 1 {
                return Err(ComputeError::Shape(format!("concat of {:?}", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[NodeId]) -> Result<NodeId, ComputeError> {
        let first = rows.first().ok_or(ComputeError::EmptyAxis)?;
        let width = self.value(*first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.len() != width {
                return Err(shape_err("stack", &[width], t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let m = Tensor::matrix(rows.len(), width, data)?;
        self.push(Op::Stack(rows.to_vec()), m)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, ComputeError> {
        let t = self.value(a);
        if t.rank() != 1 || start + len > t.len() {
            return Err(ComputeError::Shape(format!(
                "slice {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let v = Tensor::vector(t.data()[start..start + len].to_vec());
        self.push(Op::Slice(a, start), v)
    }

    /// Row `row` of a matrix (embedding lookup).
    pub fn gather(&mut self, a: NodeId, row: usize) -> Result<NodeId, ComputeError> {
        let t = self.value(a);
        if t.rank() != 2 || row >= t.rows() {
            return Err(ComputeError::Shape(format!("gather row {row} of {:?}", t.shape())));
        }
        let v = Tensor::vector(t.row(row).to_vec());
        self.push(Op::Gather(a, row), v)
    }

    /// Element `idx` of a vector as a scalar.
    pub fn pick(&mut self, a: NodeId, idx: usize) -> Result<NodeId, ComputeError> {
        let t = self.value(a);
        if t.rank() != 1 || idx >= t.len() {
            return Err(ComputeError::Shape(format!("pick {idx} of {:?}", t.shape())));
        }
        let v = Tensor::scalar(t.data()[idx]);
        self.push(Op::Pick(a, idx), v)
    }

    /// One GRU step as a single fused node:
    /// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
    /// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
    pub fn gru(&mut self, p: GruParams, h: NodeId, x: NodeId) -> Result<NodeId, ComputeError> {
        let w = self.param(p.w);
        let u = self.param(p.u);
        let b = self.param(p.b);
        let (tw, tu, tb, th, tx) = (
            self.value(w),
            self.value(u),
            self.value(b),
            self.value(h),
            self.value(x),
        );
        let hd = th.len();
        let id = tx.len();
        if tw.shape() != [3 * hd, id] || tu.shape() != [3 * hd, hd] || tb.shape() != [3 * hd] {
            return Err(ComputeError::Shape(format!(
                "gru: w {:?}, u {:?}, b {:?} for hidden {hd} input {id}",
                tw.shape(),
                tu.shape(),
                tb.shape()
            )));
        }
        let (hn, cache) = gru_forward(tw.data(), tu.data(), tb.data(), th.data(), tx.data());
        let cache = GruCache {
            w,
            u,
            b,
            h,
            x,
            z: cache.z,
            r: cache.r,
            cand: cache.cand,
            rh: cache.rh,
        };
        self.push(Op::Gru(Box::new(cache)), Tensor::vector(hn))
    }

    /// Reverse sweep from a scalar `loss`; returns parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, ComputeError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(ComputeError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'g mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Input => {}
                Op::Param(p) => out.grads[p.0] = Some(g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
                    match (sa.len(), sb.len()) {
                        (2, 1) => {
                            outer_acc(acc(&mut grads, *a, ta.len()), &g, tb.data());
                            matvec_t_acc(ta.data(), sa[0], sa[1], &g, acc(&mut grads, *b, tb.len()));
                        }
                        (1, 2) => {
                            {
                                let ga = acc(&mut grads, *a, ta.len());
                                for (k, o) in ga.iter_mut().enumerate() {
                                    *o += dot(tb.row(k), &g);
                                }
                            }
                            outer_acc(acc(&mut grads, *b, tb.len()), ta.data(), &g);
                        }
                        (2, 2) => {
                            let (m, k, n) = (sa[0], sa[1], sb[1]);
                            {
                                let ga = acc(&mut grads, *a, ta.len());
                                for r in 0..m {
                                    for p in 0..k {
                                        ga[r * k + p] += dot(&g[r * n..(r + 1) * n], tb.row(p));
                                    }
                                }
                            }
                            let gb = acc(&mut grads, *b, tb.len());
                            for r in 0..m {
                                outer_acc(gb, &ta.data()[r * k..(r + 1) * k], &g[r * n..(r + 1) * n]);
                            }
                        }
                        _ => {
                            let s = g[0];
                            for (o, v) in acc(&mut grads, *a, ta.len()).iter_mut().zip(tb.data()) {
                                *o += s * v;
                            }
                            for (o, v) in acc(&mut grads, *b, tb.len()).iter_mut().zip(ta.data()) {
                                *o += s * v;
                            }
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    for (o, v) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += v;
                    }
                    for (o, v) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *o += sign * v;
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    for ((o, v), bv) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(tb.data()) {
                        *o += v * bv;
                    }
                    for ((o, v), av) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g).zip(ta.data()) {
                        *o += v * av;
                    }
                }
                Op::Scale(a, s) => {
                    for (o, v) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *o += s * v;
                    }
                }
                Op::Sigmoid(a) => {
                    for ((o, v), yv) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *o += v * yv * (1.0 - yv);
                    }
                }
                Op::Tanh(a) => {
                    #[cfg(test)]
                    let corrupt = self.corrupt_tanh_backward;
                    #[cfg(not(test))]
                    let corrupt = false;
                    for ((o, v), yv) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *o += if corrupt { v * (1.0 - yv) } else { v * (1.0 - yv * yv) };
                    }
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    for ((o, v), xv) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(x) {
                        *o += v / xv;
                    }
                }
                Op::Softmax(a) => {
                    let s: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    for ((o, gv), yv) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *o += yv * (gv - s);
                    }
                }
                Op::LogSoftmax(a) => {
                    let s: f64 = g.iter().sum();
                    for ((o, gv), yv) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *o += gv - yv.exp() * s;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    for o in acc(&mut grads, *a, n).iter_mut() {
                        *o += g[0];
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        for (o, v) in acc(&mut grads, *p, n).iter_mut().zip(&g[off..off + n]) {
                            *o += v;
                        }
                        off += n;
                    }
                }
                Op::Stack(rows) => {
                    let w = node.value.cols();
                    for (r, p) in rows.iter().enumerate() {
                        for (o, v) in acc(&mut grads, *p, w).iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *o += v;
                        }
                    }
                }
                Op::Slice(a, start) => {
                    let n = self.value(*a).len();
                    let ga = acc(&mut grads, *a, n);
                    for (k, v) in g.iter().enumerate() {
                        ga[start + k] += v;
                    }
                }
                Op::Gather(a, row) => {
                    let t = self.value(*a);
                    let w = t.cols();
                    let ga = acc(&mut grads, *a, t.len());
                    for (k, v) in g.iter().enumerate() {
                        ga[row * w + k] += v;
                    }
                }
                Op::Pick(a, idx) => {
                    let n = self.value(*a).len();
                    acc(&mut grads, *a, n)[*idx] += g[0];
                }
                Op::Gru(c) => self.gru_backward(c, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn gru_backward(&self, c: &GruCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tw, tu, th, tx) = (
            self.value(c.w),
            self.value(c.u),
            self.value(c.h),
            self.value(c.x),
        );
        let hd = th.len();
        let id = tx.len();
        let h = th.data();
        let u = tu.data();

        let mut dpre = vec![0.0; 3 * hd];
        let mut dh = vec![0.0; hd];
        for k in 0..hd {
            let dz = g[k] * (c.cand[k] - h[k]);
            let dcand = g[k] * c.z[k];
            dh[k] += g[k] * (1.0 - c.z[k]);
            dpre[k] = dz * c.z[k] * (1.0 - c.z[k]);
            dpre[2 * hd + k] = dcand * (1.0 - c.cand[k] * c.cand[k]);
        }
        // through U_h (r ⊙ h)
        let mut drh = vec![0.0; hd];
        matvec_t_acc(&u[2 * hd * hd..], hd, hd, &dpre[2 * hd..], &mut drh);
        for k in 0..hd {
            let dr = drh[k] * h[k];
            dh[k] += drh[k] * c.r[k];
            dpre[hd + k] = dr * c.r[k] * (1.0 - c.r[k]);
        }
        matvec_t_acc(&u[..2 * hd * hd], 2 * hd, hd, &dpre[..2 * hd], &mut dh);

        {
            let gu = grads[c.u.0].get_or_insert_with(|| vec![0.0; 3 * hd * hd]);
            outer_acc(&mut gu[..2 * hd * hd], &dpre[..2 * hd], h);
            outer_acc(&mut gu[2 * hd * hd..], &dpre[2 * hd..], &c.rh);
        }
        {
            let gw = grads[c.w.0].get_or_insert_with(|| vec![0.0; 3 * hd * id]);
            outer_acc(gw, &dpre, tx.data());
        }
        {
            let gb = grads[c.b.0].get_or_insert_with(|| vec![0.0; 3 * hd]);
            for (o, v) in gb.iter_mut().zip(&dpre) {
                *o += v;
            }
        }
        {
            let gx = grads[c.x.0].get_or_insert_with(|| vec![0.0; id]);
            matvec_t_acc(tw.data(), 3 * hd, id, &dpre, gx);
        }
        let gh = grads[c.h.0].get_or_insert_with(|| vec![0.0; hd]);
        for (o, v) in gh.iter_mut().zip(&dh) {
            *o += v;
        }
    }
}

pub(crate) struct GruForwardCache {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub cand: Vec<f64>,
    pub rh: Vec<f64>,
}

/// Plain GRU step over slices, shared by the tape and the inference path.
pub(crate) fn gru_forward(
    w: &[f64],
    u: &[f64],
    b: &[f64],
    h: &[f64],
    x: &[f64],
) -> (Vec<f64>, GruForwardCache) {
    let hd = h.len();
    let id = x.len();
    let mut pre = vec![0.0; 3 * hd];
    matvec(w, 3 * hd, id, x, &mut pre);
    for (p, bv) in pre.iter_mut().zip(b) {
        *p += bv;
    }
    let mut uh = vec![0.0; 2 * hd];
    matvec(&u[..2 * hd * hd], 2 * hd, hd, h, &mut uh);
    let z: Vec<f64> = (0..hd).map(|k| sigmoid(pre[k] + uh[k])).collect();
    let r: Vec<f64> = (0..hd).map(|k| sigmoid(pre[hd + k] + uh[hd + k])).collect();
    let rh: Vec<f64> = (0..hd).map(|k| r[k] * h[k]).collect();
    let mut cand = vec![0.0; hd];
    matvec(&u[2 * hd * hd..], hd, hd, &rh, &mut cand);
    for k in 0..hd {
        cand[k] = (cand[k] + pre[2 * hd + k]).tanh();
    }
    let hn: Vec<f64> = (0..hd).map(|k| h[k] + z[k] * (cand[k] - h[k])).collect();
    (hn, GruForwardCache { z, r, cand, rh })
}
