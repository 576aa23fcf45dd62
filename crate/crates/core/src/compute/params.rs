use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;

use super::{ComputeError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameters with gradient accumulators, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, ParamId>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize]) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.values.push(Tensor::zeros(shape));
        self.grads.push(Tensor::zeros(shape));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        self.accumulate_scaled(grads, 1.0);
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients, scale: f64) {
        for (acc, g) in self.grads.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, v) in acc.data_mut().iter_mut().zip(g) {
                    *a += scale * v;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    /// Rescales all gradients jointly so their global L2 norm is at most
    /// `threshold`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, threshold: f64) -> Result<f64, ComputeError> {
        if threshold <= 0.0 || !threshold.is_finite() {
            return Err(ComputeError::InvalidThreshold(threshold));
        }
        let norm = self.grad_norm();
        if !norm.is_finite() {
            return Err(ComputeError::NonFinite("gradient norm".into()));
        }
        if norm > threshold {
            let s = threshold / norm;
            for g in &mut self.grads {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        Ok(norm)
    }

    /// Fills every value uniformly in `[-range, range]`.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, range: f64, rng: &mut R) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = rng.gen_range(-range..=range);
            }
        }
    }

    /// `value -= lr * grad` for every parameter.
    pub fn sgd_step(&mut self, lr: f64) {
        for (v, g) in self.values.iter_mut().zip(&self.grads) {
            for (x, d) in v.data_mut().iter_mut().zip(g.data()) {
                *x -= lr * d;
            }
        }
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Overwrites all values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), ComputeError> {
        if self.names != other.names {
            return Err(ComputeError::Checkpoint("parameter layout differs".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(ComputeError::Checkpoint("parameter shape differs".into()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (n, v) in self.names.iter().zip(&self.values) {
            eat(n.as_bytes());
            for d in v.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for x in v.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Text checkpoint: `header`, then per tensor a `name ndims d1..dk`
    /// line and a line of values with 17 significant digits.
    pub fn to_checkpoint(&self, header: &str) -> String {
        let mut s = String::new();
        s.push_str(header);
        s.push('\n');
        for (n, v) in self.names.iter().zip(&self.values) {
            let _ = write!(s, "{} {}", n, v.rank());
            for d in v.shape() {
                let _ = write!(s, " {d}");
            }
            s.push('\n');
            let mut first = true;
            for x in v.data() {
                if !first {
                    s.push(' ');
                }
                first = false;
                let _ = write!(s, "{x:.16e}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses a checkpoint, returning the header line and the store.
    pub fn from_checkpoint(text: &str) -> Result<(String, ParamStore), ComputeError> {
        let bad = |m: &str| ComputeError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty checkpoint"))?.to_string();
        let mut store = ParamStore::new();
        while let Some(line) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.split_whitespace();
            let name = f.next().ok_or_else(|| bad("missing tensor name"))?;
            let ndims: usize = f
                .next()
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| bad("missing ndims"))?;
            let shape: Vec<usize> = f
                .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                .collect::<Result<_, _>>()?;
            if shape.len() != ndims {
                return Err(bad(&format!("tensor {name}: expected {ndims} dims")));
            }
            let values_line = lines.next().ok_or_else(|| bad("missing tensor values"))?;
            let data: Vec<f64> = values_line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad("bad value")))
                .collect::<Result<_, _>>()?;
            let t = Tensor::new(shape.clone(), data)?;
            let id = store.add(name, &shape);
            store.values[id.0] = t;
        }
        Ok((header, store))
    }
}
