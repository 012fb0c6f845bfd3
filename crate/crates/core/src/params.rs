//! Named parameter storage and gradient buffers.
//!
//! Every learnable tensor lives in one [`ParamStore`] under a unique dotted
//! name (`"gates.visual.delta.weight"`). Layers hold [`ParamId`] handles into
//! the store. Gradients mirror the store slot for slot: dense parameters get
//! a flat buffer allocated on first touch, embedding tables accumulate sparse
//! per-row gradients so a batch only pays for the rows it looked up.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// Row-major matrix of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn normal<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { rows, cols, data }
    }

    /// Glorot-uniform initialisation for a weight of shape `out × in`.
    pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How gradients for a parameter are accumulated and applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Dense,
    /// Embedding table: sparse row gradients, lazy per-row optimizer updates.
    Table,
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    kind: ParamKind,
    tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, kind, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> + '_ {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.tensor.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
enum GradSlot {
    Dense(Option<Vec<f64>>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

/// Gradient accumulator shaped after a [`ParamStore`].
///
/// In deferred mode, weight outer products and transposed products are
/// queued and applied by [`Grads::flush`] in one row-blocked sweep, so a
/// chunk of examples touches each large weight matrix once instead of once
/// per example. Queued work is applied in push order, so results depend only
/// on the sequence of calls.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<GradSlot>,
    shapes: Vec<(usize, usize)>,
    deferred: bool,
    outer: BTreeMap<usize, Vec<(Vec<f64>, Vec<f64>, usize)>>,
    shared: BTreeMap<(usize, usize), (Vec<f64>, Vec<f64>)>,
    transposed: BTreeMap<(usize, usize, usize, usize), Vec<f64>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        let slots = store
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::Dense => GradSlot::Dense(None),
                ParamKind::Table => GradSlot::Rows(BTreeMap::new()),
            })
            .collect();
        let shapes = store
            .params
            .iter()
            .map(|p| (p.tensor.rows, p.tensor.cols))
            .collect();
        Self {
            slots,
            shapes,
            deferred: false,
            outer: BTreeMap::new(),
            shared: BTreeMap::new(),
            transposed: BTreeMap::new(),
        }
    }

    pub fn new_deferred(store: &ParamStore) -> Self {
        Self {
            deferred: true,
            ..Self::new(store)
        }
    }

    fn assert_flushed(&self) {
        assert!(
            self.outer.is_empty() && self.shared.is_empty() && self.transposed.is_empty(),
            "deferred gradients read before flush"
        );
    }

    /// `grad[id] += g xᵀ` for a dense `len(g) × len(x)` parameter.
    pub fn add_outer(&mut self, id: ParamId, g: &[f64], x: &[f64]) {
        self.add_outer_at(id, g, x, 0);
    }

    /// `grad[id][:, col..col + len(x)] += g xᵀ`.
    pub fn add_outer_at(&mut self, id: ParamId, g: &[f64], x: &[f64], col: usize) {
        if self.deferred {
            self.outer.entry(id.0).or_default().push((g.to_vec(), x.to_vec(), col));
            return;
        }
        let cols = self.shapes[id.0].1;
        let dw = self.dense_mut(id);
        for (o, &go) in g.iter().enumerate() {
            if go != 0.0 {
                let start = o * cols + col;
                crate::linalg::axpy(go, x, &mut dw[start..start + x.len()]);
            }
        }
    }

    /// Like [`Grads::add_outer_at`] for an `x` that stays the same until the
    /// next flush: deferred calls sum `g` and apply one outer product.
    pub fn add_outer_shared(&mut self, id: ParamId, g: &[f64], x: &[f64], col: usize) {
        if !self.deferred {
            return self.add_outer_at(id, g, x, col);
        }
        match self.shared.get_mut(&(id.0, col)) {
            Some((acc, x0)) => {
                debug_assert_eq!(x0.as_slice(), x, "shared outer-product operand changed before flush");
                crate::linalg::axpy(1.0, g, acc);
            }
            None => {
                self.shared.insert((id.0, col), (g.to_vec(), x.to_vec()));
            }
        }
    }

    /// `grad[target] += W[:, cols]ᵀ g` where `W` is the dense parameter `weight`.
    pub fn add_transposed(&mut self, store: &ParamStore, target: ParamId, weight: ParamId, cols: std::ops::Range<usize>, g: &[f64]) {
        if self.deferred {
            let key = (target.0, weight.0, cols.start, cols.end);
            match self.transposed.get_mut(&key) {
                Some(acc) => crate::linalg::axpy(1.0, g, acc),
                None => {
                    self.transposed.insert(key, g.to_vec());
                }
            }
            return;
        }
        apply_transposed(store.get(weight), cols, g, self.dense_mut(target));
    }

    /// Applies all queued work; a no-op in eager mode.
    pub fn flush(&mut self, store: &ParamStore) {
        for (id, items) in std::mem::take(&mut self.outer) {
            let (rows, cols) = self.shapes[id];
            let dw = self.dense_mut(ParamId(id));
            for o in 0..rows {
                let row = &mut dw[o * cols..(o + 1) * cols];
                for (g, x, col) in &items {
                    if g[o] != 0.0 {
                        crate::linalg::axpy(g[o], x, &mut row[*col..*col + x.len()]);
                    }
                }
            }
        }
        for ((id, col), (g, x)) in std::mem::take(&mut self.shared) {
            self.deferred = false;
            self.add_outer_at(ParamId(id), &g, &x, col);
            self.deferred = true;
        }
        for ((target, weight, start, end), g) in std::mem::take(&mut self.transposed) {
            let dst = self.dense_mut(ParamId(target));
            apply_transposed(store.get(ParamId(weight)), start..end, &g, dst);
        }
    }

    /// Flat gradient buffer of a dense parameter, zero-allocated on first use.
    pub fn dense_mut(&mut self, id: ParamId) -> &mut [f64] {
        let (r, c) = self.shapes[id.0];
        match &mut self.slots[id.0] {
            GradSlot::Dense(buf) => buf.get_or_insert_with(|| vec![0.0; r * c]),
            GradSlot::Rows(_) => panic!("dense gradient requested for table parameter"),
        }
    }

    /// Gradient row of a table parameter (or of a dense one, viewed row-wise).
    pub fn row_mut(&mut self, id: ParamId, row: usize) -> &mut [f64] {
        let (r, c) = self.shapes[id.0];
        match &mut self.slots[id.0] {
            GradSlot::Rows(rows) => rows.entry(row).or_insert_with(|| vec![0.0; c]),
            GradSlot::Dense(buf) => {
                &mut buf.get_or_insert_with(|| vec![0.0; r * c])[row * c..(row + 1) * c]
            }
        }
    }

    pub fn dense(&self, id: ParamId) -> Option<&[f64]> {
        self.assert_flushed();
        match &self.slots[id.0] {
            GradSlot::Dense(buf) => buf.as_deref(),
            GradSlot::Rows(_) => None,
        }
    }

    /// Touched rows of a table parameter, in ascending row order.
    pub fn rows(&self, id: ParamId) -> Option<&BTreeMap<usize, Vec<f64>>> {
        self.assert_flushed();
        match &self.slots[id.0] {
            GradSlot::Rows(rows) => Some(rows),
            GradSlot::Dense(_) => None,
        }
    }

    /// Materialise the full gradient of one parameter, zeros where untouched.
    pub fn to_flat(&self, id: ParamId) -> Vec<f64> {
        self.assert_flushed();
        let (r, c) = self.shapes[id.0];
        let mut out = vec![0.0; r * c];
        match &self.slots[id.0] {
            GradSlot::Dense(Some(buf)) => out.copy_from_slice(buf),
            GradSlot::Dense(None) => {}
            GradSlot::Rows(rows) => {
                for (&row, g) in rows {
                    out[row * c..(row + 1) * c].copy_from_slice(g);
                }
            }
        }
        out
    }

    pub fn is_touched(&self, id: ParamId) -> bool {
        match &self.slots[id.0] {
            GradSlot::Dense(buf) => buf.is_some(),
            GradSlot::Rows(rows) => !rows.is_empty(),
        }
    }

    /// `self += other`, slot by slot.
    pub fn accumulate(&mut self, other: &Grads) {
        other.assert_flushed();
        for (i, slot) in other.slots.iter().enumerate() {
            match slot {
                GradSlot::Dense(Some(src)) => {
                    let dst = self.dense_mut(ParamId(i));
                    crate::linalg::axpy(1.0, src, dst);
                }
                GradSlot::Dense(None) => {}
                GradSlot::Rows(rows) => {
                    for (&row, src) in rows {
                        let dst = self.row_mut(ParamId(i), row);
                        crate::linalg::axpy(1.0, src, dst);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.assert_flushed();
        for slot in &mut self.slots {
            match slot {
                GradSlot::Dense(Some(buf)) => buf.iter_mut().for_each(|v| *v *= factor),
                GradSlot::Dense(None) => {}
                GradSlot::Rows(rows) => rows
                    .values_mut()
                    .for_each(|g| g.iter_mut().for_each(|v| *v *= factor)),
            }
        }
    }
}

fn apply_transposed(w: &Tensor, cols: std::ops::Range<usize>, g: &[f64], dst: &mut [f64]) {
    for (o, &go) in g.iter().enumerate() {
        if go != 0.0 {
            crate::linalg::axpy(go, &w.row(o)[cols.clone()], dst);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deferred_matches_eager() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Dense, Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let v = store.add("v", ParamKind::Dense, Tensor::zeros(1, 2));
        let mut eager = Grads::new(&store);
        let mut lazy = Grads::new_deferred(&store);
        for g in [&mut eager, &mut lazy] {
            g.add_outer(w, &[1.0, -2.0], &[0.5, 1.0, 2.0]);
            g.add_outer(w, &[3.0, 0.0], &[1.0, 1.0, 1.0]);
            g.add_transposed(&store, v, w, 1..3, &[1.0, 1.0]);
            g.add_transposed(&store, v, w, 1..3, &[0.0, 2.0]);
            g.flush(&store);
        }
        assert_eq!(eager.to_flat(w), lazy.to_flat(w));
        assert_eq!(lazy.to_flat(w), vec![3.5, 4.0, 5.0, -1.0, -2.0, -4.0]);
        assert_eq!(lazy.to_flat(v), vec![17.0, 21.0]);
    }

    #[test]
    #[should_panic(expected = "before flush")]
    fn deferred_reads_require_flush() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Dense, Tensor::zeros(1, 1));
        let mut g = Grads::new_deferred(&store);
        g.add_outer(w, &[1.0], &[1.0]);
        let _ = g.to_flat(w);
    }

    #[test]
    fn table_grads_are_sparse_and_mergeable() {
        let mut store = ParamStore::new();
        let t = store.add("emb", ParamKind::Table, Tensor::zeros(4, 2));
        let w = store.add("w", ParamKind::Dense, Tensor::zeros(2, 2));
        let mut a = Grads::new(&store);
        a.row_mut(t, 2)[1] = 3.0;
        let mut b = Grads::new(&store);
        b.row_mut(t, 2)[1] = 1.0;
        b.row_mut(t, 0)[0] = 5.0;
        b.dense_mut(w)[3] = 2.0;
        a.accumulate(&b);
        assert_eq!(a.to_flat(t), vec![5.0, 0.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0]);
        assert_eq!(a.rows(t).unwrap().len(), 2);
        assert_eq!(a.dense(w).unwrap(), &[0.0, 0.0, 0.0, 2.0]);
        a.scale(0.5);
        assert_eq!(a.to_flat(w)[3], 1.0);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("x", ParamKind::Dense, Tensor::zeros(1, 1));
        store.add("x", ParamKind::Dense, Tensor::zeros(1, 1));
    }
}
