//! Reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`], which binds each store slot at most once per tape,
//! so [`Tape::backward`] can return gradients laid out exactly like the
//! [`ParamStore`].

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure_same_shape, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, matmul_at_into, matmul_bt_into, matmul_into, Mat};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Boolean attention mask, `true` where a query may attend to a key.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub allow: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allow: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allow.push(f(r, c));
            }
        }
        Mask { rows, cols, allow }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }
}

/// Precomputed rotary position table: one (cos, sin) pair per token and
/// rotated channel pair. Applied identically within every head.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeTable {
    /// `axis_of_pair[p]` selects which coordinate drives channel pair `p`
    /// (`None` leaves the pair unrotated).
    pub fn new(positions: &[[f64; 3]], axis_of_pair: &[Option<usize>]) -> Self {
        let pairs = axis_of_pair.len();
        let mut per_axis = [0usize; 3];
        for a in axis_of_pair.iter().flatten() {
            per_axis[*a] += 1;
        }
        let mut freq = vec![0.0; pairs];
        let mut seen = [0usize; 3];
        for (p, a) in axis_of_pair.iter().enumerate() {
            if let Some(a) = *a {
                let j = seen[a] as f64;
                let n = per_axis[a].max(1) as f64;
                freq[p] = libm::pow(100.0, -j / n);
                seen[a] += 1;
            }
        }
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for pos in positions {
            for (p, a) in axis_of_pair.iter().enumerate() {
                let angle = a.map_or(0.0, |a| pos[a] * freq[p]);
                cos.push(libm::cos(angle));
                sin.push(libm::sin(angle));
            }
        }
        RopeTable {
            tokens: positions.len(),
            pairs,
            cos,
            sin,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Rope(Var, Arc<RopeTable>, usize),
    Silu(Var),
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MaskedMse {
        pred: Var,
        diff: Vec<f64>,
        count: f64,
    },
    WeightedSum(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients for every parameter slot of a store (`None` if unused).
pub struct ParamGrads {
    pub grads: Vec<Option<Mat>>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: ParamGrads) {
        for (slot, g) in self.grads.iter_mut().zip(other.grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => {
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.data.iter_mut() {
                *x *= s;
            }
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    strict_masks: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: Vec::new(),
            strict_masks: false,
        }
    }

    /// In strict mode an attention mask row with no allowed key is an error
    /// instead of producing a zero output row.
    pub fn strict(mut self) -> Self {
        self.strict_masks = true;
        self
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Bind a store parameter; repeated calls return the same `Var`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() < store.len() {
            self.bound.resize(store.len(), None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn check_row(&self, a: Var, row: Var) -> Result<()> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(Error::shape(alloc::format!(
                "row broadcast needs 1x{ac}, got {rr}x{rc}"
            )));
        }
        Ok(())
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `a ⊙ row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise RMS normalization with a learnable gain row.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.check_row(x, gain)?;
        let xv = self.value(x);
        let g = &self.value(gain).data;
        let mut out = Mat::zeros(xv.rows, xv.cols);
        let mut inv_rms = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let ms = dot(row, row) / xv.cols as f64;
            let inv = 1.0 / libm::sqrt(ms + eps);
            inv_rms.push(inv);
            for ((o, &xi), &gi) in out.row_mut(r).iter_mut().zip(row).zip(g) {
                *o = xi * inv * gi;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Rotary position rotation of every head's channel pairs.
    pub fn rope(&mut self, x: Var, heads: usize, table: &Arc<RopeTable>) -> Result<Var> {
        let xv = self.value(x);
        let dh = xv.cols / heads.max(1);
        if heads == 0 || xv.cols % heads != 0 || table.tokens != xv.rows || table.pairs * 2 > dh {
            return Err(Error::shape("rope table does not match tokens"));
        }
        let mut out = xv.clone();
        for i in 0..xv.rows {
            let row = out.row_mut(i);
            for h in 0..heads {
                for p in 0..table.pairs {
                    let (c, s) = (table.cos[i * table.pairs + p], table.sin[i * table.pairs + p]);
                    let j = h * dh + 2 * p;
                    let (a, b) = (row[j], row[j + 1]);
                    row[j] = a * c - b * s;
                    row[j + 1] = a * s + b * c;
                }
            }
        }
        Ok(self.push(out, Op::Rope(x, table.clone(), heads)))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q (nq×C)`, `k (nk×C)`, `v (nk×C)`. Masked keys receive zero weight;
    /// a query row with every key masked yields zeros (or an error in strict
    /// mode).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Mask>) -> Result<Var> {
        let (nq, c) = self.shape(q);
        let (nk, ck) = self.shape(k);
        ensure_same_shape(self.shape(k), self.shape(v), "attention k/v")?;
        if ck != c || heads == 0 || c % heads != 0 {
            return Err(Error::shape(alloc::format!(
                "attention widths q={c} k={ck} heads={heads}"
            )));
        }
        if let Some(m) = mask {
            if m.rows != nq || m.cols != nk {
                return Err(Error::shape(alloc::format!(
                    "mask {}x{} for {nq}x{nk} scores",
                    m.rows,
                    m.cols
                )));
            }
            if self.strict_masks {
                if let Some(row) = (0..nq).find(|&r| (0..nk).all(|j| !m.get(r, j))) {
                    return Err(Error::Mask { row });
                }
            }
        }
        let dh = c / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros(nq, c);
        let mut probs = vec![0.0; heads * nq * nk];
        let mut qh = vec![0.0; nq * dh];
        let mut kh = vec![0.0; nk * dh];
        let mut vh = vec![0.0; nk * dh];
        let mut oh = vec![0.0; nq * dh];
        for h in 0..heads {
            gather_head(&qv.data, &mut qh, nq, c, h * dh, dh);
            gather_head(&kv.data, &mut kh, nk, c, h * dh, dh);
            gather_head(&vv.data, &mut vh, nk, c, h * dh, dh);
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            matmul_bt_into(&qh, &kh, p, nq, dh, nk);
            for i in 0..nq {
                let row = &mut p[i * nk..(i + 1) * nk];
                masked_softmax(row, scale, mask.map(|m| &m.allow[i * nk..(i + 1) * nk]));
            }
            oh.iter_mut().for_each(|x| *x = 0.0);
            matmul_into(p, &vh, &mut oh, nq, nk, dh);
            scatter_head(&oh, &mut out.data, nq, c, h * dh, dh);
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::vstack(&mats)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.rows {
            return Err(Error::shape("row slice out of bounds"));
        }
        let out = av.rows_range(start, end);
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(*parts.first().ok_or(Error::Empty("concat_cols"))?).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::shape("concat_cols height mismatch"));
            }
            cols += self.shape(p).1;
        }
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.cols {
            return Err(Error::shape("column slice out of bounds"));
        }
        let mut out = Mat::zeros(av.rows, end - start);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Mean of `(pred - target)²` over the rows flagged in `rows` (all rows
    /// when `None`). Produces a 1×1 value.
    pub fn masked_mse(&mut self, pred: Var, target: &Mat, rows: Option<&[bool]>) -> Result<Var> {
        let pv = self.value(pred);
        ensure_same_shape(pv.shape(), target.shape(), "mse")?;
        let mut diff = vec![0.0; pv.data.len()];
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..pv.rows {
            if rows.is_some_and(|m| !m[r]) {
                continue;
            }
            for c in 0..pv.cols {
                let i = r * pv.cols + c;
                let d = pv.data[i] - target.data[i];
                diff[i] = d;
                sum += d * d;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("mse over zero elements"));
        }
        let count = count as f64;
        Ok(self.push(Mat::filled(1, 1, sum / count), Op::MaskedMse { pred, diff, count }))
    }

    /// `Σ a ⊙ w` for a constant `w`; a convenient scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, a: Var, w: Mat) -> Result<Var> {
        ensure_same_shape(self.shape(a), w.shape(), "weighted_sum")?;
        let s = dot(&self.value(a).data, &w.data);
        Ok(self.push(Mat::filled(1, 1, s), Op::WeightedSum(a, w)))
    }

    /// Back-propagate from a 1×1 output and collect parameter gradients.
    pub fn backward(&self, out: Var, store: &ParamStore) -> Result<ParamGrads> {
        let grads = self.backward_all(out)?;
        let mut pg: Vec<Option<Mat>> = (0..store.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                pg[id.0] = Some(
                    grads[i]
                        .clone()
                        .unwrap_or_else(|| Mat::zeros(node.value.rows, node.value.cols)),
                );
            }
        }
        Ok(ParamGrads { grads: pg })
    }

    /// Gradient of a 1×1 output with respect to a leaf.
    pub fn grad_of(&self, out: Var, wrt: Var) -> Result<Mat> {
        let mut g = self.backward_all(out)?;
        let (r, c) = self.shape(wrt);
        Ok(g[wrt.0].take().unwrap_or_else(|| Mat::zeros(r, c)))
    }

    fn backward_all(&self, out: Var) -> Result<Vec<Option<Mat>>> {
        if self.shape(out) != (1, 1) {
            return Err(Error::shape("backward needs a scalar output"));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Mat::filled(1, 1, 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                let ga = acc(grads, *a, m, k);
                matmul_bt_into(&g.data, &bv.data, &mut ga.data, m, n, k);
                let gb = acc(grads, *b, k, n);
                matmul_at_into(&av.data, &g.data, &mut gb.data, m, k, n);
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.rows, g.cols), g);
                add_into(acc(grads, *b, g.rows, g.cols), g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = acc(grads, *a, g.rows, g.cols);
                for ((o, &gi), &bi) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                    *o += gi * bi;
                }
                let gb = acc(grads, *b, g.rows, g.cols);
                for ((o, &gi), &ai) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                    *o += gi * ai;
                }
            }
            Op::AddRow(a, row) => {
                add_into(acc(grads, *a, g.rows, g.cols), g);
                let gr = acc(grads, *row, 1, g.cols);
                for r in 0..g.rows {
                    for (o, &x) in gr.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let ga = acc(grads, *a, g.rows, g.cols);
                for r in 0..g.rows {
                    for ((o, &gi), &ri) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(&rv.data) {
                        *o += gi * ri;
                    }
                }
                let gr = acc(grads, *row, 1, g.cols);
                for r in 0..g.rows {
                    for ((o, &gi), &ai) in gr.data.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddScalar(a) => add_into(acc(grads, *a, g.rows, g.cols), g),
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, g.rows, g.cols);
                for (o, &gi) in ga.data.iter_mut().zip(&g.data) {
                    *o += gi * s;
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                let ga = acc(grads, *a, g.rows, g.cols);
                for ((o, &gi), &x) in ga.data.iter_mut().zip(&g.data).zip(&av.data) {
                    let s = sigmoid(x);
                    *o += gi * (s + x * s * (1.0 - s));
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let ga = acc(grads, *a, g.rows, g.cols);
                for ((o, &gi), &x) in ga.data.iter_mut().zip(&g.data).zip(&av.data) {
                    *o += gi * gelu(x).1;
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let cols = xv.cols;
                let n = cols as f64;
                let mut dgain = vec![0.0; cols];
                let mut dx = Mat::zeros(xv.rows, cols);
                for r in 0..xv.rows {
                    let inv = inv_rms[r];
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let mut s = 0.0;
                    for c in 0..cols {
                        dgain[c] += gr[c] * xr[c] * inv;
                        s += xr[c] * gv.data[c] * gr[c];
                    }
                    let coeff = inv * inv * inv * s / n;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * gv.data[c] * gr[c] - xr[c] * coeff;
                    }
                }
                add_into(acc(grads, *x, xv.rows, cols), &dx);
                let gg = acc(grads, *gain, 1, cols);
                for (o, d) in gg.data.iter_mut().zip(dgain) {
                    *o += d;
                }
            }
            Op::Rope(x, table, heads) => {
                let cols = g.cols;
                let heads = *heads;
                let dh = cols / heads;
                let mut dx = g.clone();
                for t in 0..g.rows {
                    let row = dx.row_mut(t);
                    for h in 0..heads {
                        for p in 0..table.pairs {
                            let (c, s) = (table.cos[t * table.pairs + p], table.sin[t * table.pairs + p]);
                            let j = h * dh + 2 * p;
                            let (a, b) = (row[j], row[j + 1]);
                            row[j] = a * c + b * s;
                            row[j + 1] = -a * s + b * c;
                        }
                    }
                }
                add_into(acc(grads, *x, g.rows, cols), &dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, c) = qv.shape();
                let nk = kv.rows;
                let dh = c / heads;
                let scale = 1.0 / libm::sqrt(dh as f64);
                let mut dq = Mat::zeros(nq, c);
                let mut dk = Mat::zeros(nk, c);
                let mut dv = Mat::zeros(nk, c);
                let mut qh = vec![0.0; nq * dh];
                let mut kh = vec![0.0; nk * dh];
                let mut vh = vec![0.0; nk * dh];
                let mut goh = vec![0.0; nq * dh];
                let mut dp = vec![0.0; nq * nk];
                let mut tmp_q = vec![0.0; nq * dh];
                let mut tmp_k = vec![0.0; nk * dh];
                for h in 0..*heads {
                    gather_head(&qv.data, &mut qh, nq, c, h * dh, dh);
                    gather_head(&kv.data, &mut kh, nk, c, h * dh, dh);
                    gather_head(&vv.data, &mut vh, nk, c, h * dh, dh);
                    gather_head(&g.data, &mut goh, nq, c, h * dh, dh);
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    // dV = Pᵀ dO
                    tmp_k.iter_mut().for_each(|x| *x = 0.0);
                    matmul_at_into(p, &goh, &mut tmp_k, nq, nk, dh);
                    scatter_add_head(&tmp_k, &mut dv.data, nk, c, h * dh, dh);
                    // dP = dO Vᵀ, then softmax backward
                    dp.iter_mut().for_each(|x| *x = 0.0);
                    matmul_bt_into(&goh, &vh, &mut dp, nq, dh, nk);
                    for i in 0..nq {
                        let pr = &p[i * nk..(i + 1) * nk];
                        let dr = &mut dp[i * nk..(i + 1) * nk];
                        let s = dot(pr, dr);
                        for (d, &pi) in dr.iter_mut().zip(pr) {
                            *d = pi * (*d - s) * scale;
                        }
                    }
                    tmp_q.iter_mut().for_each(|x| *x = 0.0);
                    matmul_into(&dp, &kh, &mut tmp_q, nq, nk, dh);
                    scatter_add_head(&tmp_q, &mut dq.data, nq, c, h * dh, dh);
                    tmp_k.iter_mut().for_each(|x| *x = 0.0);
                    matmul_at_into(&dp, &qh, &mut tmp_k, nq, nk, dh);
                    scatter_add_head(&tmp_k, &mut dk.data, nk, c, h * dh, dh);
                }
                add_into(acc(grads, *q, nq, c), &dq);
                add_into(acc(grads, *k, nk, c), &dk);
                add_into(acc(grads, *v, nk, c), &dv);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let gp = acc(grads, p, r, c);
                    for (o, &x) in gp.data.iter_mut().zip(&g.data[off * c..(off + r) * c]) {
                        *o += x;
                    }
                    off += r;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let ga = acc(grads, *a, r, c);
                for (o, &x) in ga.data[start * c..(start + g.rows) * c].iter_mut().zip(&g.data) {
                    *o += x;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    let gp = acc(grads, p, r, c);
                    for row in 0..r {
                        for (o, &x) in gp.row_mut(row).iter_mut().zip(&g.row(row)[off..off + c]) {
                            *o += x;
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let ga = acc(grads, *a, r, c);
                for row in 0..r {
                    for (o, &x) in ga.row_mut(row)[*start..*start + g.cols].iter_mut().zip(g.row(row)) {
                        *o += x;
                    }
                }
            }
            Op::MaskedMse { pred, diff, count } => {
                let (r, c) = self.shape(*pred);
                let s = g.data[0] * 2.0 / count;
                let gp = acc(grads, *pred, r, c);
                for (o, &d) in gp.data.iter_mut().zip(diff) {
                    *o += s * d;
                }
            }
            Op::WeightedSum(a, w) => {
                let s = g.data[0];
                let ga = acc(grads, *a, w.rows, w.cols);
                for (o, &x) in ga.data.iter_mut().zip(&w.data) {
                    *o += s * x;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, r: usize, c: usize) -> &mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(r, c))
}

fn add_into(dst: &mut Mat, src: &Mat) {
    for (o, &x) in dst.data.iter_mut().zip(&src.data) {
        *o += x;
    }
}

fn gather_head(src: &[f64], dst: &mut [f64], n: usize, c: usize, off: usize, dh: usize) {
    for i in 0..n {
        dst[i * dh..(i + 1) * dh].copy_from_slice(&src[i * c + off..i * c + off + dh]);
    }
}

fn scatter_head(src: &[f64], dst: &mut [f64], n: usize, c: usize, off: usize, dh: usize) {
    for i in 0..n {
        dst[i * c + off..i * c + off + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

fn scatter_add_head(src: &[f64], dst: &mut [f64], n: usize, c: usize, off: usize, dh: usize) {
    for i in 0..n {
        for (o, &x) in dst[i * c + off..i * c + off + dh]
            .iter_mut()
            .zip(&src[i * dh..(i + 1) * dh])
        {
            *o += x;
        }
    }
}

/// In-place softmax of `row * scale` restricted to allowed positions.
fn masked_softmax(row: &mut [f64], scale: f64, allow: Option<&[bool]>) {
    let mut max = f64::NEG_INFINITY;
    for (j, x) in row.iter_mut().enumerate() {
        if allow.is_none_or(|a| a[j]) {
            *x *= scale;
            max = max.max(*x);
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if allow.is_none_or(|a| a[j]) {
            *x = libm::exp(*x - max);
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// tanh-approximated GELU and its derivative.
#[inline]
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(inner);
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}
