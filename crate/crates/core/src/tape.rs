//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value and the inputs it was computed from. [`Tape::backward`] walks
//! the nodes in reverse creation order, so each node's gradient is complete
//! (all consumers have contributed) before it is propagated further.
//!
//! Parameters are borrowed from a [`ParamStore`] without copying; one tape
//! per forward pass, discarded afterwards.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{canonical_sum, gemm, stable_sigmoid, transpose, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Reduction used by pooling and `reduce`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Max,
    Mean,
    Sum,
}

impl std::str::FromStr for Pool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pool::Max),
            "mean" => Ok(Pool::Mean),
            "sum" => Ok(Pool::Sum),
            other => Err(Error::config(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Reduce { x: Var, axis: usize, pool: Pool, argmax: Vec<usize> },
    ReduceGroups { x: Var, group: usize, pool: Pool, argmax: Vec<usize> },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Transpose(Var),
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    data: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<String, Var>,
    grads: Vec<Option<Vec<f64>>>,
    kink: f64,
    branch: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), grads: Vec::new(), kink: f64::INFINITY, branch: FNV_OFFSET }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node { rows, cols, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf holding a copy of `t`.
    pub fn input(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, Cow::Owned(t.data.clone()), Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.input(t, false)
    }

    /// Borrowed constant, no copy.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Result<Var> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, Cow::Borrowed(&t.data), Op::Leaf, false))
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!("{rows}x{cols} matrix from {} values", data.len())));
        }
        Ok(self.push(rows, cols, Cow::Owned(data), Op::Leaf, false))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, Cow::Owned(vec![0.0; rows * cols]), Op::Leaf, false)
    }

    /// Loads a named parameter once per tape; later calls return the same node.
    pub fn param(&mut self, store: &'a ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let (r, c) = t.dims2()?;
        let v = self.push(r, c, Cow::Borrowed(&t.data), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor { shape: vec![n.rows, n.cols], data: n.data.to_vec(), requires_grad: n.requires_grad, grad: None }
    }

    /// Smallest distance to a non-differentiable point seen so far: ReLU
    /// inputs at zero, ties in max reductions and anything recorded through
    /// [`Tape::note_kink`].
    pub fn kink_margin(&self) -> f64 {
        self.kink
    }

    pub fn note_kink(&mut self, margin: f64) {
        if margin < self.kink {
            self.kink = margin;
        }
    }

    /// Fingerprint of every discrete choice made so far (ReLU signs, max
    /// winners, anything recorded through [`Tape::note_branch`]). Two
    /// evaluations with equal fingerprints took the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    pub fn note_branch(&mut self, choice: u64) {
        self.branch = (self.branch ^ choice).wrapping_mul(FNV_PRIME);
    }

    // ---------------------------------------------------------------- ops

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions differ: [{ar}x{ac}]{} · [{br}x{bc}]{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut out, (m, k, n), ta, tb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, Cow::Owned(out), Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {}x{} and {}x{} differ", sa.0, sa.1, sb.0, sb.1)));
        }
        Ok(sa)
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, Cow::Owned(out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + 1·row`, broadcasting a `1×c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            let (br, bc) = self.shape(row);
            return Err(Error::dim(format!("add_row: {r}x{c} with {br}x{bc}")));
        }
        let b = self.value(row);
        let out: Vec<f64> = self.value(x).chunks(c.max(1)).flat_map(|xr| xr.iter().zip(b).map(|(p, q)| p + q)).collect();
        let rg = self.rg(&[x, row]);
        Ok(self.push(r, c, Cow::Owned(out), Op::AddRow(x, row), rg))
    }

    /// Scales row `i` of `x` by `s[i]`, with `s` an `r×1` column.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(s) != (r, 1) {
            let (sr, sc) = self.shape(s);
            return Err(Error::dim(format!("mul_col: {r}x{c} with {sr}x{sc}")));
        }
        let sv = self.value(s);
        let mut out = self.value(x).to_vec();
        for (i, row) in out.chunks_mut(c.max(1)).enumerate().take(r) {
            row.iter_mut().for_each(|v| *v *= sv[i]);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(r, c, Cow::Owned(out), Op::MulCol(x, s), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.shape(x);
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(r, cols, Cow::Owned(out), Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.shape(x);
        let out = self.value(x).iter().map(|v| v + c).collect();
        let rg = self.rg(&[x]);
        self.push(r, cols, Cow::Owned(out), Op::AddScalar(x), rg)
    }

    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if mask.len() != r * c {
            return Err(Error::dim(format!("mul_const: {r}x{c} with {} mask values", mask.len())));
        }
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, Cow::Owned(out), Op::MulConst(x, mask), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x]);
        self.push(r, c, Cow::Owned(out), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let margin = self.value(x).iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.note_kink(margin);
        for chunk in self.value(x).chunks(64).map(|c| c.iter().fold(0u64, |b, &v| (b << 1) | (v > 0.0) as u64)).collect::<Vec<_>>() {
            self.note_branch(chunk);
        }
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, stable_sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(usize, usize)> {
        if axis > 1 {
            return Err(Error::dim(format!("axis {axis} is invalid for a matrix")));
        }
        Ok(self.shape(x))
    }

    fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{what}: non-finite input")));
        }
        Ok(())
    }

    /// Visits every slice along `axis` as (index list) without allocating per slice.
    fn slices(rows: usize, cols: usize, axis: usize) -> (usize, usize, usize, usize) {
        // (slice count, slice length, slice stride, element stride)
        if axis == 0 {
            (cols, rows, 1, cols)
        } else {
            (rows, cols, cols, 1)
        }
    }

    /// Softmax over `axis` (0: down each column, 1: along each row),
    /// max-subtracted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.check_axis(x, axis)?;
        self.check_finite(x, "softmax")?;
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let (ns, len, ss, es) = Self::slices(r, c, axis);
        for s in 0..ns {
            let base = s * ss;
            let mx = (0..len).map(|i| xv[base + i * es]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..len {
                let e = (xv[base + i * es] - mx).exp();
                out[base + i * es] = e;
                z += e;
            }
            for i in 0..len {
                out[base + i * es] /= z;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, Cow::Owned(out), Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.check_axis(x, axis)?;
        self.check_finite(x, "log_softmax")?;
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let (ns, len, ss, es) = Self::slices(r, c, axis);
        for s in 0..ns {
            let base = s * ss;
            let mx = (0..len).map(|i| xv[base + i * es]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..len).map(|i| (xv[base + i * es] - mx).exp()).sum::<f64>().ln();
            for i in 0..len {
                out[base + i * es] = xv[base + i * es] - lse;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, Cow::Owned(out), Op::LogSoftmax(x, axis), rg))
    }

    /// Pools `len` strided values. Max keeps the lowest index among equal
    /// maxima; sums run in canonical order so permuted inputs give the same
    /// bits.
    fn pool_slice(&mut self, vals: &mut [f64], pool: Pool) -> (f64, usize) {
        match pool {
            Pool::Max => {
                let mut best = 0;
                for (i, &v) in vals.iter().enumerate() {
                    if v > vals[best] {
                        best = i;
                    }
                }
                let top = vals[best];
                let second = vals.iter().enumerate().filter(|&(i, _)| i != best).fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
                self.note_kink(top - second);
                self.note_branch(best as u64);
                (top, best)
            }
            Pool::Sum => (canonical_sum(vals), 0),
            Pool::Mean => {
                let n = vals.len() as f64;
                (canonical_sum(vals) / n, 0)
            }
        }
    }

    /// Reduces along `axis`: axis 0 gives a `1×c` row, axis 1 an `r×1` column.
    pub fn reduce(&mut self, x: Var, axis: usize, pool: Pool) -> Result<Var> {
        let (r, c) = self.check_axis(x, axis)?;
        let (ns, len, ss, es) = Self::slices(r, c, axis);
        if len == 0 {
            return Err(Error::dim("reduction over an empty axis"));
        }
        let mut out = Vec::with_capacity(ns);
        let mut argmax = Vec::with_capacity(if pool == Pool::Max { ns } else { 0 });
        let mut buf = Vec::with_capacity(len);
        for s in 0..ns {
            buf.clear();
            let xv = self.value(x);
            buf.extend((0..len).map(|i| xv[s * ss + i * es]));
            let (v, arg) = self.pool_slice(&mut buf, pool);
            out.push(v);
            if pool == Pool::Max {
                argmax.push(arg);
            }
        }
        let (or, oc) = if axis == 0 { (1, c) } else { (r, 1) };
        let rg = self.rg(&[x]);
        Ok(self.push(or, oc, Cow::Owned(out), Op::Reduce { x, axis, pool, argmax }, rg))
    }

    /// Pools each run of `group` consecutive rows into one row.
    pub fn reduce_groups(&mut self, x: Var, group: usize, pool: Pool) -> Result<Var> {
        let (r, c) = self.shape(x);
        if group == 0 {
            return Err(Error::dim("reduction over an empty group"));
        }
        if r % group != 0 {
            return Err(Error::dim(format!("{r} rows do not split into groups of {group}")));
        }
        let g = r / group;
        let mut out = vec![0.0; g * c];
        let mut argmax = if pool == Pool::Max { vec![0; g * c] } else { Vec::new() };
        let mut buf = Vec::with_capacity(group);
        for gi in 0..g {
            for j in 0..c {
                buf.clear();
                let xv = self.value(x);
                buf.extend((0..group).map(|i| xv[(gi * group + i) * c + j]));
                let (v, arg) = self.pool_slice(&mut buf, pool);
                out[gi * c + j] = v;
                if pool == Pool::Max {
                    argmax[gi * c + j] = arg;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(g, c, Cow::Owned(out), Op::ReduceGroups { x, group, pool, argmax }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r * c == 0 {
            return Err(Error::dim("sum of an empty tensor"));
        }
        let rows = self.reduce(x, 1, Pool::Sum)?;
        self.reduce(rows, 0, Pool::Sum)
    }

    /// Columns of `a` followed by columns of `b`, row by row.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(Error::dim(format!("concat: row counts differ ({ar}x{ac} vs {br}x{bc})")));
        }
        let c = ac + bc;
        let mut out = Vec::with_capacity(ar * c);
        for i in 0..ar {
            out.extend_from_slice(&self.value(a)[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&self.value(b)[i * bc..(i + 1) * bc]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(ar, c, Cow::Owned(out), Op::ConcatCols(a, b), rg))
    }

    /// Stacks the rows of all parts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_rows of nothing"));
        };
        let c = self.shape(first).1;
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(Error::dim(format!("concat_rows: widths {c} and {pc} differ")));
            }
            out.extend_from_slice(self.value(p));
            r += pr;
        }
        let rg = self.rg(parts);
        Ok(self.push(r, c, Cow::Owned(out), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start > end || end > c {
            return Err(Error::dim(format!("column slice {start}..{end} of width {c}")));
        }
        let w = end - start;
        let xv = self.value(x);
        let out: Vec<f64> = (0..r).flat_map(|i| xv[i * c + start..i * c + end].iter().copied()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(r, w, Cow::Owned(out), Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start > end || end > r {
            return Err(Error::dim(format!("row slice {start}..{end} of {r} rows")));
        }
        let out = self.value(x)[start * c..end * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(end - start, c, Cow::Owned(out), Op::SliceRows { x, start }, rg))
    }

    /// Row `i` of the result is row `idx[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim(format!("gather row {bad} from {r} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(idx.len(), c, Cow::Owned(out), Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = transpose(self.value(x), r, c);
        let rg = self.rg(&[x]);
        self.push(c, r, Cow::Owned(out), Op::Transpose(x), rg)
    }

    /// Inverted dropout: zero with probability `p`, survivors scaled by
    /// `1/(1-p)`. Identity outside training or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.mul_const(x, mask)
    }

    // ----------------------------------------------------------- backward

    /// Backpropagates from a `1×1` loss. Gradients of earlier passes are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::dim(format!("backward needs a 1x1 loss, got {r}x{c}")));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::Numeric(format!("loss is {}", self.scalar(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter loaded on this tape that the loss reached.
    pub fn param_grads(&self) -> Gradients {
        let mut out = Gradients::default();
        for (name, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = (node.rows, node.cols);
        let y = &node.data;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].data.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                let (ar, ac) = (nodes[a.0].rows, nodes[a.0].cols);
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = c;
                match (ta, tb) {
                    (false, false) => {
                        acc(a, &mut |da| gemm(g, bv, da, (m, n, k), false, true));
                        acc(b, &mut |db| gemm(av, g, db, (k, m, n), true, false));
                    }
                    (false, true) => {
                        acc(a, &mut |da| gemm(g, bv, da, (m, n, k), false, false));
                        acc(b, &mut |db| gemm(g, av, db, (n, m, k), true, false));
                    }
                    (true, false) => {
                        acc(a, &mut |da| gemm(bv, g, da, (k, n, m), false, true));
                        acc(b, &mut |db| gemm(av, g, db, (k, m, n), false, false));
                    }
                    (true, true) => {
                        acc(a, &mut |da| gemm(bv, g, da, (k, n, m), true, true));
                        acc(b, &mut |db| gemm(g, av, db, (n, m, k), true, true));
                    }
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, gv)| *x -= gv));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(a, &mut |d| {
                    for ((x, gv), bb) in d.iter_mut().zip(g).zip(bv.iter()) {
                        *x += gv * bb;
                    }
                });
                acc(b, &mut |d| {
                    for ((x, gv), aa) in d.iter_mut().zip(g).zip(av.iter()) {
                        *x += gv * aa;
                    }
                });
            }
            &Op::AddRow(x, row) => {
                acc(x, &mut |d| add_into(d, g));
                acc(row, &mut |d| {
                    for gr in g.chunks(c.max(1)) {
                        add_into(d, gr);
                    }
                });
            }
            &Op::MulCol(x, s) => {
                let (xv, sv) = (&nodes[x.0].data, &nodes[s.0].data);
                acc(x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[i * c + j] * sv[i];
                        }
                    }
                });
                acc(s, &mut |d| {
                    for (i, di) in d.iter_mut().enumerate().take(r) {
                        *di += (0..c).map(|j| g[i * c + j] * xv[i * c + j]).sum::<f64>();
                    }
                });
            }
            &Op::Scale(x, k) => acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(v, gv)| *v += k * gv)),
            &Op::AddScalar(x) => acc(x, &mut |d| add_into(d, g)),
            Op::MulConst(x, mask) => acc(*x, &mut |d| {
                for ((v, gv), m) in d.iter_mut().zip(g).zip(mask) {
                    *v += gv * m;
                }
            }),
            &Op::Relu(x) => {
                let xv = &nodes[x.0].data;
                acc(x, &mut |d| {
                    for ((v, gv), xx) in d.iter_mut().zip(g).zip(xv.iter()) {
                        if *xx > 0.0 {
                            *v += gv;
                        }
                    }
                });
            }
            &Op::Sigmoid(x) => acc(x, &mut |d| {
                for ((v, gv), yy) in d.iter_mut().zip(g).zip(y.iter()) {
                    *v += gv * yy * (1.0 - yy);
                }
            }),
            &Op::Tanh(x) => acc(x, &mut |d| {
                for ((v, gv), yy) in d.iter_mut().zip(g).zip(y.iter()) {
                    *v += gv * (1.0 - yy * yy);
                }
            }),
            &Op::Softmax(x, axis) => {
                let (ns, len, ss, es) = Self::slices(r, c, axis);
                acc(x, &mut |d| {
                    for s in 0..ns {
                        let base = s * ss;
                        let dotgy: f64 = (0..len).map(|i| g[base + i * es] * y[base + i * es]).sum();
                        for i in 0..len {
                            let idx = base + i * es;
                            d[idx] += y[idx] * (g[idx] - dotgy);
                        }
                    }
                });
            }
            &Op::LogSoftmax(x, axis) => {
                let (ns, len, ss, es) = Self::slices(r, c, axis);
                acc(x, &mut |d| {
                    for s in 0..ns {
                        let base = s * ss;
                        let gsum: f64 = (0..len).map(|i| g[base + i * es]).sum();
                        for i in 0..len {
                            let idx = base + i * es;
                            d[idx] += g[idx] - y[idx].exp() * gsum;
                        }
                    }
                });
            }
            Op::Reduce { x, axis, pool, argmax } => {
                let (xr, xc) = (nodes[x.0].rows, nodes[x.0].cols);
                let (ns, len, ss, es) = Self::slices(xr, xc, *axis);
                acc(*x, &mut |d| {
                    for s in 0..ns {
                        let base = s * ss;
                        match pool {
                            Pool::Max => d[base + argmax[s] * es] += g[s],
                            Pool::Sum => (0..len).for_each(|i| d[base + i * es] += g[s]),
                            Pool::Mean => (0..len).for_each(|i| d[base + i * es] += g[s] / len as f64),
                        }
                    }
                });
            }
            Op::ReduceGroups { x, group, pool, argmax } => {
                let group = *group;
                acc(*x, &mut |d| {
                    for gi in 0..r {
                        for j in 0..c {
                            let gv = g[gi * c + j];
                            match pool {
                                Pool::Max => d[(gi * group + argmax[gi * c + j]) * c + j] += gv,
                                Pool::Sum => (0..group).for_each(|i| d[(gi * group + i) * c + j] += gv),
                                Pool::Mean => (0..group).for_each(|i| d[(gi * group + i) * c + j] += gv / group as f64),
                            }
                        }
                    }
                });
            }
            &Op::ConcatCols(a, b) => {
                let ac = nodes[a.0].cols;
                let bc = c - ac;
                acc(a, &mut |d| {
                    for i in 0..r {
                        add_into(&mut d[i * ac..(i + 1) * ac], &g[i * c..i * c + ac]);
                    }
                });
                acc(b, &mut |d| {
                    for i in 0..r {
                        add_into(&mut d[i * bc..(i + 1) * bc], &g[i * c + ac..(i + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].data.len();
                    acc(p, &mut |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            &Op::SliceCols { x, start } => {
                let xc = nodes[x.0].cols;
                acc(x, &mut |d| {
                    for i in 0..r {
                        add_into(&mut d[i * xc + start..i * xc + start + c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            &Op::SliceRows { x, start } => acc(x, &mut |d| add_into(&mut d[start * c..(start + r) * c], g)),
            Op::GatherRows { x, idx } => acc(*x, &mut |d| {
                for (k, &src) in idx.iter().enumerate() {
                    add_into(&mut d[src * c..(src + 1) * c], &g[k * c..(k + 1) * c]);
                }
            }),
            &Op::Transpose(x) => acc(x, &mut |d| add_into(d, &transpose(g, r, c))),
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
