//! Dynamic reverse-mode tape.
//!
//! Every forward primitive appends one node holding its value and enough
//! saved state to run its backward rule. The tape is rebuilt on every
//! forward pass, so data-dependent masking and routing are recorded as
//! plain index lists.

use crate::error::{invalid, shape_err, Error, Result};
use crate::ndcore::gemm::gemm;
use crate::ndcore::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention window: rows `q_start..q_start+q_len` of the queries attend
/// to rows `k_start..k_start+k_len` of the keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    MulConst { x: Var, factors: Vec<f64> },
    Affine { x: Var, scale: f64 },
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
    Abs(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    MaskedZero { x: Var, rows: Vec<bool> },
    GatherRows { x: Var, idx: Vec<usize> },
    IndexAddRows { x: Var, idx: Vec<usize> },
    GatherElems { x: Var, idx: Vec<(usize, usize)> },
    ScaleRows { x: Var, s: Var },
    RenormRows { x: Var, keep: Vec<bool>, active: Vec<bool>, sums: Vec<f64> },
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, eps: f64, probs: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, segs: Vec<AttnSegment>, heads: usize, causal: bool, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a rank-2 operand, got shape {s:?}"))),
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of the last `backward` call with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let value = Tensor::new(shape, data)
            .expect("primitive produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    /// Records a constant or leaf tensor. Its `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf(None), rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a parameter so its gradient can be written back to the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf(Some(id)), true)
    }

    /// Same as [`Tape::param`] but detached from the gradient.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf(None), false)
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("left {:?} vs right {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (br, bc) = dims2(self.value(b), "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!(
                    "inner dimensions differ: left {:?} vs right {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if trans_b { " (transposed)" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), trans_b, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = last_dim(self.value(x));
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_row",
                format!("bias {:?} does not match rows of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, w)| v + w))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Elementwise product with constant factors (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(x).len() {
            return Err(shape_err(
                "mul_const",
                format!("{} factors for shape {:?}", factors.len(), self.shape(x)),
            ));
        }
        let out = self.data(x).iter().zip(&factors).map(|(v, f)| v * f).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x, factors }, rg))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.data(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = last_dim(self.value(x));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|v| v.abs()).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Abs(x), rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = last_dim(self.value(x));
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must be [{n}] for input {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    self.shape(x)
                ),
            ));
        }
        let rows = self.value(x).len() / n.max(1);
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        let (g, b) = (self.data(gamma), self.data(beta));
        for (r, row) in self.data(x).chunks(n).enumerate() {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.value(table), "embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange { op: "embedding", index: id, bound: v });
            }
            out.extend_from_slice(&self.data(table)[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let (_, c) = dims2(self.value(*first), "concat")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = dims2(self.value(p), "concat")?;
            if pc != c {
                return Err(shape_err(
                    "concat",
                    format!("column counts differ: {:?} vs {:?}", self.shape(*first), self.shape(p)),
                ));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_rows")?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {:?}", start + len, self.shape(x))));
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_cols")?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("columns {start}..{} of {:?}", start + len, self.shape(x))));
        }
        let out = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), r * len);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    /// Zeroes every row `i` with `rows[i] == true`.
    pub fn masked_zero(&mut self, x: Var, rows: &[bool]) -> Result<Var> {
        let n = last_dim(self.value(x));
        let r = self.value(x).len() / n.max(1);
        if rows.len() != r {
            return Err(shape_err("masked_zero", format!("{} mask rows for shape {:?}", rows.len(), self.shape(x))));
        }
        let mut out = self.data(x).to_vec();
        for (row, &m) in out.chunks_mut(n).zip(rows) {
            if m {
                row.fill(0.0);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::MaskedZero { x, rows: rows.to_vec() }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::OutOfRange { op: "gather_rows", index: i, bound: r });
            }
            out.extend_from_slice(&self.data(x)[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Zero matrix with `out_rows` rows where row `idx[r]` accumulates row `r` of `x`.
    pub fn index_add_rows(&mut self, x: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "index_add_rows")?;
        if idx.len() != r {
            return Err(shape_err("index_add_rows", format!("{} indices for {r} rows", idx.len())));
        }
        let mut out = vec![0.0; out_rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            if dst >= out_rows {
                return Err(Error::OutOfRange { op: "index_add_rows", index: dst, bound: out_rows });
            }
            let s = &self.nodes[x.0].value.data()[src * c..(src + 1) * c];
            out[dst * c..(dst + 1) * c].iter_mut().zip(s).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![out_rows, c], out, Op::IndexAddRows { x, idx: idx.to_vec() }, rg))
    }

    /// Vector of `x[i, j]` for each `(i, j)`.
    pub fn gather_elems(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "gather_elems")?;
        let mut out = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return Err(Error::OutOfRange { op: "gather_elems", index: i * c + j, bound: r * c });
            }
            out.push(self.data(x)[i * c + j]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![idx.len()], out, Op::GatherElems { x, idx: idx.to_vec() }, rg))
    }

    /// Multiplies row `i` of `x` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "scale_rows")?;
        if self.value(s).len() != r {
            return Err(shape_err("scale_rows", format!("scales {:?} for rows of {:?}", self.shape(s), self.shape(x))));
        }
        let sv = self.data(s);
        let out = self
            .data(x)
            .chunks(c)
            .zip(sv)
            .flat_map(|(row, f)| row.iter().map(move |v| v * f))
            .collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(vec![r, c], out, Op::ScaleRows { x, s }, rg))
    }

    /// For every row with `active[i]`, zeroes entries where `keep` is false
    /// and renormalizes the remainder to sum to one. Other rows pass through.
    pub fn renormalize_rows(&mut self, x: Var, keep: &[bool], active: &[bool]) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "renormalize_rows")?;
        if keep.len() != r * c || active.len() != r {
            return Err(shape_err("renormalize_rows", format!("mask sizes {} / {} for {:?}", keep.len(), active.len(), self.shape(x))));
        }
        let mut out = self.data(x).to_vec();
        let mut sums = vec![1.0; r];
        for i in 0..r {
            if !active[i] {
                continue;
            }
            let row = &mut out[i * c..(i + 1) * c];
            let m = &keep[i * c..(i + 1) * c];
            let s: f64 = row.iter().zip(m).filter(|(_, k)| **k).map(|(v, _)| v).sum();
            if s <= 0.0 {
                return Err(invalid("renormalize_rows: kept mass is zero"));
            }
            sums[i] = s;
            for (v, k) in row.iter_mut().zip(m) {
                *v = if *k { *v / s } else { 0.0 };
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![r, c],
            out,
            Op::RenormRows { x, keep: keep.to_vec(), active: active.to_vec(), sums },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} into {shape:?}", self.shape(x))));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), self.data(x).to_vec(), Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Column means of an `m×n` matrix, shape `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.data(x).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / r.max(1) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c], out, Op::MeanRows(x), rg))
    }

    /// Mean over rows of the label-smoothed cross entropy. The smoothed
    /// target puts `1 - eps` on the gold token and `eps / (V - 1)` elsewhere.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let (t, v) = dims2(self.value(logits), "cross_entropy")?;
        if targets.len() != t {
            return Err(shape_err("cross_entropy", format!("{} targets for logits {:?}", targets.len(), self.shape(logits))));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(invalid(format!("label smoothing must lie in [0, 1), got {eps}")));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::OutOfRange { op: "cross_entropy", index: bad, bound: v });
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0;
        let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
        for (row, &y) in probs.chunks_mut(v).zip(targets) {
            let lse = log_sum_exp(row);
            let mut sum_other = 0.0;
            for (j, z) in row.iter().enumerate() {
                if j != y {
                    sum_other += z - lse;
                }
            }
            let gold = row[y] - lse;
            total -= (1.0 - eps) * gold + off * sum_other;
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let loss = total / t.max(1) as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), eps, probs },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over independent segments.
    ///
    /// `q: N×d`, `k, v: M×d`; `d` is split into `heads` equal slices. With
    /// `causal`, query `i` of a segment only sees keys `0..=i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &[AttnSegment],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (n, d) = dims2(self.value(q), "attention")?;
        let (m, dk) = dims2(self.value(k), "attention")?;
        if self.shape(v) != [m, dk] || dk != d {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("model width {d} not divisible by {heads} heads")));
        }
        for s in segs {
            if s.q_start + s.q_len > n || s.k_start + s.k_len > m || (causal && s.q_len != s.k_len) {
                return Err(shape_err("attention", format!("segment {s:?} incompatible with {n} queries / {m} keys")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::new();
        let mut row = Vec::new();
        for s in segs {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let qi = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    let visible = if causal { i + 1 } else { s.k_len };
                    row.clear();
                    for j in 0..s.k_len {
                        if j < visible {
                            let kj = &kd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                            row.push(dot(qi, kj) * scale);
                        } else {
                            row.push(f64::NEG_INFINITY);
                        }
                    }
                    softmax_in_place(&mut row);
                    let o = &mut out[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    for (j, &p) in row.iter().enumerate().take(visible) {
                        let vj = &vd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                        o.iter_mut().zip(vj).for_each(|(a, b)| *a += p * b);
                    }
                    probs.extend_from_slice(&row);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![n, d],
            out,
            Op::Attention { q, k, v, segs: segs.to_vec(), heads, causal, probs },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, overwriting gradients of any
    /// previous sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds gradients of parameter leaves into the store's gradient buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(id)) = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    store.get_mut(id).accumulate_grad(g);
                }
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims2(self.value(*a), "matmul").unwrap();
                let n = y.len() / m.max(1);
                if self.requires_grad(*a) {
                    let ga = acc_buf(grads, *a, m * k);
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, self.data(*b), !trans_b, ga, 1.0);
                }
                if self.requires_grad(*b) {
                    let gb = acc_buf(grads, *b, k * n);
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, self.data(*a), false, gb, 1.0);
                    } else {
                        gemm(k, m, n, self.data(*a), true, g, false, gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(*v) {
                        add_into(acc_buf(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.requires_grad(*x) {
                    add_into(acc_buf(grads, *x, g.len()), g);
                }
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let gb = acc_buf(grads, *bias, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bd = self.data(*b);
                    let ga = acc_buf(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                }
                if self.requires_grad(*b) {
                    let ad = self.data(*a);
                    let gb = acc_buf(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                }
            }
            Op::MulConst { x, factors } => {
                let gx = acc_buf(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * factors[j];
                }
            }
            Op::Affine { x, scale } => {
                let gx = acc_buf(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
            Op::Softmax(x) => {
                let n = last_dim(&node.value);
                let gx = acc_buf(grads, *x, g.len());
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = dot(gr, yr);
                    for j in 0..n {
                        out[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = acc_buf(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                let gx = acc_buf(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * gelu_grad(xd[j]);
                }
            }
            Op::Abs(x) => {
                let xd = self.data(*x);
                let gx = acc_buf(grads, *x, g.len());
                for j in 0..g.len() {
                    let s = if xd[j] > 0.0 {
                        1.0
                    } else if xd[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gx[j] += g[j] * s;
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = last_dim(&node.value);
                let gam = self.data(*gamma);
                if self.requires_grad(*gamma) {
                    let gg = acc_buf(grads, *gamma, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.requires_grad(*beta) {
                    let gb = acc_buf(grads, *beta, n);
                    for gr in g.chunks(n) {
                        add_into(gb, gr);
                    }
                }
                if self.requires_grad(*x) {
                    let gx = acc_buf(grads, *x, g.len());
                    let mut dh = vec![0.0; n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = gr[j] * gam[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / n as f64;
                        let m2 = dot(&dh, hr) / n as f64;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tl = self.value(*table).len();
                let d = last_dim(self.value(*table));
                let gt = acc_buf(grads, *table, tl);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.requires_grad(*p) {
                        add_into(acc_buf(grads, *p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = last_dim(self.value(*x));
                let len = self.value(*x).len();
                let gx = acc_buf(grads, *x, len);
                add_into(&mut gx[start * c..start * c + g.len()], g);
            }
            Op::SliceCols { x, start } => {
                let c = last_dim(self.value(*x));
                let w = last_dim(&node.value);
                let len = self.value(*x).len();
                let gx = acc_buf(grads, *x, len);
                for (r, gr) in g.chunks(w).enumerate() {
                    add_into(&mut gx[r * c + start..r * c + start + w], gr);
                }
            }
            Op::MaskedZero { x, rows } => {
                let n = last_dim(&node.value);
                let gx = acc_buf(grads, *x, g.len());
                for ((out, gr), &m) in gx.chunks_mut(n).zip(g.chunks(n)).zip(rows) {
                    if !m {
                        add_into(out, gr);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = last_dim(&node.value);
                let len = self.value(*x).len();
                let gx = acc_buf(grads, *x, len);
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::IndexAddRows { x, idx } => {
                let c = last_dim(&node.value);
                let len = self.value(*x).len();
                let gx = acc_buf(grads, *x, len);
                for (r, &dst) in idx.iter().enumerate() {
                    add_into(&mut gx[r * c..(r + 1) * c], &g[dst * c..(dst + 1) * c]);
                }
            }
            Op::GatherElems { x, idx } => {
                let c = last_dim(self.value(*x));
                let len = self.value(*x).len();
                let gx = acc_buf(grads, *x, len);
                for (r, &(a, b)) in idx.iter().enumerate() {
                    gx[a * c + b] += g[r];
                }
            }
            Op::ScaleRows { x, s } => {
                let c = last_dim(&node.value);
                let sv = self.data(*s);
                if self.requires_grad(*x) {
                    let gx = acc_buf(grads, *x, g.len());
                    for (r, (out, gr)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        out.iter_mut().zip(gr).for_each(|(o, v)| *o += v * sv[r]);
                    }
                }
                if self.requires_grad(*s) {
                    let xd = self.data(*x);
                    let gs = acc_buf(grads, *s, sv.len());
                    for (r, (gr, xr)) in g.chunks(c).zip(xd.chunks(c)).enumerate() {
                        gs[r] += dot(gr, xr);
                    }
                }
            }
            Op::RenormRows { x, keep, active, sums } => {
                let c = last_dim(&node.value);
                let gx = acc_buf(grads, *x, g.len());
                for r in 0..active.len() {
                    let gr = &g[r * c..(r + 1) * c];
                    let out = &mut gx[r * c..(r + 1) * c];
                    if !active[r] {
                        add_into(out, gr);
                        continue;
                    }
                    let yr = &y[r * c..(r + 1) * c];
                    let s = dot(gr, yr);
                    for j in 0..c {
                        if keep[r * c + j] {
                            out[j] += (gr[j] - s) / sums[r];
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(acc_buf(grads, *x, g.len()), g),
            Op::Sum(x) => {
                let len = self.value(*x).len();
                acc_buf(grads, *x, len).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::MeanRows(x) => {
                let c = g.len();
                let len = self.value(*x).len();
                let inv = 1.0 / (len / c.max(1)).max(1) as f64;
                for row in acc_buf(grads, *x, len).chunks_mut(c) {
                    for j in 0..c {
                        row[j] += g[j] * inv;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, eps, probs } => {
                let (t, v) = dims2(self.value(*logits), "cross_entropy").unwrap();
                let off = if v > 1 { eps / (v - 1) as f64 } else { 0.0 };
                let scale = g[0] / t.max(1) as f64;
                let gl = acc_buf(grads, *logits, t * v);
                for (r, &yid) in targets.iter().enumerate() {
                    for j in 0..v {
                        let q = if j == yid { 1.0 - eps } else { off };
                        gl[r * v + j] += scale * (probs[r * v + j] - q);
                    }
                }
            }
            Op::Attention { q, k, v, segs, heads, causal, probs } => {
                self.attention_backward(g, *q, *k, *v, segs, *heads, *causal, probs, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        segs: &[AttnSegment],
        heads: usize,
        causal: bool,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = last_dim(self.value(q));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut p_off = 0;
        let mut dp = Vec::new();
        for s in segs {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let row = &probs[p_off..p_off + s.k_len];
                    p_off += s.k_len;
                    let visible = if causal { i + 1 } else { s.k_len };
                    let qi_at = (s.q_start + i) * d + c0;
                    let go = &g[qi_at..qi_at + dh];
                    dp.clear();
                    for j in 0..visible {
                        let vj_at = (s.k_start + j) * d + c0;
                        dp.push(dot(go, &vd[vj_at..vj_at + dh]));
                        for c in 0..dh {
                            gv[vj_at + c] += row[j] * go[c];
                        }
                    }
                    let sum: f64 = (0..visible).map(|j| dp[j] * row[j]).sum();
                    for j in 0..visible {
                        let ds = row[j] * (dp[j] - sum) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj_at = (s.k_start + j) * d + c0;
                        for c in 0..dh {
                            gq[qi_at + c] += ds * kd[kj_at + c];
                            gk[kj_at + c] += ds * qd[qi_at + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.requires_grad(var) {
                add_into(acc_buf(grads, var, buf.len()), &buf);
            }
        }
    }
}

fn acc_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
