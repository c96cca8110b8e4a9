//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes once in
//! reverse insertion order (which is a topological order), hands back the
//! gradients of the leaves that asked for them, and drops all intermediate
//! values. A consumed tape refuses a second backward pass.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, gemm_nt, gemm_tn, softmax_in_place, Scalar, Tensor};

/// Additive bias applied to masked attention logits.
pub const MASK_BIAS: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule: `(upstream grad, input values) -> input grads`.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Tensor<T>>>;

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Sum(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<T>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        tables: Rc<RopeTables<T>>,
        n_heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        scale: T,
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    AddToRows {
        base: Var,
        vector: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        included: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Precomputed cos/sin tables, `[t, d_head/2]`.
pub struct RopeTables<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Scalar> RopeTables<T> {
    pub fn new(positions: &[usize], d_head: usize, base: f64) -> Result<Self> {
        if d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even head width, got {d_head}"
            )));
        }
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for j in 0..half {
                let freq = base.powf(-2.0 * j as f64 / d_head as f64);
                let angle = p as f64 * freq;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        Ok(Self { cos, sin, half })
    }

    fn rotate(&self, row: usize, x: &mut [T], inverse: bool) {
        let c = &self.cos[row * self.half..(row + 1) * self.half];
        let s = &self.sin[row * self.half..(row + 1) * self.half];
        for j in 0..self.half {
            let (x0, x1) = (x[2 * j], x[2 * j + 1]);
            let sj = if inverse { -s[j] } else { s[j] };
            x[2 * j] = x0 * c[j] - x1 * sj;
            x[2 * j + 1] = x0 * sj + x1 * c[j];
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Head-major attention probabilities `[heads, q, kv]` saved by an
    /// attention node, if `v` is one.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, n_heads, .. } => Some((probs, *n_heads)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        assert!(!self.consumed, "tape already consumed by backward()");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "mul {:?} * {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of scalar nodes, accumulated left to right.
    pub fn mean_scalars(&mut self, items: &[Var]) -> Result<Var> {
        let (&first, rest) = items
            .split_first()
            .ok_or_else(|| Error::Contract("mean of zero terms".into()))?;
        let mut acc = first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(self.scale(acc, T::one() / T::from_usize(items.len()).unwrap()))
    }

    /// `x / sqrt(mean(x²) + eps) * weight`, row-wise over the last extent.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: T) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let d = vw.numel();
        if d == 0 || vx.shape().last() != Some(&d) {
            return Err(Error::Dimension(format!(
                "rms_norm input {:?} with weight {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let mut out = vx.clone();
        let mut inv_rms = Vec::with_capacity(vx.numel() / d);
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::from_usize(d).unwrap();
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (o, &w) in row.iter_mut().zip(vw.data()) {
                *o = *o * inv * w;
            }
        }
        let rg = self.rg(&[x, weight]);
        Ok(self.push(
            out,
            Op::RmsNorm {
                x,
                weight,
                inv_rms,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = crate::tensor::softmax_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Row gather: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let vocab = vt.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocab { id: bad, vocab });
        }
        let value = vt.select_rows(ids);
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rotary embedding on `[t, heads*d_head]`, one table row per input row.
    pub fn rope(&mut self, x: Var, tables: Rc<RopeTables<T>>, n_heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let (t, d) = (vx.rows(), vx.cols());
        if d != n_heads * tables.half * 2 || tables.cos.len() != t * tables.half {
            return Err(Error::Dimension(format!(
                "rope over [{t}, {d}] with {n_heads} heads and {} table rows",
                tables.cos.len() / tables.half.max(1)
            )));
        }
        let dh = d / n_heads;
        let mut out = vx.clone();
        for i in 0..t {
            let row = out.row_mut(i);
            for h in 0..n_heads {
                tables.rotate(i, &mut row[h * dh..(h + 1) * dh], false);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rope { x, tables, n_heads }, rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[t, D]`, `k` and `v` are `[s, D]`, heads occupy contiguous
    /// column blocks. `allowed` is a row-major `[t, s]` mask; disallowed
    /// logits receive [`MASK_BIAS`] before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        allowed: &[bool],
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (vq.rows(), vq.cols());
        let s = vk.rows();
        if vk.cols() != d || vv.cols() != d || vv.rows() != s || d % n_heads != 0 {
            return Err(Error::Dimension(format!(
                "attention q{:?} k{:?} v{:?} heads {n_heads}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            )));
        }
        if allowed.len() != t * s {
            return Err(Error::Dimension(format!(
                "mask holds {} entries, attention needs {t}x{s}",
                allowed.len()
            )));
        }
        let dh = d / n_heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let bias = T::lit(MASK_BIAS);
        let mut probs = vec![T::zero(); n_heads * t * s];
        let mut out = Tensor::zeros(&[t, d]);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let qi = &vq.row(i)[cols.clone()];
                let p = &mut probs[(h * t + i) * s..(h * t + i + 1) * s];
                for j in 0..s {
                    let mut score = dot(qi, &vk.row(j)[cols.clone()]) * scale;
                    if !allowed[i * s + j] {
                        score += bias;
                    }
                    p[j] = score;
                }
                softmax_in_place(p);
                let o = &mut out.row_mut(i)[cols.clone()];
                for j in 0..s {
                    if p[j] != T::zero() {
                        axpy(p[j], &vv.row(j)[cols.clone()], o);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                scale,
                probs,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&values)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.rows()) {
            return Err(Error::Index(format!(
                "row {bad} out of range for {} rows",
                vx.rows()
            )));
        }
        let value = vx.select_rows(rows);
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `out = base` with `vector` added to each listed row.
    pub fn add_to_rows(&mut self, base: Var, vector: Var, rows: &[usize]) -> Result<Var> {
        let (vb, vv) = (self.value(base), self.value(vector));
        let d = vb.cols();
        if vv.numel() != d {
            return Err(Error::Dimension(format!(
                "vector of {} added to rows of width {d}",
                vv.numel()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= vb.rows()) {
            return Err(Error::Index(format!(
                "row {bad} out of range for {} rows",
                vb.rows()
            )));
        }
        let mut out = vb.clone();
        for &r in rows {
            for (o, &x) in out.row_mut(r).iter_mut().zip(vv.data()) {
                *o += x;
            }
        }
        let rg = self.rg(&[base, vector]);
        Ok(self.push(
            out,
            Op::AddToRows {
                base,
                vector,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over rows with `included[i]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        included: &[bool],
    ) -> Result<Var> {
        let vl = self.value(logits);
        let (t, vocab) = (vl.rows(), vl.cols());
        if targets.len() != t || included.len() != t {
            return Err(Error::Dimension(format!(
                "cross_entropy over {t} rows with {} targets and {} mask entries",
                targets.len(),
                included.len()
            )));
        }
        let count = included.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![T::zero(); t * vocab];
        let mut total = T::zero();
        for i in 0..t {
            if !included[i] {
                continue;
            }
            let target = targets[i];
            if target >= vocab {
                return Err(Error::Vocab { id: target, vocab });
            }
            let row = vl.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[target];
            let p = &mut probs[i * vocab..(i + 1) * vocab];
            for (pj, &z) in p.iter_mut().zip(row) {
                *pj = (z - lse).exp();
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                included: included.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// An operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Propagates `d loss / d node` to every leaf created with
    /// `requires_grad`, then releases the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract(
                "backward() called twice on the same graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads.insert(Var(idx), g);
                continue;
            }
            for (input, contribution) in self.input_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        self.consumed = true;
        self.nodes.clear();
        self.nodes.shrink_to_fit();
        Ok(out)
    }

    fn input_grads(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(g.data(), vb.data(), &mut da, m, n, k);
                    res.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(va.data(), g.data(), &mut db, m, k, n);
                    res.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y);
                    res.push((*a, Tensor::new(g.shape().to_vec(), d.collect())?));
                }
                if wants(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y);
                    res.push((*b, Tensor::new(g.shape().to_vec(), d.collect())?));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.map(|x| x * *s))),
            Op::Silu(a) => {
                let d = g.data().iter().zip(val(*a).data()).map(|(&gy, &x)| {
                    let sg = sigmoid(x);
                    gy * sg * (T::one() + x * (T::one() - sg))
                });
                res.push((*a, Tensor::new(g.shape().to_vec(), d.collect())?));
            }
            Op::Sum(a) => res.push((*a, Tensor::full(val(*a).shape(), g.item()))),
            Op::RmsNorm {
                x,
                weight,
                inv_rms,
            } => {
                let (vx, vw) = (val(*x), val(*weight));
                let d = vw.numel();
                let dn = T::from_usize(d).unwrap();
                let mut dx = Tensor::zeros(vx.shape());
                let mut dw = Tensor::zeros(vw.shape());
                for (r, ((xr, gr), dxr)) in vx
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    let mut proj = T::zero();
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dw.data_mut()[j] += gr[j] * xhat;
                        proj += gr[j] * vw.data()[j] * xhat;
                    }
                    proj /= dn;
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dxr[j] = inv * (gr[j] * vw.data()[j] - xhat * proj);
                    }
                }
                res.push((*x, dx));
                res.push((*weight, dw));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = Tensor::zeros(y.shape());
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(dx.data_mut().chunks_mut(n))
                {
                    let s = dot(yr, gr);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                res.push((*x, dx));
            }
            Op::Gather { table, ids } => {
                let mut dt = Tensor::zeros(val(*table).shape());
                for (i, &id) in ids.iter().enumerate() {
                    axpy(T::one(), g.row(i), dt.row_mut(id));
                }
                res.push((*table, dt));
            }
            Op::Rope { x, tables, n_heads } => {
                let mut dx = g.clone();
                let dh = dx.cols() / n_heads;
                for i in 0..dx.rows() {
                    let row = dx.row_mut(i);
                    for h in 0..*n_heads {
                        tables.rotate(i, &mut row[h * dh..(h + 1) * dh], true);
                    }
                }
                res.push((*x, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                scale,
                probs,
            } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let (t, d, s) = (vq.rows(), vq.cols(), vk.rows());
                let dh = d / n_heads;
                let mut dq = Tensor::zeros(vq.shape());
                let mut dk = Tensor::zeros(vk.shape());
                let mut dv = Tensor::zeros(vv.shape());
                let mut dp = vec![T::zero(); s];
                for h in 0..*n_heads {
                    let cols = h * dh..(h + 1) * dh;
                    for i in 0..t {
                        let p = &probs[(h * t + i) * s..(h * t + i + 1) * s];
                        let gi = &g.row(i)[cols.clone()];
                        for j in 0..s {
                            dp[j] = if p[j] == T::zero() {
                                T::zero()
                            } else {
                                dot(gi, &vv.row(j)[cols.clone()])
                            };
                        }
                        let weighted = dot(p, &dp);
                        for j in 0..s {
                            if p[j] == T::zero() {
                                continue;
                            }
                            axpy(p[j], gi, &mut dv.row_mut(j)[cols.clone()]);
                            let ds = p[j] * (dp[j] - weighted) * *scale;
                            axpy(ds, &vk.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                            axpy(ds, &vq.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                        }
                    }
                }
                res.push((*q, dq));
                res.push((*k, dk));
                res.push((*v, dv));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    let idx: Vec<usize> = (offset..offset + rows).collect();
                    offset += rows;
                    if wants(p) {
                        res.push((p, g.select_rows(&idx)));
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (i, &r) in rows.iter().enumerate() {
                    axpy(T::one(), g.row(i), dx.row_mut(r));
                }
                res.push((*x, dx));
            }
            Op::AddToRows { base, vector, rows } => {
                if wants(*vector) {
                    let mut dv = Tensor::zeros(val(*vector).shape());
                    for &r in rows {
                        axpy(T::one(), g.row(r), dv.data_mut());
                    }
                    res.push((*vector, dv));
                }
                res.push((*base, g.clone()));
            }
            Op::CrossEntropy {
                logits,
                targets,
                included,
                probs,
                count,
            } => {
                let vl = val(*logits);
                let vocab = vl.cols();
                let coef = g.item() / T::from_usize(*count).unwrap();
                let mut dl = Tensor::zeros(vl.shape());
                for i in 0..vl.rows() {
                    if !included[i] {
                        continue;
                    }
                    let p = &probs[i * vocab..(i + 1) * vocab];
                    let row = dl.row_mut(i);
                    for j in 0..vocab {
                        row[j] = coef * p[j];
                    }
                    row[targets[i]] -= coef;
                }
                res.push((*logits, dl));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
                let grads = backward(g, &values);
                if grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op returned {} gradients for {} inputs",
                        grads.len(),
                        inputs.len()
                    )));
                }
                res.extend(inputs.iter().copied().zip(grads));
            }
        }
        Ok(res)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_backward_with_ones() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.param(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        // ones · bᵀ
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 7.0, 3.0, 7.0]);
        // aᵀ · ones
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_and_square_grads() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[3], &[0.3, -2.0, 5.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[1], &[1.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.is_consumed());
        assert!(tape.is_empty());
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t64(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
        let x = tape.param(t64(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(w, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_certain() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[3, 4]));
        let loss = tape.cross_entropy(l, &[0, 1, 3], &[true; 3]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::<f32>::zeros(&[2, 4]);
        logits.row_mut(0)[2] = 1e6;
        logits.row_mut(1)[1] = 1e6;
        let mut tape = Tape::<f32>::new();
        let l = tape.constant(logits);
        let loss = tape.cross_entropy(l, &[2, 1], &[true, true]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_all_masked_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.cross_entropy(l, &[0, 1], &[false, false]),
            Err(Error::EmptyLoss)
        ));
    }

    /// Loss and gradient against probabilities enumerated by hand.
    #[test]
    fn cross_entropy_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::<f64>::randn(&[4, 5], 2.0, &mut rng);
        let targets = [4usize, 0, 2, 2];
        let included = [true, false, true, true];
        let mut expected = 0.0;
        let mut expected_grad = vec![0.0; 20];
        for i in 0..4 {
            if !included[i] {
                continue;
            }
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[targets[i]].exp() / z).ln();
            for j in 0..5 {
                let p = row[j].exp() / z;
                expected_grad[i * 5 + j] = (p - if j == targets[i] { 1.0 } else { 0.0 }) / 3.0;
            }
        }
        expected /= 3.0;
        let mut tape = Tape::<f64>::new();
        let l = tape.param(logits);
        let loss = tape.cross_entropy(l, &targets, &included).unwrap();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        for (a, b) in g.get(l).unwrap().data().iter().zip(&expected_grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::ones(&[3]));
        let y = tape.rms_norm(x, w, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 4], &[1.0, -1.0, 1.0, -1.0]));
        let w = tape.constant(Tensor::ones(&[4]));
        let y = tape.rms_norm(x, w, 1e-12).unwrap();
        for (a, b) in tape.value(y).data().iter().zip([1.0, -1.0, 1.0, -1.0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_single_slot_returns_value_row() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(t64(&[1, 4], &[0.3, -1.0, 2.0, 0.5]));
        let k = tape.constant(t64(&[1, 4], &[1.0, 1.0, -1.0, 0.2]));
        let v = tape.constant(t64(&[1, 4], &[7.0, 8.0, 9.0, 10.0]));
        let o = tape.attention(q, k, v, 2, &[true]).unwrap();
        assert_eq!(tape.value(o).data(), &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn attention_mask_size_is_checked() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let k = tape.constant(Tensor::zeros(&[3, 4]));
        let v = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(
            tape.attention(q, k, v, 2, &[true; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rope_rejects_odd_head_width() {
        assert!(matches!(
            RopeTables::<f64>::new(&[0, 1], 3, 10000.0),
            Err(Error::Config(_))
        ));
    }

    /// Every primitive differentiated against central differences.
    #[test]
    fn primitive_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let e = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let mix = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let params = vec![
            ("a".to_string(), a),
            ("b".to_string(), b),
            ("x".to_string(), x),
            ("w".to_string(), w),
            ("e".to_string(), e),
        ];
        let mut mask = vec![true; 3 * 5];
        mask[2] = false;
        mask[7] = false;
        let report = gradient_check(
            |tape, vars| {
                let (a, b, x, w, e) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
                let mx = tape.constant(mix.clone());
                let ab = tape.matmul(a, b)?;
                let ab_sq = tape.mul(ab, ab)?;
                let n = tape.rms_norm(x, w, 1e-5)?;
                let s = tape.silu(n);
                let sm = tape.softmax_rows(s);
                let sm_w = tape.mul(sm, mx)?;
                let g = tape.gather(e, &[1, 4, 1])?;
                let tables = Rc::new(RopeTables::new(&[0, 3, 7], 2, 10000.0)?);
                let r = tape.rope(g, tables, 2)?;
                let kv = tape.concat_rows(&[x, g])?;
                let kv2 = tape.select_rows(kv, &[0, 2, 3, 4, 5])?;
                let att = tape.attention(r, kv2, kv2, 2, &mask)?;
                let inj = tape.add_to_rows(att, w, &[0, 2])?;
                let inj = tape.scale(inj, 0.7);
                let ce = tape.cross_entropy(inj, &[0, 3, 1], &[true, false, true])?;
                let t1 = tape.sum(ab_sq);
                let t2 = tape.sum(sm_w);
                let t = tape.add(t1, t2)?;
                tape.add(t, ce)
            },
            &params,
            1e-5,
            0,
            1,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}
