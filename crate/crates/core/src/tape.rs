//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the tape in reverse and returns the gradients of every leaf that
//! required one. Parameter leaves borrow their tensor, so recording a forward
//! pass does not copy the model.
//!
//! Only nodes that (transitively) depend on a gradient-requiring leaf take
//! part in the backward pass. A model whose tensors are all frozen therefore
//! records a plain forward evaluation.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{numel, Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    AddBias { x: usize, bias: usize, cols: usize },
    Scale { x: usize, factor: T },
    AddScalar { x: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: usize, cols: usize },
    Embedding { table: usize, ids: Vec<usize>, cols: usize },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<T>, cols: usize, count: usize },
    HeadScores { q: usize, k: usize, layout: HeadLayout, scale: T },
    HeadMix { p: usize, v: usize, layout: HeadLayout },
    LastRows { p: usize, seq: usize },
    Dot { x: usize, weights: Vec<T> },
    Sum { x: usize },
    SelectRows { x: usize, rows: Vec<usize>, cols: usize },
}

/// How a `[batch * seq, d_model]` activation splits into attention heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_model: usize,
}

impl HeadLayout {
    fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    fn validate(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Shape {
                op,
                detail: format!("d_model {} not divisible by {} heads", self.d_model, self.heads),
            });
        }
        if shape != [self.batch * self.seq, self.d_model] {
            return Err(Error::Dimension {
                op,
                lhs: shape.to_vec(),
                rhs: vec![self.batch * self.seq, self.d_model],
            });
        }
        Ok(())
    }
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Recorded computation graph.
pub struct Tape<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    params: BTreeMap<usize, Vec<T>>,
    leaves: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the parameter registered under `id`, if it was reached.
    pub fn param(&self, id: usize) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of a non-parameter variable leaf.
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.leaves.get(&var.0).map(Vec::as_slice)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }

    /// Adds `scale * grad` into the gradient slot of each reached parameter.
    /// Frozen tensors are skipped.
    pub fn accumulate_into(&self, params: &mut [Tensor<T>], scale: T) -> Result<()> {
        for (&id, g) in &self.params {
            let bound = params.len();
            let t = params.get_mut(id).ok_or(Error::Index {
                what: "parameter",
                index: id,
                bound,
            })?;
            t.accumulate_grad(g, scale)?;
        }
        Ok(())
    }
}

fn check_rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape {
            op,
            detail: format!("expected a rank-2 tensor, got shape {shape:?}"),
        }),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy(0.797_884_560_802_865_4);
    let a = T::from_f64_lossy(0.044_715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, len: usize) -> &mut [T] {
    grads[idx].get_or_insert_with(|| vec![T::zero(); len])
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// A tape that records gradients for trainable parameters and variables.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never requires gradients (pure forward evaluation).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.to_vec())
            .expect("tape values are finite and shape-consistent")
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        inputs: &[usize],
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a parameter leaf. It requires a gradient iff the tensor is
    /// trainable and the tape has gradients enabled.
    pub fn param(&mut self, id: usize, tensor: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor.data()),
            shape: tensor.shape().to_vec(),
            op: Op::Leaf,
            requires_grad: self.grad_enabled && tensor.is_trainable(),
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant leaf (never differentiated).
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            value: Cow::Owned(tensor.into_data()),
            shape,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a free variable leaf whose gradient is reported by
    /// [`Gradients::wrt`].
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node {
            value: Cow::Owned(tensor.into_data()),
            shape,
            op: Op::Leaf,
            requires_grad: self.grad_enabled,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_rank2("matmul", self.shape(a))?;
        let (k2, n) = check_rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), k, 1, self.value(b), n, 1, T::zero(), &mut out, n, 1);
        self.push("matmul", vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_rank2("matmul_nt", self.shape(a))?;
        let (n, k2) = check_rank2("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), k, 1, self.value(b), 1, k, T::zero(), &mut out, n, 1);
        self.push("matmul_nt", vec![m, n], out, Op::MatMulNt { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Adds a rank-1 bias over the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = last_dim(self.shape(x));
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % cols])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, out, Op::AddBias { x: x.0, bias: bias.0, cols }, &[x.0, bias.0])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x: x.0, factor }, &[x.0])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_scalar", shape, out, Op::AddScalar { x: x.0 }, &[x.0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let shape = self.shape(x).to_vec();
        self.push("gelu", shape, out, Op::Gelu { x: x.0 }, &[x.0])
    }

    /// Per-row normalization over the last dimension, then `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = last_dim(self.shape(x));
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: if self.shape(gain) != [cols] {
                    self.shape(gain).to_vec()
                } else {
                    self.shape(bias).to_vec()
                },
            });
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xs.len() / cols;
        let n = T::from_usize(cols).unwrap();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut out = vec![T::zero(); xs.len()];
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, cols, xhat, rstd },
            &[x.0, gain.0, bias.0],
        )
    }

    /// Softmax over the last dimension with max subtraction.
    ///
    /// With `causal`, the trailing two dimensions must be square and entry
    /// `(i, j)` with `j > i` of every trailing matrix is exactly zero.
    pub fn row_softmax_masked(&mut self, x: Var, causal: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = last_dim(&shape);
        if causal {
            let square = shape.len() >= 2 && shape[shape.len() - 2] == cols;
            if !square {
                return Err(Error::Shape {
                    op: "row_softmax_masked",
                    detail: format!("causal masking needs square trailing matrices, got {shape:?}"),
                });
            }
        }
        let xs = self.value(x);
        let rows = xs.len() / cols;
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let visible = if causal { r % cols + 1 } else { cols };
            let row = &xs[r * cols..r * cols + visible];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[r * cols..r * cols + visible];
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mx).exp();
                total = total + *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / total);
        }
        self.push("row_softmax_masked", shape, out, Op::Softmax { x: x.0, cols }, &[x.0])
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = check_rank2("embedding", self.shape(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "embedding row",
                index: bad,
                bound: rows,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        self.push(
            "embedding",
            vec![ids.len(), cols],
            out,
            Op::Embedding { table: table.0, ids: ids.to_vec(), cols },
            &[table.0],
        )
    }

    /// Mean of `-log softmax(logits[r])[target[r]]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = check_rank2("cross_entropy", self.shape(logits))?;
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= cols) {
            return Err(Error::Index {
                what: "cross-entropy target",
                index: bad,
                bound: cols,
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::contract("cross_entropy needs at least one target"));
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); xs.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let Some(t) = targets[r] else { continue };
            let row = &xs[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total = total + (lse - row[t]);
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, cols, count },
            &[logits.0],
        )
    }

    /// Scaled per-head scores `q_h k_hᵀ / sqrt(d_head)`, shaped
    /// `[batch * heads, seq, seq]` (batch-major, then head).
    pub fn head_scores(&mut self, q: Var, k: Var, layout: HeadLayout) -> Result<Var> {
        layout.validate("head_scores", self.shape(q))?;
        layout.validate("head_scores", self.shape(k))?;
        let HeadLayout { batch, seq, heads, d_model } = layout;
        let dh = layout.d_head();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let mut out = vec![T::zero(); batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d_model + h * dh;
                let o = (b * heads + h) * seq * seq;
                T::gemm(
                    seq, dh, seq, scale,
                    &qv[off..], d_model, 1,
                    &kv[off..], 1, d_model,
                    T::zero(), &mut out[o..o + seq * seq], seq, 1,
                );
            }
        }
        self.push(
            "head_scores",
            vec![batch * heads, seq, seq],
            out,
            Op::HeadScores { q: q.0, k: k.0, layout, scale },
            &[q.0, k.0],
        )
    }

    /// Mixes values with per-head attention probabilities back into a
    /// `[batch * seq, d_model]` activation.
    pub fn head_mix(&mut self, p: Var, v: Var, layout: HeadLayout) -> Result<Var> {
        layout.validate("head_mix", self.shape(v))?;
        let HeadLayout { batch, seq, heads, d_model } = layout;
        if self.shape(p) != [batch * heads, seq, seq] {
            return Err(Error::Dimension {
                op: "head_mix",
                lhs: self.shape(p).to_vec(),
                rhs: vec![batch * heads, seq, seq],
            });
        }
        let dh = layout.d_head();
        let pv = self.value(p);
        let vv = self.value(v);
        let mut out = vec![T::zero(); batch * seq * d_model];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d_model + h * dh;
                let po = (b * heads + h) * seq * seq;
                T::gemm(
                    seq, seq, dh, T::one(),
                    &pv[po..po + seq * seq], seq, 1,
                    &vv[off..], d_model, 1,
                    T::zero(), &mut out[off..], d_model, 1,
                );
            }
        }
        self.push(
            "head_mix",
            vec![batch * seq, d_model],
            out,
            Op::HeadMix { p: p.0, v: v.0, layout },
            &[p.0, v.0],
        )
    }

    /// Last row of every trailing square matrix: `[n, seq, seq] -> [n, seq]`.
    pub fn last_rows(&mut self, p: Var) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        let [n, s1, seq] = shape[..] else {
            return Err(Error::Shape {
                op: "last_rows",
                detail: format!("expected [n, seq, seq], got {shape:?}"),
            });
        };
        if s1 != seq {
            return Err(Error::Shape {
                op: "last_rows",
                detail: format!("trailing matrices are not square: {shape:?}"),
            });
        }
        let pv = self.value(p);
        let mut out = Vec::with_capacity(n * seq);
        for i in 0..n {
            let start = i * seq * seq + (seq - 1) * seq;
            out.extend_from_slice(&pv[start..start + seq]);
        }
        self.push("last_rows", vec![n, seq], out, Op::LastRows { p: p.0, seq }, &[p.0])
    }

    /// Scalar `Σ x_i w_i` with constant weights.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Dimension {
                op: "dot",
                lhs: self.shape(x).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = self.value(x).iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        self.push("dot", vec![1], vec![s], Op::Dot { x: x.0, weights }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x: x.0 }, &[x.0])
    }

    /// Picks rows of a rank-2 tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = check_rank2("select_rows", self.shape(x))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index {
                what: "row",
                index: bad,
                bound: n,
            });
        }
        let xs = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xs[r * cols..(r + 1) * cols]);
        }
        self.push(
            "select_rows",
            vec![rows.len(), cols],
            out,
            Op::SelectRows { x: x.0, rows: rows.to_vec(), cols },
            &[x.0],
        )
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Gradients accumulate additively when a node feeds several consumers.
    /// Leaves that do not require a gradient never appear in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: BTreeMap::new(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let rg = |i: usize| self.nodes[i].requires_grad;
        let val = |i: usize| -> &[T] { &self.nodes[i].value };
        let len = |i: usize| self.nodes[i].value.len();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match node.param {
                        Some(id) => {
                            let slot = out.params.entry(id).or_insert_with(|| vec![T::zero(); g.len()]);
                            slot.iter_mut().zip(&g).for_each(|(s, &v)| *s = *s + v);
                        }
                        None => {
                            out.leaves.insert(i, g);
                        }
                    }
                }
                &Op::MatMul { a, b, m, k, n } => {
                    if rg(a) {
                        let da = grad_slot(&mut grads, a, len(a));
                        T::gemm(m, n, k, T::one(), &g, n, 1, val(b), 1, n, T::one(), da, k, 1);
                    }
                    if rg(b) {
                        let db = grad_slot(&mut grads, b, len(b));
                        T::gemm(k, m, n, T::one(), val(a), 1, k, &g, n, 1, T::one(), db, n, 1);
                    }
                }
                &Op::MatMulNt { a, b, m, k, n } => {
                    if rg(a) {
                        let da = grad_slot(&mut grads, a, len(a));
                        T::gemm(m, n, k, T::one(), &g, n, 1, val(b), k, 1, T::one(), da, k, 1);
                    }
                    if rg(b) {
                        let db = grad_slot(&mut grads, b, len(b));
                        T::gemm(n, m, k, T::one(), &g, 1, n, val(a), k, 1, T::one(), db, k, 1);
                    }
                }
                &Op::Add { a, b } => {
                    for src in [a, b] {
                        if rg(src) {
                            let d = grad_slot(&mut grads, src, g.len());
                            d.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                }
                &Op::AddBias { x, bias, cols } => {
                    if rg(x) {
                        let d = grad_slot(&mut grads, x, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v);
                    }
                    if rg(bias) {
                        let d = grad_slot(&mut grads, bias, cols);
                        for (i, &v) in g.iter().enumerate() {
                            d[i % cols] = d[i % cols] + v;
                        }
                    }
                }
                &Op::Scale { x, factor } => {
                    if rg(x) {
                        let d = grad_slot(&mut grads, x, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + factor * v);
                    }
                }
                &Op::AddScalar { x } => {
                    if rg(x) {
                        let d = grad_slot(&mut grads, x, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v);
                    }
                }
                &Op::Gelu { x } => {
                    if rg(x) {
                        let xs = val(x);
                        let d = grad_slot(&mut grads, x, g.len());
                        for ((d, &gv), &xv) in d.iter_mut().zip(&g).zip(xs) {
                            *d = *d + gv * gelu_parts(xv).1;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
                    let (x, gain, bias, cols) = (*x, *gain, *bias, *cols);
                    let rows = g.len() / cols;
                    if rg(gain) {
                        let d = grad_slot(&mut grads, gain, cols);
                        for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                            d[i % cols] = d[i % cols] + gv * h;
                        }
                    }
                    if rg(bias) {
                        let d = grad_slot(&mut grads, bias, cols);
                        for (i, &gv) in g.iter().enumerate() {
                            d[i % cols] = d[i % cols] + gv;
                        }
                    }
                    if rg(x) {
                        let gn = val(gain);
                        let n = T::from_usize(cols).unwrap();
                        let d = grad_slot(&mut grads, x, g.len());
                        for r in 0..rows {
                            let base = r * cols;
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for c in 0..cols {
                                let dh = g[base + c] * gn[c];
                                m1 = m1 + dh;
                                m2 = m2 + dh * xhat[base + c];
                            }
                            m1 = m1 / n;
                            m2 = m2 / n;
                            for c in 0..cols {
                                let dh = g[base + c] * gn[c];
                                d[base + c] = d[base + c] + rstd[r] * (dh - m1 - xhat[base + c] * m2);
                            }
                        }
                    }
                }
                &Op::Softmax { x, cols } => {
                    if rg(x) {
                        let y = &node.value;
                        let d = grad_slot(&mut grads, x, g.len());
                        for r in 0..g.len() / cols {
                            let span = r * cols..(r + 1) * cols;
                            let dotp: T = y[span.clone()].iter().zip(&g[span.clone()]).map(|(&a, &b)| a * b).sum();
                            for c in span {
                                d[c] = d[c] + y[c] * (g[c] - dotp);
                            }
                        }
                    }
                }
                Op::Embedding { table, ids, cols } => {
                    let (table, cols) = (*table, *cols);
                    if rg(table) {
                        let d = grad_slot(&mut grads, table, len(table));
                        for (r, &id) in ids.iter().enumerate() {
                            for c in 0..cols {
                                d[id * cols + c] = d[id * cols + c] + g[r * cols + c];
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs, cols, count } => {
                    let (logits, cols) = (*logits, *cols);
                    if rg(logits) {
                        let scale = g[0] / T::from_usize(*count).unwrap();
                        let d = grad_slot(&mut grads, logits, probs.len());
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for c in 0..cols {
                                let onehot = if c == t { T::one() } else { T::zero() };
                                d[r * cols + c] = d[r * cols + c] + scale * (probs[r * cols + c] - onehot);
                            }
                        }
                    }
                }
                &Op::HeadScores { q, k, layout, scale } => {
                    let HeadLayout { batch, seq, heads, d_model } = layout;
                    let dh = layout.d_head();
                    for (dst, other, transpose) in [(q, k, false), (k, q, true)] {
                        if !rg(dst) {
                            continue;
                        }
                        let ov = val(other);
                        let d = grad_slot(&mut grads, dst, len(dst));
                        for b in 0..batch {
                            for h in 0..heads {
                                let off = b * seq * d_model + h * dh;
                                let go = (b * heads + h) * seq * seq;
                                let (rs, cs) = if transpose { (1, seq) } else { (seq, 1) };
                                T::gemm(
                                    seq, seq, dh, scale,
                                    &g[go..go + seq * seq], rs, cs,
                                    &ov[off..], d_model, 1,
                                    T::one(), &mut d[off..], d_model, 1,
                                );
                            }
                        }
                    }
                }
                &Op::HeadMix { p, v, layout } => {
                    let HeadLayout { batch, seq, heads, d_model } = layout;
                    let dh = layout.d_head();
                    if rg(p) {
                        let vv = val(v);
                        let d = grad_slot(&mut grads, p, len(p));
                        for b in 0..batch {
                            for h in 0..heads {
                                let off = b * seq * d_model + h * dh;
                                let po = (b * heads + h) * seq * seq;
                                T::gemm(
                                    seq, dh, seq, T::one(),
                                    &g[off..], d_model, 1,
                                    &vv[off..], 1, d_model,
                                    T::one(), &mut d[po..po + seq * seq], seq, 1,
                                );
                            }
                        }
                    }
                    if rg(v) {
                        let pv = val(p);
                        let d = grad_slot(&mut grads, v, len(v));
                        for b in 0..batch {
                            for h in 0..heads {
                                let off = b * seq * d_model + h * dh;
                                let po = (b * heads + h) * seq * seq;
                                T::gemm(
                                    seq, seq, dh, T::one(),
                                    &pv[po..po + seq * seq], 1, seq,
                                    &g[off..], d_model, 1,
                                    T::one(), &mut d[off..], d_model, 1,
                                );
                            }
                        }
                    }
                }
                &Op::LastRows { p, seq } => {
                    if rg(p) {
                        let d = grad_slot(&mut grads, p, len(p));
                        for i in 0..g.len() / seq {
                            let start = i * seq * seq + (seq - 1) * seq;
                            for j in 0..seq {
                                d[start + j] = d[start + j] + g[i * seq + j];
                            }
                        }
                    }
                }
                Op::Dot { x, weights } => {
                    let x = *x;
                    if rg(x) {
                        let d = grad_slot(&mut grads, x, weights.len());
                        d.iter_mut().zip(weights).for_each(|(d, &w)| *d = *d + g[0] * w);
                    }
                }
                &Op::Sum { x } => {
                    if rg(x) {
                        let d = grad_slot(&mut grads, x, len(x));
                        d.iter_mut().for_each(|d| *d = *d + g[0]);
                    }
                }
                Op::SelectRows { x, rows, cols } => {
                    let (x, cols) = (*x, *cols);
                    if rg(x) {
                        let d = grad_slot(&mut grads, x, len(x));
                        for (i, &r) in rows.iter().enumerate() {
                            for c in 0..cols {
                                d[r * cols + c] = d[r * cols + c] + g[i * cols + c];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
