//! Tape-based reverse-mode autodiff over dense row-major tensors.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops append
//! nodes; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into every node that depends on a grad-requiring leaf.
//!
//! Most ops view their operands as 2-D `[rows, cols]` where `cols` is the
//! last dimension. There is no implicit broadcasting: bias rows are added
//! with [`Graph::add_row`] and everything else must match exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::scalar::{gemm, Scalar, View};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        batch: usize,
        seq: usize,
        probs: Vec<T>,
    },
    PairFeatures {
        x: Var,
        n: usize,
    },
    PairDiff {
        x: Var,
        n: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Mse {
        pred: Var,
        diff: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of values plus the tape needed to differentiate it.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    unseeded_dropout: bool,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape.iter().product::<usize>() / cols.max(1), cols)
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// `seed` drives unseeded dropout masks only.
    pub fn with_seed(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            unseeded_dropout: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any dropout with `p > 0` drew its mask from the graph RNG.
    pub fn has_unseeded_dropout(&self) -> bool {
        self.unseeded_dropout
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = dims2(&sa);
        if sb.len() != 2 || sb[0] != k {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let n = sb[1];
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        if out_shape.len() == 1 {
            out_shape = vec![1, n];
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            View::row_major(0, k),
            self.value(b).data(),
            View::row_major(0, n),
            T::zero(),
            &mut out,
            View::row_major(0, n),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&out_shape, out)?, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = dims2(self.shape(x));
        if self.value(b).numel() != cols {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(cols) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::AddRow(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = *v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = dims2(self.shape(x));
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Row-wise layer normalization followed by the affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let n = T::from_usize(cols).unwrap();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
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
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Inverted dropout. `seed = Some(s)` draws a reproducible mask; `None`
    /// uses the graph RNG and marks the graph as non-deterministic.
    pub fn dropout(&mut self, x: Var, p: f64, seed: Option<u64>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).numel();
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let draw = |rng: &mut ChaCha8Rng| -> Vec<T> {
            (0..n)
                .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
                .collect()
        };
        let mask = match seed {
            Some(s) => draw(&mut ChaCha8Rng::seed_from_u64(s)),
            None => {
                self.unseeded_dropout = true;
                draw(&mut self.rng)
            }
        };
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel().max(1)).unwrap();
        let s = self.value(x).data().iter().copied().sum::<T>() / n;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Concatenates 2-D views along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(NnError::Config(format!(
                "concat of {} parts on axis {axis}",
                parts.len()
            )));
        }
        let first = dims2(self.shape(parts[0]));
        let mut data = Vec::new();
        let shape = if axis == 0 {
            let mut rows = 0;
            for &p in parts {
                let (r, c) = dims2(self.shape(p));
                if c != first.1 {
                    return Err(shape_err("concat", self.shape(parts[0]), self.shape(p)));
                }
                rows += r;
                data.extend_from_slice(self.value(p).data());
            }
            vec![rows, first.1]
        } else {
            let mut cols = 0;
            for &p in parts {
                let (r, c) = dims2(self.shape(p));
                if r != first.0 {
                    return Err(shape_err("concat", self.shape(parts[0]), self.shape(p)));
                }
                cols += c;
            }
            data.reserve(first.0 * cols);
            for r in 0..first.0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            vec![first.0, cols]
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_vec(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Contiguous range of rows (`axis = 0`) or columns (`axis = 1`).
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        let src = self.value(x);
        let (shape, data) = match axis {
            0 if start + len <= rows => (vec![len, cols], src.data()[start * cols..(start + len) * cols].to_vec()),
            1 if start + len <= cols => {
                let mut d = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    d.extend_from_slice(&src.row(r)[start..start + len]);
                }
                (vec![rows, len], d)
            }
            _ => {
                return Err(shape_err("slice", self.shape(x), &[axis, start, len]));
            }
        };
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Slice { x, axis, start }, ng))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let (rows, cols) = dims2(self.shape(x));
        let total = if axis == 0 { rows } else { cols };
        if sizes.iter().sum::<usize>() != total {
            return Err(shape_err("split", self.shape(x), sizes));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `out[i] = x[idx[i]]` row-wise; also serves as an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", self.shape(x), &[bad]));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_vec(&[idx.len(), cols], data)?,
            Op::GatherRows { x, idx: idx.to_vec() },
            ng,
        ))
    }

    /// Scaled dot-product attention over `batch` independent sequences of
    /// length `seq`. `qkv` is `[batch*seq, 3H]` holding queries, keys and values
    /// side by side; keys with `key_mask[row] == false` receive zero weight.
    /// Returns `[batch*seq, H]`.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        batch: usize,
        seq: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (rows, c3) = dims2(self.shape(qkv));
        if rows != batch * seq || c3 % 3 != 0 {
            return Err(shape_err("attention", self.shape(qkv), &[batch, seq, heads]));
        }
        let h = c3 / 3;
        if heads == 0 || h % heads != 0 {
            return Err(NnError::Config(format!(
                "hidden size {h} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != rows {
                return Err(shape_err("attention mask", &[rows], &[m.len()]));
            }
        }
        let dh = h / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let src = self.value(qkv).data();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * h];
        for b in 0..batch {
            let base = b * seq * c3;
            for hd in 0..heads {
                let p_off = (b * heads + hd) * seq * seq;
                let q = View {
                    offset: base + hd * dh,
                    rs: c3,
                    cs: 1,
                };
                let k = View {
                    offset: base + h + hd * dh,
                    rs: c3,
                    cs: 1,
                };
                let v = View {
                    offset: base + 2 * h + hd * dh,
                    rs: c3,
                    cs: 1,
                };
                let pbuf = &mut probs[p_off..p_off + seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    src,
                    q,
                    src,
                    k.transposed(),
                    T::zero(),
                    pbuf,
                    View::row_major(0, seq),
                );
                for i in 0..seq {
                    let row = &mut pbuf[i * seq..(i + 1) * seq];
                    masked_softmax(row, key_mask.map(|m| &m[b * seq..(b + 1) * seq]));
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    T::one(),
                    &probs[p_off..p_off + seq * seq],
                    View::row_major(0, seq),
                    src,
                    v,
                    T::zero(),
                    &mut out,
                    View {
                        offset: b * seq * h + hd * dh,
                        rs: h,
                        cs: 1,
                    },
                );
            }
        }
        let ng = self.ng(qkv);
        Ok(self.push(
            Tensor::from_vec(&[rows, h], out)?,
            Op::Attention {
                qkv,
                heads,
                batch,
                seq,
                probs,
            },
            ng,
        ))
    }

    /// For `x = [batch*n, H]` returns `[batch*n*n, 3H]` whose row `(b, i, j)`
    /// is `[x_bi, x_bj, x_bi - x_bj]`.
    pub fn pair_features(&mut self, x: Var, n: usize) -> Result<Var> {
        let (rows, h) = dims2(self.shape(x));
        if n == 0 || rows % n != 0 {
            return Err(shape_err("pair_features", self.shape(x), &[n]));
        }
        let batch = rows / n;
        let src = self.value(x);
        let mut data = Vec::with_capacity(batch * n * n * 3 * h);
        for b in 0..batch {
            for i in 0..n {
                let xi = src.row(b * n + i);
                for j in 0..n {
                    let xj = src.row(b * n + j);
                    data.extend_from_slice(xi);
                    data.extend_from_slice(xj);
                    data.extend(xi.iter().zip(xj).map(|(&a, &c)| a - c));
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_vec(&[batch * n * n, 3 * h], data)?,
            Op::PairFeatures { x, n },
            ng,
        ))
    }

    /// For `x = [batch*n, D]` returns `[batch*n*n, D]` with row `(b, i, j)`
    /// equal to `x_bi - x_bj`.
    pub fn pair_diff(&mut self, x: Var, n: usize) -> Result<Var> {
        let (rows, d) = dims2(self.shape(x));
        if n == 0 || rows % n != 0 {
            return Err(shape_err("pair_diff", self.shape(x), &[n]));
        }
        let batch = rows / n;
        let src = self.value(x);
        let mut data = Vec::with_capacity(batch * n * n * d);
        for b in 0..batch {
            for i in 0..n {
                for j in 0..n {
                    let (xi, xj) = (src.row(b * n + i), src.row(b * n + j));
                    data.extend(xi.iter().zip(xj).map(|(&a, &c)| a - c));
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[batch * n * n, d], data)?, Op::PairDiff { x, n }, ng))
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, classes) = dims2(self.shape(logits));
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(shape_err("cross_entropy target", &[classes], &[*bad]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(NnError::EmptyLoss);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let row = &mut probs[r * classes..(r + 1) * classes];
            softmax_in_place(row);
            if let Some(t) = *t {
                loss -= row[t].max(T::min_positive_value()).ln();
            }
        }
        let loss = loss / T::from_usize(count).unwrap();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean squared error over elements where `mask` is true (all if `None`).
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.numel() != n || mask.is_some_and(|m| m.len() != n) {
            return Err(shape_err("mse", self.shape(pred), target.shape()));
        }
        let p = self.value(pred).data();
        let mut diff = vec![T::zero(); n];
        let mut count = 0;
        let mut acc = T::zero();
        for i in 0..n {
            if mask.map_or(true, |m| m[i]) {
                let d = p[i] - target.data()[i];
                diff[i] = d;
                acc += d * d;
                count += 1;
            }
        }
        if count == 0 {
            return Err(NnError::EmptyLoss);
        }
        let loss = acc / T::from_usize(count).unwrap();
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, diff, count }, ng))
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k) = dims2(av.shape());
                let n = bv.shape()[1];
                with(buf(grads, nodes, *a), |g| {
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        dy,
                        View::row_major(0, n),
                        bv.data(),
                        View::row_major(0, n).transposed(),
                        T::one(),
                        g,
                        View::row_major(0, k),
                    );
                });
                with(buf(grads, nodes, *b), |g| {
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        View::row_major(0, k).transposed(),
                        dy,
                        View::row_major(0, n),
                        T::one(),
                        g,
                        View::row_major(0, n),
                    );
                });
            }
            Op::Add(a, b) => {
                with(buf(grads, nodes, *a), |g| axpy(g, dy, T::one()));
                with(buf(grads, nodes, *b), |g| axpy(g, dy, T::one()));
            }
            Op::Sub(a, b) => {
                with(buf(grads, nodes, *a), |g| axpy(g, dy, T::one()));
                with(buf(grads, nodes, *b), |g| axpy(g, dy, -T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with(buf(grads, nodes, *a), |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * o;
                    }
                });
                with(buf(grads, nodes, *b), |g| {
                    for ((g, &d), &o) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * o;
                    }
                });
            }
            Op::AddRow(x, b) => {
                with(buf(grads, nodes, *x), |g| axpy(g, dy, T::one()));
                with(buf(grads, nodes, *b), |g| {
                    let cols = g.len();
                    for row in dy.chunks(cols) {
                        axpy(g, row, T::one());
                    }
                });
            }
            Op::Scale(x, s) => with(buf(grads, nodes, *x), |g| axpy(g, dy, *s)),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                with(buf(grads, nodes, *x), |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                        if v > T::zero() {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                with(buf(grads, nodes, *x), |g| {
                    for ((g, &d), &s) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * s * (T::one() - s);
                    }
                });
            }
            Op::Softmax(x) => {
                let (_, cols) = dims2(node.value.shape());
                let y = node.value.data();
                with(buf(grads, nodes, *x), |g| {
                    for ((gr, dr), yr) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                        let dot = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..cols {
                            gr[c] += yr[c] * (dr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = nodes[gamma.0].value.numel();
                let gv = nodes[gamma.0].value.data();
                let n = T::from_usize(cols).unwrap();
                with(buf(grads, nodes, *x), |g| {
                    let mut dxhat = vec![T::zero(); cols];
                    for (r, ((gr, dr), hr)) in g
                        .chunks_mut(cols)
                        .zip(dy.chunks(cols))
                        .zip(xhat.chunks(cols))
                        .enumerate()
                    {
                        for c in 0..cols {
                            dxhat[c] = dr[c] * gv[c];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..cols {
                            gr[c] += rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                });
                with(buf(grads, nodes, *gamma), |g| {
                    for (dr, hr) in dy.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            g[c] += dr[c] * hr[c];
                        }
                    }
                });
                with(buf(grads, nodes, *beta), |g| {
                    for dr in dy.chunks(cols) {
                        axpy(g, dr, T::one());
                    }
                });
            }
            Op::Dropout { x, mask } => with(buf(grads, nodes, *x), |g| {
                for ((g, &d), &m) in g.iter_mut().zip(dy).zip(mask) {
                    *g += d * m;
                }
            }),
            Op::Sum(x) => with(buf(grads, nodes, *x), |g| g.iter_mut().for_each(|v| *v += dy[0])),
            Op::Mean(x) => {
                let n = T::from_usize(nodes[x.0].value.numel().max(1)).unwrap();
                with(buf(grads, nodes, *x), |g| g.iter_mut().for_each(|v| *v += dy[0] / n));
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = dims2(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = dims2(nodes[p.0].value.shape());
                    if *axis == 0 {
                        with(buf(grads, nodes, p), |g| {
                            axpy(g, &dy[offset * cols..(offset + pr) * cols], T::one())
                        });
                        offset += pr;
                    } else {
                        with(buf(grads, nodes, p), |g| {
                            for r in 0..rows {
                                axpy(
                                    &mut g[r * pc..(r + 1) * pc],
                                    &dy[r * cols + offset..r * cols + offset + pc],
                                    T::one(),
                                );
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let (rows, len) = dims2(node.value.shape());
                let (_, cols) = dims2(nodes[x.0].value.shape());
                with(buf(grads, nodes, *x), |g| {
                    if *axis == 0 {
                        axpy(&mut g[start * cols..(start + rows) * cols], dy, T::one());
                    } else {
                        for r in 0..rows {
                            axpy(
                                &mut g[r * cols + start..r * cols + start + len],
                                &dy[r * len..(r + 1) * len],
                                T::one(),
                            );
                        }
                    }
                });
            }
            Op::Reshape(x) => with(buf(grads, nodes, *x), |g| axpy(g, dy, T::one())),
            Op::GatherRows { x, idx } => {
                let (_, cols) = dims2(node.value.shape());
                with(buf(grads, nodes, *x), |g| {
                    for (o, &i) in idx.iter().enumerate() {
                        axpy(
                            &mut g[i * cols..(i + 1) * cols],
                            &dy[o * cols..(o + 1) * cols],
                            T::one(),
                        );
                    }
                });
            }
            Op::Attention {
                qkv,
                heads,
                batch,
                seq,
                probs,
            } => {
                let src = nodes[qkv.0].value.data();
                let (_, c3) = dims2(nodes[qkv.0].value.shape());
                let h = c3 / 3;
                let dh = h / heads;
                let (heads, batch, seq) = (*heads, *batch, *seq);
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                with(buf(grads, nodes, *qkv), |g| {
                    let mut dp = vec![T::zero(); seq * seq];
                    for b in 0..batch {
                        let base = b * seq * c3;
                        for hd in 0..heads {
                            let p = &probs[(b * heads + hd) * seq * seq..(b * heads + hd + 1) * seq * seq];
                            let q = View {
                                offset: base + hd * dh,
                                rs: c3,
                                cs: 1,
                            };
                            let k = View {
                                offset: base + h + hd * dh,
                                rs: c3,
                                cs: 1,
                            };
                            let v = View {
                                offset: base + 2 * h + hd * dh,
                                rs: c3,
                                cs: 1,
                            };
                            let dout = View {
                                offset: b * seq * h + hd * dh,
                                rs: h,
                                cs: 1,
                            };
                            let sq = View::row_major(0, seq);
                            // dV += P^T dO
                            gemm(seq, seq, dh, T::one(), p, sq.transposed(), dy, dout, T::one(), g, v);
                            // dP = dO V^T
                            gemm(
                                seq,
                                dh,
                                seq,
                                T::one(),
                                dy,
                                dout,
                                src,
                                v.transposed(),
                                T::zero(),
                                &mut dp,
                                sq,
                            );
                            for i in 0..seq {
                                let pr = &p[i * seq..(i + 1) * seq];
                                let dr = &mut dp[i * seq..(i + 1) * seq];
                                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                                for j in 0..seq {
                                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                                }
                            }
                            // dQ += dS K ; dK += dS^T Q
                            gemm(seq, seq, dh, T::one(), &dp, sq, src, k, T::one(), g, q);
                            gemm(seq, seq, dh, T::one(), &dp, sq.transposed(), src, q, T::one(), g, k);
                        }
                    }
                });
            }
            Op::PairFeatures { x, n } => {
                let n = *n;
                let (rows, h) = dims2(nodes[x.0].value.shape());
                let batch = rows / n;
                with(buf(grads, nodes, *x), |g| {
                    for b in 0..batch {
                        for i in 0..n {
                            for j in 0..n {
                                let r = ((b * n + i) * n + j) * 3 * h;
                                let d = &dy[r..r + 3 * h];
                                let gi = (b * n + i) * h;
                                let gj = (b * n + j) * h;
                                for c in 0..h {
                                    g[gi + c] += d[c] + d[2 * h + c];
                                    g[gj + c] += d[h + c] - d[2 * h + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::PairDiff { x, n } => {
                let n = *n;
                let (rows, d) = dims2(nodes[x.0].value.shape());
                let batch = rows / n;
                with(buf(grads, nodes, *x), |g| {
                    for b in 0..batch {
                        for i in 0..n {
                            for j in 0..n {
                                let r = ((b * n + i) * n + j) * d;
                                for c in 0..d {
                                    g[(b * n + i) * d + c] += dy[r + c];
                                    g[(b * n + j) * d + c] -= dy[r + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let classes = probs.len() / targets.len().max(1);
                let s = dy[0] / T::from_usize(*count).unwrap();
                with(buf(grads, nodes, *logits), |g| {
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let gr = &mut g[r * classes..(r + 1) * classes];
                            let pr = &probs[r * classes..(r + 1) * classes];
                            for c in 0..classes {
                                gr[c] += s * pr[c];
                            }
                            gr[t] -= s;
                        }
                    }
                });
            }
            Op::Mse { pred, diff, count } => {
                let s = dy[0] * T::from_f64_lossy(2.0) / T::from_usize(*count).unwrap();
                with(buf(grads, nodes, *pred), |g| axpy(g, diff, s));
            }
        }
    }
}

fn buf<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]))
}

fn with<T>(g: Option<&mut Vec<T>>, f: impl FnOnce(&mut Vec<T>)) {
    if let Some(g) = g {
        f(g);
    }
}

fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    masked_softmax(row, None);
}

fn masked_softmax<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}
