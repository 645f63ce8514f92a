//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Nodes whose
//! inputs all lack `requires_grad` are stored as constants, so the tape only
//! records work that backward has to undo. [`Tape::backward`] sweeps the
//! recorded entries once, in reverse insertion order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Predictions are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Softmax { a: Var },
    LayerNorm { a: Var, inv_std: Vec<T> },
    Sigmoid { a: Var },
    Relu { a: Var },
    Gather { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<T> },
    MaskedMse { pred: Var, target: Vec<T>, rows: Vec<bool>, count: usize },
    Bce { probs: Var, labels: Vec<T>, mask: Vec<bool>, count: usize },
    Concat { parts: Vec<Var> },
    Slice { a: Var, start: usize },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// A computation tape. Owned by a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints of the leaves, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    visits: usize,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Number of recorded entries whose adjoint was propagated.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<usize> {
    // Returns the number of times `b` repeats inside `a`.
    if a == b {
        return Some(1);
    }
    if b.len() < a.len() && a.ends_with(b) {
        let inner: usize = b.iter().product();
        return Some(a.iter().product::<usize>() / inner);
    }
    None
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of entries that backward will have to visit.
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    /// Places a tensor on the tape; it is trainable iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push(tensor, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, mut value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        value.requires_grad = requires_grad;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    /// `a [.., m, k] · b [k, n] -> [.., m, n]`; leading axes of `a` are batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).numel() / k;
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            &mut out,
            false,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::MatMul { a, b }))
    }

    /// Batched product of rank-3 tensors: `a [B, m, k] · b [B, k, n]`, or
    /// `a · bᵀ` with `b [B, n, k]` when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let b_strides = if transpose_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &db[i * k * n..(i + 1) * k * n],
                    b_strides,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            rg,
            Op::BatchMatMul { a, b, transpose_b },
        ))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if broadcast_kind(sa, sb).is_none() {
            return Err(Error::shape(name, sa, sb));
        }
        let inner = self.value(b).numel();
        let out: Vec<T> = self
            .data(a)
            .chunks(inner)
            .flat_map(|chunk| chunk.iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Tensor::new(sa, out)?;
        Ok((value, self.any_grad(&[a, b])))
    }

    /// Elementwise sum; `b` may match `a` or a trailing suffix of its shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * factor).collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Scale { a, factor })
    }

    /// Softmax over the last axis after adding `mask` (matching shape or a
    /// trailing suffix). Entries with a `-inf` mask get probability exactly 0;
    /// a fully masked row yields all zeros.
    pub fn softmax(&mut self, a: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(m) = mask {
            if broadcast_kind(&shape, m.shape()).is_none() || m.shape().is_empty() {
                return Err(Error::shape("softmax", &shape, m.shape()));
            }
            if m.last_dim() != shape[shape.len() - 1] {
                return Err(Error::shape("softmax", &shape, m.shape()));
            }
        }
        let width = shape[shape.len() - 1];
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        let mask_len = mask.map_or(0, |m| m.numel());
        for (r, (row, dst)) in src.chunks(width).zip(out.chunks_mut(width)).enumerate() {
            let mrow = mask.map(|m| {
                let off = (r * width) % mask_len;
                &m.data()[off..off + width]
            });
            let shifted = |j: usize| match mrow {
                Some(mr) => row[j] + mr[j],
                None => row[j],
            };
            let mut max = T::neg_infinity();
            for j in 0..width {
                let z = shifted(j);
                if z > max {
                    max = z;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (j, d) in dst.iter_mut().enumerate() {
                let z = shifted(j);
                *d = if z == T::neg_infinity() {
                    T::zero()
                } else {
                    (z - max).exp()
                };
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Softmax { a }))
    }

    /// Normalizes each row of the last axis to zero mean, unit variance.
    /// Gain and bias are applied separately with [`Tape::mul`]/[`Tape::add`].
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let width = shape[shape.len() - 1];
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let wf = T::from_usize(width).unwrap();
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(src.len() / width);
        for (row, dst) in src.chunks(width).zip(out.chunks_mut(width)) {
            let mean = row.iter().copied().sum::<T>() / wf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / wf;
            let is = T::one() / (var + eps).sqrt();
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.any_grad(&[a]);
        self.push(
            Tensor::new(&shape, out).expect("same shape"),
            rg,
            Op::LayerNorm { a, inv_std },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self
            .data(a)
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| x.max(T::zero())).collect();
        let value = Tensor::new(self.shape(a), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Relu { a })
    }

    /// Row gather from a `[rows, dim]` table; output shape is `prefix + [dim]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather", &st, prefix));
        }
        let (rows, dim) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Range {
                id: bad,
                limit: rows,
                context: "in embedding gather".into(),
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let mut shape = prefix.to_vec();
        shape.push(dim);
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1/(1-p)`. The mask is a pure function of `seed`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(self.shape(a), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, rg, Op::Dropout { a, mask }))
    }

    /// `(1/N) Σ_rows ‖pred_r − target_r‖² / width` over rows where `rows` is
    /// set, N the number of such rows. Zero when no row is selected. The
    /// target is a constant.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor<T>, rows: &[bool]) -> Result<Var> {
        let sp = self.shape(pred).to_vec();
        if sp != target.shape() {
            return Err(Error::shape("masked_mse", &sp, target.shape()));
        }
        let width = sp[sp.len() - 1];
        if rows.len() * width != target.numel() {
            return Err(Error::shape("masked_mse", &sp, &[rows.len()]));
        }
        let count = rows.iter().filter(|&&m| m).count();
        let mut total = T::zero();
        if count > 0 {
            for (r, (p, t)) in self
                .data(pred)
                .chunks(width)
                .zip(target.data().chunks(width))
                .enumerate()
            {
                if rows[r] {
                    total += p.iter().zip(t).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>();
                }
            }
            total /= T::from_usize(count * width).unwrap();
        }
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::MaskedMse {
                pred,
                target: target.data().to_vec(),
                rows: rows.to_vec(),
                count,
            },
        ))
    }

    /// Mean binary cross-entropy over unmasked entries, with predictions
    /// clamped to `[1e-7, 1 - 1e-7]`. Zero when nothing is unmasked.
    pub fn bce(&mut self, probs: Var, labels: &[T], mask: &[bool]) -> Result<Var> {
        let n = self.value(probs).numel();
        if labels.len() != n || mask.len() != n {
            return Err(Error::shape("bce", self.shape(probs), &[labels.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let (lo, hi) = clamp_bounds::<T>();
        let mut total = T::zero();
        for ((&p, &r), &m) in self.data(probs).iter().zip(labels).zip(mask) {
            if m {
                let p = p.max(lo).min(hi);
                total -= r * p.ln() + (T::one() - r) * (T::one() - p).ln();
            }
        }
        if count > 0 {
            total /= T::from_usize(count).unwrap();
        }
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| {
            Error::InvalidArgument("concat of zero tensors".into())
        })?)
        .to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat", &first, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(parts[0]).numel() / widths[0];
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let width = sa[sa.len() - 1];
        if len == 0 || start + len > width {
            return Err(Error::shape("slice_last", &sa, &[start, len]));
        }
        let out: Vec<T> = self
            .data(a)
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(len);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Slice { a, start }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::shape("backward", ls, &[1]));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![T::one()]);
        let mut visits = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            visits += 1;
            self.propagate(node, &g, &mut adj);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape(), g).expect("adjoint shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            shapes,
            visits,
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let rows = g.len() / n;
                if let Some(da) = self.slot(adj, *a) {
                    // dA += dC · Bᵀ
                    T::gemm(rows, n, k, g, (n as isize, 1), self.data(*b), (1, n as isize), da, true);
                }
                if let Some(db) = self.slot(adj, *b) {
                    // dB += Aᵀ · dC
                    T::gemm(k, rows, n, self.data(*a), (1, k as isize), g, (n as isize, 1), db, true);
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.len() / (batch * m);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(da) = self.slot(adj, *a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        // C = A·B: dA = dC·Bᵀ ; C = A·Bᵀ: dA = dC·B
                        let bs = if *transpose_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        T::gemm(m, n, k, gi, (n as isize, 1), bi, bs, &mut da[i * m * k..(i + 1) * m * k], true);
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // dB [n,k] = dCᵀ · A
                            T::gemm(n, m, k, gi, (1, n as isize), ai, (k as isize, 1), dbi, true);
                        } else {
                            // dB [k,n] = Aᵀ · dC
                            T::gemm(k, m, n, ai, (1, k as isize), gi, (n as isize, 1), dbi, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if let Some(db) = self.slot(adj, *b) {
                    let inner = db.len();
                    for chunk in g.chunks(inner) {
                        db.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let inner = bd.len();
                if let Some(da) = self.slot(adj, *a) {
                    for (dchunk, gchunk) in da.chunks_mut(inner).zip(g.chunks(inner)) {
                        for ((d, &x), &y) in dchunk.iter_mut().zip(gchunk).zip(bd) {
                            *d += x * y;
                        }
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for (gchunk, achunk) in g.chunks(inner).zip(ad.chunks(inner)) {
                        for ((d, &x), &y) in db.iter_mut().zip(gchunk).zip(achunk) {
                            *d += x * y;
                        }
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *factor);
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let width = node.value.last_dim();
                if let Some(da) = self.slot(adj, *a) {
                    for ((drow, grow), yrow) in da.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let xhat = node.value.data();
                let width = node.value.last_dim();
                let wf = T::from_usize(width).unwrap();
                if let Some(da) = self.slot(adj, *a) {
                    for (r, ((drow, grow), xrow)) in da
                        .chunks_mut(width)
                        .zip(g.chunks(width))
                        .zip(xhat.chunks(width))
                        .enumerate()
                    {
                        let sum_g: T = grow.iter().copied().sum();
                        let sum_gx: T = grow.iter().zip(xrow).map(|(&gi, &xi)| gi * xi).sum();
                        let scale = inv_std[r] / wf;
                        for ((d, &gi), &xi) in drow.iter_mut().zip(grow).zip(xrow) {
                            *d += scale * (wf * gi - sum_g - xi * sum_gx);
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Relu { a } => {
                let x = self.data(*a);
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, &gi), &xi) in da.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let dim = self.shape(*table)[1];
                if let Some(dt) = self.slot(adj, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt[id * dim..(id + 1) * dim];
                        dst.iter_mut()
                            .zip(&g[r * dim..(r + 1) * dim])
                            .for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, &gi), &m) in da.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::MaskedMse {
                pred,
                target,
                rows,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let p = self.data(*pred);
                let width = self.value(*pred).last_dim();
                let coef = g[0] * T::from_f64_lossy(2.0) / T::from_usize(count * width).unwrap();
                if let Some(dp) = self.slot(adj, *pred) {
                    for (r, &on) in rows.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let span = r * width..(r + 1) * width;
                        for ((d, &x), &t) in dp[span.clone()].iter_mut().zip(&p[span.clone()]).zip(&target[span]) {
                            *d += coef * (x - t);
                        }
                    }
                }
            }
            Op::Bce {
                probs,
                labels,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let (lo, hi) = clamp_bounds::<T>();
                let p = self.data(*probs);
                let coef = g[0] / T::from_usize(*count).unwrap();
                if let Some(dp) = self.slot(adj, *probs) {
                    for i in 0..p.len() {
                        if !mask[i] || p[i] < lo || p[i] > hi {
                            continue;
                        }
                        let r = labels[i];
                        dp[i] -= coef * (r / p[i] - (T::one() - r) / (T::one() - p[i]));
                    }
                }
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = g.len() / total;
                let mut offset = 0;
                for &part in parts {
                    let w = self.value(part).last_dim();
                    if let Some(dp) = self.slot(adj, part) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            dp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &x)| *d += x);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { a, start } => {
                let width = self.value(*a).last_dim();
                let len = node.value.last_dim();
                if let Some(da) = self.slot(adj, *a) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        da[r * width + start..r * width + start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.slot(adj, *a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }

    /// Adjoint buffer for `var`, allocated on first use; `None` when `var`
    /// does not need a gradient.
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<T>>], var: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[var.0];
        if !node.requires_grad {
            return None;
        }
        Some(adj[var.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }
}

fn clamp_bounds<T: Real>() -> (T, T) {
    let lo = T::from_f64_lossy(BCE_CLAMP);
    (lo, T::one() - lo)
}

/// Additive causal mask `[len, len]`: 0 where column ≤ row, `-inf` above the diagonal.
pub fn causal_mask<T: Real>(len: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in (i + 1)..len {
            m.data_mut()[i * len + j] = T::neg_infinity();
        }
    }
    m
}
