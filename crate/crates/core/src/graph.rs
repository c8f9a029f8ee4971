//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep that visits each
//! node once. Gradients accumulate additively when a value feeds several ops.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, permute_data, Float, Mask, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Key layout of an encoder output seen by the chunk selector: `n_chunks`
/// blocks, each holding `mem` memory positions followed by `chunk_len` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkLayout {
    pub n_chunks: usize,
    pub mem: usize,
    pub chunk_len: usize,
}

impl ChunkLayout {
    pub fn block(&self) -> usize {
        self.mem + self.chunk_len
    }

    pub fn total(&self) -> usize {
        self.n_chunks * self.block()
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    Relu { a: Var },
    Dropout { a: Var, keep: Vec<F> },
    RmsNorm { x: Var, gamma: Var, inv_rms: Vec<F> },
    MaskedSoftmax { a: Var },
    Selector { a: Var, layout: ChunkLayout, valid: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<i64>, ignore: i64, count: usize },
    Embedding { table: Var, ids: Vec<u32> },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Expand { a: Var },
    Sum { a: Var },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    params: HashMap<String, Var>,
    param_order: Vec<String>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// `outer × dim × inner` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn log_sum_exp<F: Float>(xs: impl Iterator<Item = F> + Clone) -> F {
    let max = xs.clone().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<F>().ln()
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            debug_assert!(value.all_finite(), "non-finite output from finite inputs");
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Registers (once) the named parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.leaf(store.get(name)?.clone(), true);
        self.params.insert(name.to_string(), v);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every registered parameter, zero-filled when unreached.
    pub fn param_grads(&self) -> Vec<(String, Tensor<F>)> {
        self.param_order
            .iter()
            .map(|name| {
                let v = self.params[name];
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }

    /// A copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `a[.., k] · b[k, p] -> [.., p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let p = sb[1];
        let rows = self.value(a).numel() / k.max(1);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(p);
        let mut out = vec![F::zero(); rows * p];
        gemm(
            rows,
            k,
            p,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product over matching leading dims: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    false,
                    &bd[i * k * n..],
                    trans_b,
                    &mut out[i * m * n..],
                    false,
                );
            }
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (tiled over the rest).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bd = self.value(b).data();
        let nb = bd.len();
        let data: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale { a, c }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu { a }, &[a])
    }

    /// Inverted dropout. Returns `a` itself when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let scale = F::of(1.0 / (1.0 - rate));
        let keep: Vec<F> = (0..self.value(a).numel())
            .map(|_| {
                if rng.random::<f64>() >= rate {
                    scale
                } else {
                    F::zero()
                }
            })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| x * k)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Dropout { a, keep }, &[a])
    }

    /// `gamma ⊙ x / sqrt(mean(x²) + eps)` over the last axis; no centering, no bias.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(gamma));
        if sx.is_empty() || sg.len() != 1 || sx[sx.len() - 1] != sg[0] {
            return Err(Error::shape("rms_norm", sx, sg));
        }
        let d = sg[0];
        let eps = F::of(eps);
        let g = self.value(gamma).data();
        let xd = self.value(x).data();
        let rows = xd.len() / d.max(1);
        let mut out = vec![F::zero(); xd.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<F>() / F::of(d as f64);
            let denom = (ms + eps).sqrt();
            let inv = if denom > F::zero() {
                F::one() / denom
            } else {
                F::zero()
            };
            inv_rms.push(inv);
            for j in 0..d {
                out[r * d + j] = g[j] * row[j] * inv;
            }
        }
        let t = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gamma, inv_rms }, &[x, gamma]))
    }

    /// Softmax over the last axis restricted to keys where `mask` is true.
    /// Masked entries are exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let offsets = mask.row_offsets(&shape)?;
        let t_k = shape[shape.len() - 1];
        let src = self.value(a).data();
        let md = mask.data();
        let mut out = vec![F::zero(); src.len()];
        for (r, &off) in offsets.iter().enumerate() {
            let row = &src[r * t_k..(r + 1) * t_k];
            let m = &md[off..off + t_k];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() && !m.iter().any(|&ok| ok) {
                return Err(Error::FullyMasked { row: r });
            }
            let dst = &mut out[r * t_k..(r + 1) * t_k];
            let mut sum = F::zero();
            for j in 0..t_k {
                if m[j] {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    sum = sum + e;
                }
            }
            for v in dst.iter_mut() {
                *v = *v / sum;
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MaskedSoftmax { a }, &[a]))
    }

    /// Two-level chunk-selector attention weights over `layout.total()` keys.
    ///
    /// Leading axis of `a` is the batch; `valid[b * n_chunks * chunk_len + i]`
    /// marks real (non-pad) token `i` of batch element `b`. For every score row
    /// the chunk score is the log-sum-exp of the row's memory-key scores (0 when
    /// there are no memory keys), chunks are softmax-weighted by that score
    /// among chunks holding at least one real token, and the weight of a token
    /// is its chunk weight times its softmax probability within the chunk.
    /// Memory and pad positions receive exactly zero weight.
    pub fn selector_softmax(
        &mut self,
        a: Var,
        layout: ChunkLayout,
        valid: Vec<bool>,
    ) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let t = layout.total();
        if shape.len() < 2 || shape[shape.len() - 1] != t {
            return Err(Error::shape("selector_softmax", &shape, &[t]));
        }
        let batch = shape[0];
        let tokens = layout.n_chunks * layout.chunk_len;
        if valid.len() != batch * tokens {
            return Err(Error::shape("selector_softmax", &[valid.len()], &[batch * tokens]));
        }
        let rows_per_batch: usize = shape[1..shape.len() - 1].iter().product();
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batch {
            let vb = &valid[b * tokens..(b + 1) * tokens];
            if !vb.iter().any(|&v| v) {
                return Err(Error::FullyMasked {
                    row: b * rows_per_batch,
                });
            }
            for r in 0..rows_per_batch {
                let row_idx = b * rows_per_batch + r;
                let row = &src[row_idx * t..(row_idx + 1) * t];
                let z = selector_logits(row, layout, vb);
                let max = z.iter().fold(F::neg_infinity(), |m, &(_, v)| m.max(v));
                let sum: F = z.iter().map(|&(_, v)| (v - max).exp()).sum();
                let dst = &mut out[row_idx * t..(row_idx + 1) * t];
                for &(pos, v) in &z {
                    dst[pos] = (v - max).exp() / sum;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Selector { a, layout, valid }, &[a]))
    }

    /// Mean token cross-entropy over positions whose target is not `ignore`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[i64], ignore: i64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let v = shape[1];
        let ld = self.value(logits).data();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t < 0 || t as usize >= v {
                return Err(Error::shape("cross_entropy target", &[t.max(0) as usize], &[v]));
            }
            let row = &ld[i * v..(i + 1) * v];
            let lse = log_sum_exp(row.iter().copied());
            total += (lse - row[t as usize]).as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let loss = Tensor::scalar(F::of(total / count as f64));
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            &[logits],
        ))
    }

    /// Gathers rows of `table [V, d]`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("embedding", st, &[2]));
        }
        let (vocab, d) = (st[0], st[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::IdOutOfRange { id, size: vocab });
            }
            out.extend_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::shape("permute", shape, axes));
        }
        let (data, out_shape) = permute_data(self.value(a).data(), shape, axes);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            &[a],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[2]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let dim = self.shape(p)[axis];
                let blk = dim * inner;
                out.extend_from_slice(&self.value(p).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::Narrow { a, axis, start }, &[a]))
    }

    /// Tiles `a` over new leading axes: output shape `lead ++ shape(a)`.
    pub fn expand(&mut self, a: Var, lead: &[usize]) -> Result<Var> {
        let reps: usize = lead.iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(reps * src.len());
        for _ in 0..reps {
            out.extend_from_slice(src);
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape(a));
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Expand { a }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Reverse sweep from a scalar `loss`; afterwards [`Graph::grad`] and
    /// [`Graph::param_grads`] report d(loss)/d(value).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (k, p) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.numel() / k.max(1);
                acc(nodes, grads, *a, |da| {
                    gemm(rows, p, k, g, false, bv.data(), true, da, true)
                });
                acc(nodes, grads, *b, |db| {
                    gemm(k, rows, p, av.data(), true, g, false, db, true)
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let r = av.rank();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let n = out.shape()[r - 1];
                let batch: usize = av.shape()[..r - 2].iter().product();
                let t = *trans_b;
                acc(nodes, grads, *a, |da| {
                    for s in 0..batch {
                        // dA = dC · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..],
                            false,
                            &bv.data()[s * k * n..],
                            !t,
                            &mut da[s * m * k..],
                            true,
                        );
                    }
                });
                acc(nodes, grads, *b, |db| {
                    for s in 0..batch {
                        if t {
                            // B stored [n, k]: dB = dCᵀ · A
                            gemm(
                                n,
                                m,
                                k,
                                &g[s * m * n..],
                                true,
                                &av.data()[s * m * k..],
                                false,
                                &mut db[s * k * n..],
                                true,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[s * m * k..],
                                true,
                                &g[s * m * n..],
                                false,
                                &mut db[s * k * n..],
                                true,
                            );
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(nodes, grads, *a, |da| {
                    da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x)
                });
                let nb = nodes[b.0].value.numel();
                acc(nodes, grads, *b, |db| {
                    for (j, &x) in g.iter().enumerate() {
                        db[j % nb] = db[j % nb] + x;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(nodes, grads, *a, |da| {
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * bv[j];
                    }
                });
                acc(nodes, grads, *b, |db| {
                    for j in 0..g.len() {
                        db[j] = db[j] + g[j] * av[j];
                    }
                });
            }
            Op::Scale { a, c } => acc(nodes, grads, *a, |da| {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * *c)
            }),
            Op::Relu { a } => acc(nodes, grads, *a, |da| {
                for (j, &o) in out.data().iter().enumerate() {
                    if o > F::zero() {
                        da[j] = da[j] + g[j];
                    }
                }
            }),
            Op::Dropout { a, keep } => acc(nodes, grads, *a, |da| {
                for j in 0..g.len() {
                    da[j] = da[j] + g[j] * keep[j];
                }
            }),
            Op::RmsNorm { x, gamma, inv_rms } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gamma.0].value.data();
                let d = gv.len();
                let dn = F::of(d as f64);
                acc(nodes, grads, *x, |dx| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: F = (0..d).map(|j| gv[j] * gr[j] * xr[j]).sum();
                        let c = inv * inv * inv * dot / dn;
                        for j in 0..d {
                            dx[r * d + j] = dx[r * d + j] + inv * gv[j] * gr[j] - c * xr[j];
                        }
                    }
                });
                acc(nodes, grads, *gamma, |dg| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xv[r * d + j] * inv;
                        }
                    }
                });
            }
            Op::MaskedSoftmax { a } => {
                let t_k = out.shape()[out.rank() - 1];
                acc(nodes, grads, *a, |da| {
                    softmax_backward(out.data(), g, t_k, da);
                });
            }
            Op::Selector { a, layout, valid } => {
                let src = nodes[a.0].value.data();
                let t = layout.total();
                let tokens = layout.n_chunks * layout.chunk_len;
                let batch = out.shape()[0];
                let rows_per_batch = out.numel() / (batch * t).max(1);
                acc(nodes, grads, *a, |da| {
                    for b in 0..batch {
                        let vb = &valid[b * tokens..(b + 1) * tokens];
                        for r in 0..rows_per_batch {
                            let ri = b * rows_per_batch + r;
                            let span = ri * t..(ri + 1) * t;
                            selector_backward(
                                &src[span.clone()],
                                &out.data()[span.clone()],
                                &g[span.clone()],
                                *layout,
                                vb,
                                &mut da[span],
                            );
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let lv = &nodes[logits.0].value;
                let v = lv.shape()[1];
                let scale = g[0] / F::of(*count as f64);
                acc(nodes, grads, *logits, |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &lv.data()[r * v..(r + 1) * v];
                        let lse = log_sum_exp(row.iter().copied());
                        for j in 0..v {
                            let p = (row[j] - lse).exp();
                            let y = if j == t as usize { F::one() } else { F::zero() };
                            dl[r * v + j] = dl[r * v + j] + (p - y) * scale;
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                acc(nodes, grads, *table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let base = id as usize * d;
                        for j in 0..d {
                            dt[base + j] = dt[base + j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => acc(nodes, grads, *a, |da| {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x)
            }),
            Op::Permute { a, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (back, _) = permute_data(g, out.shape(), &inverse);
                acc(nodes, grads, *a, |da| {
                    da.iter_mut().zip(&back).for_each(|(d, &x)| *d = *d + x)
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let dim = nodes[p.0].value.shape()[*axis];
                    acc(nodes, grads, p, |dp| {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * dim * inner;
                            for j in 0..dim * inner {
                                dp[dst + j] = dp[dst + j] + g[src + j];
                            }
                        }
                    });
                    offset += dim;
                }
            }
            Op::Narrow { a, axis, start } => {
                let full = nodes[a.0].value.shape();
                let (outer, dim, inner) = axis_split(full, *axis);
                let len = out.shape()[*axis];
                acc(nodes, grads, *a, |da| {
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            da[dst + j] = da[dst + j] + g[src + j];
                        }
                    }
                });
            }
            Op::Expand { a } => {
                let n = nodes[a.0].value.numel();
                acc(nodes, grads, *a, |da| {
                    for (j, &x) in g.iter().enumerate() {
                        da[j % n] = da[j % n] + x;
                    }
                });
            }
            Op::Sum { a } => acc(nodes, grads, *a, |da| {
                da.iter_mut().for_each(|d| *d = *d + g[0])
            }),
        }
    }
}

/// Adds `f`'s contribution into the gradient buffer of `v`, if it needs one.
fn acc<F: Float>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    v: Var,
    f: impl FnOnce(&mut [F]),
) {
    if nodes[v.0].requires_grad {
        let n = nodes[v.0].value.numel();
        f(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]));
    }
}

/// `dx = p ⊙ (g − Σ p g)` row by row.
fn softmax_backward<F: Float>(p: &[F], g: &[F], width: usize, dx: &mut [F]) {
    for r in 0..p.len() / width.max(1) {
        let pr = &p[r * width..(r + 1) * width];
        let gr = &g[r * width..(r + 1) * width];
        let dot: F = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..width {
            dx[r * width + j] = dx[r * width + j] + pr[j] * (gr[j] - dot);
        }
    }
}

/// Combined logits `(position, z)` for the real tokens of one selector row:
/// `z = chunk_score + token_score − LSE(token scores of its chunk)`.
fn selector_logits<F: Float>(row: &[F], layout: ChunkLayout, valid: &[bool]) -> Vec<(usize, F)> {
    let (m, cl) = (layout.mem, layout.chunk_len);
    let mut z = Vec::new();
    for c in 0..layout.n_chunks {
        let base = c * layout.block();
        let toks: Vec<usize> = (0..cl).filter(|&t| valid[c * cl + t]).collect();
        if toks.is_empty() {
            continue;
        }
        let chunk_score = if m == 0 {
            F::zero()
        } else {
            log_sum_exp(row[base..base + m].iter().copied())
        };
        let token_lse = log_sum_exp(toks.iter().map(|&t| row[base + m + t]));
        for t in toks {
            z.push((base + m + t, chunk_score + row[base + m + t] - token_lse));
        }
    }
    z
}

fn selector_backward<F: Float>(
    row: &[F],
    p: &[F],
    g: &[F],
    layout: ChunkLayout,
    valid: &[bool],
    dx: &mut [F],
) {
    let (m, cl) = (layout.mem, layout.chunk_len);
    let dot: F = p.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for c in 0..layout.n_chunks {
        let base = c * layout.block();
        let toks: Vec<usize> = (0..cl).filter(|&t| valid[c * cl + t]).collect();
        if toks.is_empty() {
            continue;
        }
        let token_lse = log_sum_exp(toks.iter().map(|&t| row[base + m + t]));
        let mut chunk_total = F::zero();
        for &t in &toks {
            let pos = base + m + t;
            let dz = p[pos] * (g[pos] - dot);
            chunk_total = chunk_total + dz;
            dx[pos] = dx[pos] + dz;
        }
        for &t in &toks {
            let pos = base + m + t;
            let within = (row[pos] - token_lse).exp();
            dx[pos] = dx[pos] - within * chunk_total;
        }
        if m > 0 {
            let lse = log_sum_exp(row[base..base + m].iter().copied());
            for j in 0..m {
                dx[base + j] = dx[base + j] + chunk_total * (row[base + j] - lse).exp();
            }
        }
    }
}
