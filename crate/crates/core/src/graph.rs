//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! are appended in topological order, so the backward pass is a single
//! reverse sweep accumulating vector-Jacobian products. Parameters enter the
//! tape through [`Graph::param`], which deduplicates by name so repeated uses
//! of one weight share a leaf and their gradients accumulate.
//!
//! Every primitive validates shapes up front and scans its output for
//! NaN/Inf; a non-finite value is a hard error, never a silent propagation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{axis_extents, numel_of, Element, Tensor};

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice { input: NodeId, axis: usize, start: usize },
    Softmax { input: NodeId, axis: usize },
    LayerNorm { input: NodeId, axis: usize, eps: f64 },
    Gelu(NodeId),
    Embedding { table: NodeId, ids: Vec<u32> },
    MaskedFill { input: NodeId, mask: Vec<bool> },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, mask: Vec<bool> },
    CosineSim { rows: NodeId, vec: NodeId },
    MaxAxis { input: NodeId, axis: usize, argmax: Vec<usize> },
    MeanAxis { input: NodeId, axis: usize },
    SumAll(NodeId),
    Exp(NodeId),
    Log(NodeId),
}

struct Node<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    op: Op,
    tracked: bool,
}

/// Linear tape of primitive applications with reverse-mode traversal.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    params: BTreeMap<String, NodeId>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, op: Op, tracked: bool) -> NodeId {
        debug_assert_eq!(numel_of(&shape), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            tracked,
        });
        id
    }

    fn check_finite(&self, op: &'static str, data: &[E]) -> Result<()> {
        if data.iter().any(|v| !v.is_finite_val()) {
            return Err(Error::NonFinite { op: op.into() });
        }
        Ok(())
    }

    /// Insert an untracked leaf; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor<E>) -> NodeId {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn constant_data(&mut self, shape: Vec<usize>, data: Vec<E>) -> Result<NodeId> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn scalar_const(&mut self, v: E) -> Result<NodeId> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    /// Insert a tracked leaf that is not registered in any parameter store.
    /// Gradients are retrieved with [`Graph::grad_wrt`].
    pub fn tracked_input(&mut self, t: Tensor<E>) -> NodeId {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(shape, data, Op::Leaf, true)
    }

    /// Insert (or reuse) the leaf for a named parameter. Frozen entries are
    /// untracked: values flow forward, gradients are not collected for them.
    pub fn param(&mut self, store: &ParamStore<E>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let entry = store.get(name)?;
        let shape = entry.tensor.shape().to_vec();
        let data = entry.tensor.data().to_vec();
        let id = self.push(shape, data, Op::Leaf, !entry.frozen);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<E> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node values are validated on construction")
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<E> {
        let node = &self.nodes[id.0];
        if !node.shape.is_empty() {
            return Err(Error::NonScalarLoss {
                shape: node.shape.clone(),
            });
        }
        Ok(node.data[0])
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.check_finite("matmul", &out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), tracked))
    }

    /// Element-wise sum of same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        self.check_finite("add", &out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Add(a, b), tracked))
    }

    /// Broadcast-add a vector over the last axis (bias add).
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        let sv = &self.nodes[v.0].shape;
        if sa.is_empty() || sv.len() != 1 || *sa.last().unwrap() != sv[0] {
            return Err(self.mismatch("add_row", a, v));
        }
        let d = sv[0];
        let vd = &self.nodes[v.0].data;
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(d) {
            for (x, &b) in row.iter_mut().zip(vd.iter()) {
                *x += b;
            }
        }
        self.check_finite("add_row", &out)?;
        let tracked = self.tracked(a) || self.tracked(v);
        Ok(self.push(sa.clone(), out, Op::AddRow(a, v), tracked))
    }

    /// Element-wise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch("mul", a, b));
        }
        let out: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        self.check_finite("mul", &out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Mul(a, b), tracked))
    }

    /// Broadcast-multiply by a vector over the last axis (layer-norm gain).
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        let sv = &self.nodes[v.0].shape;
        if sa.is_empty() || sv.len() != 1 || *sa.last().unwrap() != sv[0] {
            return Err(self.mismatch("mul_row", a, v));
        }
        let d = sv[0];
        let vd = &self.nodes[v.0].data;
        let mut out = self.nodes[a.0].data.clone();
        for row in out.chunks_mut(d) {
            for (x, &g) in row.iter_mut().zip(vd.iter()) {
                *x *= g;
            }
        }
        self.check_finite("mul_row", &out)?;
        let tracked = self.tracked(a) || self.tracked(v);
        Ok(self.push(sa.clone(), out, Op::MulRow(a, v), tracked))
    }

    /// Multiply a tensor by a tracked scalar node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.nodes[s.0].shape.is_empty() {
            return Err(self.mismatch("mul_scalar", a, s));
        }
        let sv = self.nodes[s.0].data[0];
        let out: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x * sv).collect();
        self.check_finite("mul_scalar", &out)?;
        let tracked = self.tracked(a) || self.tracked(s);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            out,
            Op::MulScalar(a, s),
            tracked,
        ))
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, a: NodeId, factor: E) -> Result<NodeId> {
        let out: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        self.check_finite("scale", &out)?;
        let tracked = self.tracked(a);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            out,
            Op::Scale(a, factor.to_f64()),
            tracked,
        ))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, E::ZERO - E::ONE)
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: sa.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), tracked))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel_of(&shape) != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let tracked = self.tracked(a);
        Ok(self.push(shape, data, Op::Reshape(a), tracked))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero parts"));
        }
        let first = &self.nodes[parts[0].0].shape;
        if axis >= first.len() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut out_shape = first.clone();
        let mut total = 0usize;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            let mut expect = sp.clone();
            if sp.len() != first.len() {
                return Err(self.mismatch("concat", parts[0], p));
            }
            expect[axis] = first[axis];
            if expect != *first {
                return Err(self.mismatch("concat", parts[0], p));
            }
            total += sp[axis];
        }
        out_shape[axis] = total;
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let len_p = self.nodes[p.0].shape[axis];
                let slab = len_p * inner;
                let src = &self.nodes[p.0].data[o * slab..(o + 1) * slab];
                out.extend_from_slice(src);
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            tracked,
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if axis >= sa.len() || start + len > sa[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "slice {start}..{} on axis {axis} of shape {sa:?}",
                start + len
            )));
        }
        let (outer, l, inner) = axis_extents(sa, axis);
        let mut out_shape = sa.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = &self.nodes[a.0].data;
        for o in 0..outer {
            let base = (o * l + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let tracked = self.tracked(a);
        Ok(self.push(
            out_shape,
            out,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            tracked,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {sa:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&sa, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![E::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut m = src[idx(0)];
                for k in 1..len {
                    m = m.maximum(src[idx(k)]);
                }
                let mut sum = E::ZERO;
                for k in 0..len {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / sum;
                }
            }
        }
        self.check_finite("softmax", &out)?;
        let tracked = self.tracked(a);
        Ok(self.push(sa, out, Op::Softmax { input: a, axis }, tracked))
    }

    /// Per-slice normalization to zero mean, unit variance along `axis`.
    /// Affine gain/bias are separate `mul_row`/`add_row` applications.
    pub fn layer_norm(&mut self, a: NodeId, axis: usize, eps: f64) -> Result<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(Error::invalid(format!(
                "layer_norm axis {axis} out of range for shape {sa:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&sa, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![E::ZERO; src.len()];
        let inv_len = E::from_f64(1.0 / len as f64);
        let eps_e = E::from_f64(eps);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut mean = E::ZERO;
                for k in 0..len {
                    mean += src[idx(k)];
                }
                mean *= inv_len;
                let mut var = E::ZERO;
                for k in 0..len {
                    let d = src[idx(k)] - mean;
                    var += d * d;
                }
                var *= inv_len;
                let inv_std = E::ONE / (var + eps_e).sqrt();
                for k in 0..len {
                    out[idx(k)] = (src[idx(k)] - mean) * inv_std;
                }
            }
        }
        self.check_finite("layer_norm", &out)?;
        let tracked = self.tracked(a);
        Ok(self.push(sa, out, Op::LayerNorm { input: a, axis, eps }, tracked))
    }

    /// Exact GELU: x/2 * (1 + erf(x/sqrt(2))).
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let half = E::from_f64(0.5);
        let out: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| half * x * (E::ONE + (x * inv_sqrt2).erf()))
            .collect();
        self.check_finite("gelu", &out)?;
        let tracked = self.tracked(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Gelu(a), tracked))
    }

    /// Row lookup: `table` is (V, d), output is (ids.len(), d).
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let st = &self.nodes[table.0].shape;
        if st.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: st.clone(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (st[0], st[1]);
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let row = id as usize;
            if row >= vocab {
                return Err(Error::OutOfVocab { id, vocab });
            }
            out.extend_from_slice(&src[row * d..(row + 1) * d]);
        }
        let tracked = self.tracked(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Replace masked positions with `value`; gradient is zero there.
    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool], value: E) -> Result<NodeId> {
        if mask.len() != self.nodes[a.0].data.len() {
            return Err(Error::invalid(format!(
                "masked_fill mask length {} vs tensor numel {}",
                mask.len(),
                self.nodes[a.0].data.len()
            )));
        }
        let out: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        self.check_finite("masked_fill", &out)?;
        let tracked = self.tracked(a);
        Ok(self.push(
            self.nodes[a.0].shape.clone(),
            out,
            Op::MaskedFill {
                input: a,
                mask: mask.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean over masked rows of the negative log-softmax likelihood:
    /// `mean_i -log softmax(logits[i])[targets[i]]` for rows with `mask[i]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], mask: &[bool]) -> Result<NodeId> {
        let sl = &self.nodes[logits.0].shape;
        if sl.len() != 2 || targets.len() != sl[0] || mask.len() != sl[0] {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: sl.clone(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyAnswerMask);
        }
        let (n, v) = (sl[0], sl[1]);
        let src = &self.nodes[logits.0].data;
        let mut total = E::ZERO;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i] as usize;
            if t >= v {
                return Err(Error::OutOfVocab {
                    id: targets[i],
                    vocab: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            let m = row.iter().copied().fold(row[0], |a, b| a.maximum(b));
            let mut sum = E::ZERO;
            for &x in row {
                sum += (x - m).exp();
            }
            let lse = m + sum.ln();
            total += lse - row[t];
        }
        let loss = total / E::from_f64(count as f64);
        let out = vec![loss];
        self.check_finite("cross_entropy", &out)?;
        let tracked = self.tracked(logits);
        Ok(self.push(
            vec![],
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            tracked,
        ))
    }

    /// Cosine similarity between each row of `rows` (n, d) and `vec` (d),
    /// producing (n,). Errors on a zero-norm row or comparison vector.
    pub fn cosine_sim_rows(&mut self, rows: NodeId, vec: NodeId) -> Result<NodeId> {
        let sr = &self.nodes[rows.0].shape;
        let sv = &self.nodes[vec.0].shape;
        if sr.len() != 2 || sv.len() != 1 || sr[1] != sv[0] {
            return Err(self.mismatch("cosine_sim", rows, vec));
        }
        let (n, d) = (sr[0], sr[1]);
        let rd = &self.nodes[rows.0].data;
        let vd = &self.nodes[vec.0].data;
        let nb2: E = vd.iter().map(|&x| x * x).sum();
        let tiny = E::from_f64(1e-30);
        if !(nb2 > tiny) {
            return Err(Error::ZeroNorm { op: "cosine_sim" });
        }
        let nb = nb2.sqrt();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &rd[i * d..(i + 1) * d];
            let na2: E = row.iter().map(|&x| x * x).sum();
            if !(na2 > tiny) {
                return Err(Error::ZeroNorm { op: "cosine_sim" });
            }
            let dot: E = row.iter().zip(vd.iter()).map(|(&a, &b)| a * b).sum();
            out.push(dot / (na2.sqrt() * nb));
        }
        self.check_finite("cosine_sim", &out)?;
        let tracked = self.tracked(rows) || self.tracked(vec);
        Ok(self.push(vec![n], out, Op::CosineSim { rows, vec }, tracked))
    }

    /// Maximum along `axis`; ties resolve to the lowest index. The reduced
    /// axis is removed from the shape. Gradient routes to the arg-max entry.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(Error::invalid(format!(
                "max_axis axis {axis} out of range for shape {sa:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&sa, axis);
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut best = src[idx(0)];
                let mut best_k = 0usize;
                for k in 1..len {
                    if src[idx(k)] > best {
                        best = src[idx(k)];
                        best_k = k;
                    }
                }
                out.push(best);
                argmax.push(best_k);
            }
        }
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let tracked = self.tracked(a);
        Ok(self.push(
            out_shape,
            out,
            Op::MaxAxis {
                input: a,
                axis,
                argmax,
            },
            tracked,
        ))
    }

    /// Arithmetic mean along `axis`; the reduced axis is removed.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() {
            return Err(Error::invalid(format!(
                "mean_axis axis {axis} out of range for shape {sa:?}"
            )));
        }
        let (outer, len, inner) = axis_extents(&sa, axis);
        let src = &self.nodes[a.0].data;
        let inv = E::from_f64(1.0 / len as f64);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut s = E::ZERO;
                for k in 0..len {
                    s += src[(o * len + k) * inner + i];
                }
                out.push(s * inv);
            }
        }
        self.check_finite("mean_axis", &out)?;
        let mut out_shape = sa.clone();
        out_shape.remove(axis);
        let tracked = self.tracked(a);
        Ok(self.push(out_shape, out, Op::MeanAxis { input: a, axis }, tracked))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: E = self.nodes[a.0].data.iter().copied().sum();
        let out = vec![s];
        self.check_finite("sum_all", &out)?;
        let tracked = self.tracked(a);
        Ok(self.push(vec![], out, Op::SumAll(a), tracked))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        self.check_finite("exp", &out)?;
        let tracked = self.tracked(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Exp(a), tracked))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        self.check_finite("log", &out)?;
        let tracked = self.tracked(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, Op::Log(a), tracked))
    }

    /// Pack scalar nodes into a vector of shape (n,).
    pub fn stack_scalars(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let mut parts = Vec::with_capacity(items.len());
        for &it in items {
            parts.push(self.reshape(it, vec![1])?);
        }
        self.concat(0, &parts)
    }

    // ── Reverse sweep ───────────────────────────────────────────────────

    fn backward_table(&self, loss: NodeId) -> Result<Vec<Option<Vec<E>>>> {
        let lnode = &self.nodes[loss.0];
        if !lnode.shape.is_empty() {
            return Err(Error::NonScalarLoss {
                shape: lnode.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !lnode.tracked {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![E::ONE]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].tracked {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = grads[id].take().expect("checked above");
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.tracked(*a) {
                    let da = matmul_nt(g, &self.nodes[b.0].data, m, n, k);
                    acc(&mut grads[a.0], &da);
                }
                if self.tracked(*b) {
                    let db = matmul_tn(&self.nodes[a.0].data, g, m, k, n);
                    acc(&mut grads[b.0], &db);
                }
            }
            Op::Add(a, b) => {
                if self.tracked(*a) {
                    acc(&mut grads[a.0], g);
                }
                if self.tracked(*b) {
                    acc(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, v) => {
                if self.tracked(*a) {
                    acc(&mut grads[a.0], g);
                }
                if self.tracked(*v) {
                    let d = self.nodes[v.0].shape[0];
                    let slot = ensure(&mut grads[v.0], d);
                    for row in g.chunks(d) {
                        for (s, &gv) in slot.iter_mut().zip(row.iter()) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    let contrib: Vec<E> = g
                        .iter()
                        .zip(self.nodes[b.0].data.iter())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    acc(&mut grads[a.0], &contrib);
                }
                if self.tracked(*b) {
                    let contrib: Vec<E> = g
                        .iter()
                        .zip(self.nodes[a.0].data.iter())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    acc(&mut grads[b.0], &contrib);
                }
            }
            Op::MulRow(a, v) => {
                let d = self.nodes[v.0].shape[0];
                if self.tracked(*a) {
                    let vd = &self.nodes[v.0].data;
                    let mut contrib = g.to_vec();
                    for row in contrib.chunks_mut(d) {
                        for (x, &gv) in row.iter_mut().zip(vd.iter()) {
                            *x *= gv;
                        }
                    }
                    acc(&mut grads[a.0], &contrib);
                }
                if self.tracked(*v) {
                    let ad = &self.nodes[a.0].data;
                    let slot = ensure(&mut grads[v.0], d);
                    for (grow, arow) in g.chunks(d).zip(ad.chunks(d)) {
                        for ((s, &gv), &av) in slot.iter_mut().zip(grow.iter()).zip(arow.iter()) {
                            *s += gv * av;
                        }
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.nodes[s.0].data[0];
                if self.tracked(*a) {
                    let contrib: Vec<E> = g.iter().map(|&gv| gv * sv).collect();
                    acc(&mut grads[a.0], &contrib);
                }
                if self.tracked(*s) {
                    let dot: E = g
                        .iter()
                        .zip(self.nodes[a.0].data.iter())
                        .map(|(&gv, &av)| gv * av)
                        .sum();
                    acc(&mut grads[s.0], &[dot]);
                }
            }
            Op::Scale(a, factor) => {
                if self.tracked(*a) {
                    let f = E::from_f64(*factor);
                    let contrib: Vec<E> = g.iter().map(|&gv| gv * f).collect();
                    acc(&mut grads[a.0], &contrib);
                }
            }
            Op::Transpose(a) => {
                if self.tracked(*a) {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let mut contrib = vec![E::ZERO; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            contrib[j * r + i] = g[i * c + j];
                        }
                    }
                    acc(&mut grads[a.0], &contrib);
                }
            }
            Op::Reshape(a) => {
                if self.tracked(*a) {
                    acc(&mut grads[a.0], g);
                }
            }
            Op::Concat { axis, parts } => {
                let (outer, _, inner) = axis_extents(&node.shape, *axis);
                let mut offsets = vec![0usize; parts.len()];
                let mut cursor = 0usize;
                for o in 0..outer {
                    let _ = o;
                    for (pi, &p) in parts.iter().enumerate() {
                        let len_p = self.nodes[p.0].shape[*axis];
                        let slab = len_p * inner;
                        if self.tracked(p) {
                            let total = self.nodes[p.0].data.len();
                            let slot = ensure(&mut grads[p.0], total);
                            let dst = &mut slot[offsets[pi]..offsets[pi] + slab];
                            for (d, &gv) in dst.iter_mut().zip(&g[cursor..cursor + slab]) {
                                *d += gv;
                            }
                        }
                        offsets[pi] += slab;
                        cursor += slab;
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                if self.tracked(*input) {
                    let si = &self.nodes[input.0].shape;
                    let (outer, l, inner) = axis_extents(si, *axis);
                    let len = node.shape[*axis];
                    let total = self.nodes[input.0].data.len();
                    let slot = ensure(&mut grads[input.0], total);
                    for o in 0..outer {
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        let base = (o * l + start) * inner;
                        for (d, &gv) in slot[base..base + len * inner].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { input, axis } => {
                if self.tracked(*input) {
                    let (outer, len, inner) = axis_extents(&node.shape, *axis);
                    let y = &node.data;
                    let total = y.len();
                    let mut contrib = vec![E::ZERO; total];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let mut dot = E::ZERO;
                            for k in 0..len {
                                dot += g[idx(k)] * y[idx(k)];
                            }
                            for k in 0..len {
                                contrib[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                    acc(&mut grads[input.0], &contrib);
                }
            }
            Op::LayerNorm { input, axis, eps } => {
                if self.tracked(*input) {
                    let (outer, len, inner) = axis_extents(&node.shape, *axis);
                    let x = &self.nodes[input.0].data;
                    let y = &node.data;
                    let inv_len = E::from_f64(1.0 / len as f64);
                    let eps_e = E::from_f64(*eps);
                    let mut contrib = vec![E::ZERO; x.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let mut mean = E::ZERO;
                            for k in 0..len {
                                mean += x[idx(k)];
                            }
                            mean *= inv_len;
                            let mut var = E::ZERO;
                            for k in 0..len {
                                let d = x[idx(k)] - mean;
                                var += d * d;
                            }
                            var *= inv_len;
                            let inv_std = E::ONE / (var + eps_e).sqrt();
                            let mut g_mean = E::ZERO;
                            let mut gy_mean = E::ZERO;
                            for k in 0..len {
                                g_mean += g[idx(k)];
                                gy_mean += g[idx(k)] * y[idx(k)];
                            }
                            g_mean *= inv_len;
                            gy_mean *= inv_len;
                            for k in 0..len {
                                contrib[idx(k)] =
                                    inv_std * (g[idx(k)] - g_mean - y[idx(k)] * gy_mean);
                            }
                        }
                    }
                    acc(&mut grads[input.0], &contrib);
                }
            }
            Op::Gelu(a) => {
                if self.tracked(*a) {
                    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    let half = E::from_f64(0.5);
                    let contrib: Vec<E> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(g.iter())
                        .map(|(&x, &gv)| {
                            let cdf = half * (E::ONE + (x * inv_sqrt2).erf());
                            let pdf = (-(half * x * x)).exp() * inv_sqrt_2pi;
                            gv * (cdf + x * pdf)
                        })
                        .collect();
                    acc(&mut grads[a.0], &contrib);
                }
            }
            Op::Embedding { table, ids } => {
                if self.tracked(*table) {
                    let d = self.nodes[table.0].shape[1];
                    let total = self.nodes[table.0].data.len();
                    let slot = ensure(&mut grads[table.0], total);
                    for (i, &id) in ids.iter().enumerate() {
                        let row = id as usize * d;
                        for (s, &gv) in slot[row..row + d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::MaskedFill { input, mask } => {
                if self.tracked(*input) {
                    let contrib: Vec<E> = g
                        .iter()
                        .zip(mask.iter())
                        .map(|(&gv, &m)| if m { E::ZERO } else { gv })
                        .collect();
                    acc(&mut grads[input.0], &contrib);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                if self.tracked(*logits) {
                    let sl = &self.nodes[logits.0].shape;
                    let (n, v) = (sl[0], sl[1]);
                    let count = mask.iter().filter(|&&m| m).count();
                    let gs = g[0] / E::from_f64(count as f64);
                    let src = &self.nodes[logits.0].data;
                    let total = src.len();
                    let slot = ensure(&mut grads[logits.0], total);
                    for i in 0..n {
                        if !mask[i] {
                            continue;
                        }
                        let row = &src[i * v..(i + 1) * v];
                        let m = row.iter().copied().fold(row[0], |a, b| a.maximum(b));
                        let mut sum = E::ZERO;
                        for &x in row {
                            sum += (x - m).exp();
                        }
                        let t = targets[i] as usize;
                        for j in 0..v {
                            let p = (row[j] - m).exp() / sum;
                            let indicator = if j == t { E::ONE } else { E::ZERO };
                            slot[i * v + j] += gs * (p - indicator);
                        }
                    }
                }
            }
            Op::CosineSim { rows, vec } => {
                let sr = &self.nodes[rows.0].shape;
                let (n, d) = (sr[0], sr[1]);
                let rd = &self.nodes[rows.0].data;
                let vd = &self.nodes[vec.0].data;
                let nb2: E = vd.iter().map(|&x| x * x).sum();
                let nb = nb2.sqrt();
                for i in 0..n {
                    let row = &rd[i * d..(i + 1) * d];
                    let na2: E = row.iter().map(|&x| x * x).sum();
                    let na = na2.sqrt();
                    let denom = na * nb;
                    let c = node.data[i];
                    let gv = g[i];
                    if self.tracked(*rows) {
                        let slot = ensure(&mut grads[rows.0], n * d);
                        for j in 0..d {
                            slot[i * d + j] += gv * (vd[j] / denom - c * row[j] / na2);
                        }
                    }
                    if self.tracked(*vec) {
                        let slot = ensure(&mut grads[vec.0], d);
                        for j in 0..d {
                            slot[j] += gv * (row[j] / denom - c * vd[j] / nb2);
                        }
                    }
                }
            }
            Op::MaxAxis {
                input,
                axis,
                argmax,
            } => {
                if self.tracked(*input) {
                    let si = &self.nodes[input.0].shape;
                    let (outer, len, inner) = axis_extents(si, *axis);
                    let total = self.nodes[input.0].data.len();
                    let slot = ensure(&mut grads[input.0], total);
                    for o in 0..outer {
                        for i in 0..inner {
                            let out_idx = o * inner + i;
                            let k = argmax[out_idx];
                            slot[(o * len + k) * inner + i] += g[out_idx];
                        }
                    }
                }
            }
            Op::MeanAxis { input, axis } => {
                if self.tracked(*input) {
                    let si = &self.nodes[input.0].shape;
                    let (outer, len, inner) = axis_extents(si, *axis);
                    let inv = E::from_f64(1.0 / len as f64);
                    let total = self.nodes[input.0].data.len();
                    let slot = ensure(&mut grads[input.0], total);
                    for o in 0..outer {
                        for i in 0..inner {
                            let gv = g[o * inner + i] * inv;
                            for k in 0..len {
                                slot[(o * len + k) * inner + i] += gv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.tracked(*a) {
                    let total = self.nodes[a.0].data.len();
                    let slot = ensure(&mut grads[a.0], total);
                    for s in slot.iter_mut() {
                        *s += g[0];
                    }
                }
            }
            Op::Exp(a) => {
                if self.tracked(*a) {
                    let contrib: Vec<E> = g
                        .iter()
                        .zip(node.data.iter())
                        .map(|(&gv, &y)| gv * y)
                        .collect();
                    acc(&mut grads[a.0], &contrib);
                }
            }
            Op::Log(a) => {
                if self.tracked(*a) {
                    let contrib: Vec<E> = g
                        .iter()
                        .zip(self.nodes[a.0].data.iter())
                        .map(|(&gv, &x)| gv / x)
                        .collect();
                    acc(&mut grads[a.0], &contrib);
                }
            }
        }
    }

    /// Gradients of a scalar loss for every non-frozen entry of `store`.
    /// Entries the loss does not reach map to zero tensors.
    pub fn gradients(
        &self,
        loss: NodeId,
        store: &ParamStore<E>,
    ) -> Result<BTreeMap<String, Tensor<E>>> {
        let table = self.backward_table(loss)?;
        let mut out = BTreeMap::new();
        for (name, entry) in store.iter() {
            if entry.frozen {
                continue;
            }
            let tensor = match self.params.get(name) {
                Some(id) => match &table[id.0] {
                    Some(g) => {
                        if g.iter().any(|v| !v.is_finite_val()) {
                            return Err(Error::NonFiniteGradient { name: name.into() });
                        }
                        Tensor::new(entry.tensor.shape().to_vec(), g.clone())?
                    }
                    None => Tensor::zeros(entry.tensor.shape().to_vec()),
                },
                None => Tensor::zeros(entry.tensor.shape().to_vec()),
            };
            out.insert(name.to_string(), tensor);
        }
        Ok(out)
    }

    /// Gradients of a scalar loss with respect to arbitrary tracked nodes.
    pub fn grad_wrt(&self, loss: NodeId, ids: &[NodeId]) -> Result<Vec<Tensor<E>>> {
        let table = self.backward_table(loss)?;
        ids.iter()
            .map(|id| match &table[id.0] {
                Some(g) => Tensor::new(self.nodes[id.0].shape.clone(), g.clone()),
                None => Ok(Tensor::zeros(self.nodes[id.0].shape.clone())),
            })
            .collect()
    }
}

fn ensure<E: Element>(slot: &mut Option<Vec<E>>, n: usize) -> &mut Vec<E> {
    slot.get_or_insert_with(|| vec![E::ZERO; n])
}

fn acc<E: Element>(slot: &mut Option<Vec<E>>, contrib: &[E]) {
    let v = ensure(slot, contrib.len());
    for (s, &c) in v.iter_mut().zip(contrib.iter()) {
        *s += c;
    }
}

/// C = A (m,k) x B (k,n), saxpy order for contiguous inner loops.
fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C = A (m,n) x B^T where B is (k,n): C[i,j] = sum_l A[i,l] * B[j,l].
fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let dot: E = arow.iter().zip(brow.iter()).map(|(&x, &y)| x * y).sum();
            c[i * k + j] = dot;
        }
    }
    c
}

/// C = A^T x B where A is (m,k), B is (m,n): C[i,j] = sum_l A[l,i] * B[l,j].
fn matmul_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; k * n];
    for l in 0..m {
        let arow = &a[l * k..(l + 1) * k];
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..k {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[2], &[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_of_ones_counts_inner_dim() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::full(vec![2, 3], 1.0).unwrap());
        let b = g.constant(Tensor::full(vec![3, 2], 1.0).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert!(g.data(c).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn gelu_matches_erf_oracle_at_one() {
        // 0.5 * 1 * (1 + erf(1/sqrt(2))) evaluated with high-precision erf.
        let expected = 0.841_344_746_068_543;
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[1], &[1.0]));
        let y = g.gelu(x).unwrap();
        assert!((g.data(y)[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        store
            .insert("p", t64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]), false)
            .unwrap();
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let loss = g.sum_all(p).unwrap();
        let grads = g.gradients(loss, &store).unwrap();
        assert_eq!(grads["p"].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_gradient_is_identity_map() {
        // loss = sum(p^2)/2 at p = [1,2,3] -> grad [1,2,3]
        let mut store: ParamStore<f64> = ParamStore::new(0);
        store.insert("p", t64(&[3], &[1.0, 2.0, 3.0]), false).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let sq = g.mul(p, p).unwrap();
        let s = g.sum_all(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        let grads = g.gradients(loss, &store).unwrap();
        assert_eq!(grads["p"].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        store.insert("used", t64(&[2], &[1.0, 2.0]), false).unwrap();
        store.insert("unused", t64(&[3], &[1.0, 1.0, 1.0]), false).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(&store, "used").unwrap();
        let loss = g.sum_all(p).unwrap();
        let grads = g.gradients(loss, &store).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn frozen_parameter_is_excluded_but_grad_flows_through() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        store.insert("x", t64(&[1, 2], &[1.0, 2.0]), false).unwrap();
        store
            .insert("w", t64(&[2, 1], &[3.0, 4.0]), true)
            .unwrap();
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let w = g.param(&store, "w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.gradients(loss, &store).unwrap();
        assert!(!grads.contains_key("w"));
        // d loss / d x = w^T
        assert_eq!(grads["x"].data(), &[3.0, 4.0]);
    }

    #[test]
    fn shared_parameter_use_accumulates() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        store.insert("p", t64(&[2], &[5.0, 7.0]), false).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let p1 = g.param(&store, "p").unwrap();
        let p2 = g.param(&store, "p").unwrap();
        assert_eq!(p1, p2);
        let s = g.add(p1, p2).unwrap();
        let loss = g.sum_all(s).unwrap();
        let grads = g.gradients(loss, &store).unwrap();
        assert_eq!(grads["p"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store: ParamStore<f64> = ParamStore::new(0);
        store.insert("p", t64(&[2], &[1.0, 2.0]), false).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let p = g.param(&store, "p").unwrap();
        let err = g.gradients(p, &store);
        assert!(matches!(err, Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn log_of_negative_is_hard_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[1], &[-1.0]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 5.0, -3.0]));
        let y = g.softmax(x, 1).unwrap();
        for row in g.data(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_slices_have_zero_mean_unit_var() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[2, 4], &[0.4, -1.0, 2.5, 0.1, 10.0, 11.0, 9.0, 12.0]));
        let y = g.layer_norm(x, 1, 1e-5).unwrap();
        for row in g.data(y).chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.constant(Tensor::zeros(vec![4, 2]));
        let err = g.embedding(table, &[0, 4]);
        assert!(matches!(err, Err(Error::OutOfVocab { id: 4, vocab: 4 })));
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![2, 4]));
        let loss = g.cross_entropy(logits, &[1, 3], &[true, true]).unwrap();
        let v = g.scalar_value(loss).unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_requires_marked_rows() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![2, 4]));
        let err = g.cross_entropy(logits, &[1, 3], &[false, false]);
        assert!(matches!(err, Err(Error::EmptyAnswerMask)));
    }

    #[test]
    fn max_axis_breaks_ties_toward_lowest_index() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.tracked_input(t64(&[4], &[1.0, 3.0, 3.0, 0.0]));
        let y = g.max_axis(x, 0).unwrap();
        assert_eq!(g.data(y), &[3.0]);
        let grads = g.grad_wrt(y, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_sim_hand_case() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let t = g.constant(t64(&[2], &[0.6, 0.8]));
        let c = g.cosine_sim_rows(z, t).unwrap();
        let m = g.max_axis(c, 0).unwrap();
        assert!((g.data(c)[0] - 0.6).abs() < 1e-12);
        assert!((g.data(c)[1] - 0.8).abs() < 1e-12);
        assert!((g.scalar_value(m).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_sim_rejects_zero_norm() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(t64(&[1, 2], &[0.0, 0.0]));
        let t = g.constant(t64(&[2], &[1.0, 0.0]));
        assert!(matches!(
            g.cosine_sim_rows(z, t),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(t64(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t64(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(0, &[a, b]).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = g.slice(c, 0, 1, 2).unwrap();
        assert_eq!(g.data(s), &[3.0, 4.0, 5.0, 6.0]);
        let col = g.slice(c, 1, 1, 1).unwrap();
        assert_eq!(g.data(col), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.tracked_input(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g
            .masked_fill(x, &[false, true, false, false], -1e9)
            .unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.grad_wrt(loss, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn identical_graphs_are_bit_identical() {
        let build = || {
            let mut g: Graph<f32> = Graph::new();
            let x = g.constant(
                Tensor::new(vec![2, 2], vec![0.1f32, -0.7, 0.33, 2.5]).unwrap(),
            );
            let w = g.constant(
                Tensor::new(vec![2, 2], vec![1.5f32, 0.2, -0.4, 0.9]).unwrap(),
            );
            let h = g.matmul(x, w).unwrap();
            let n = g.layer_norm(h, 1, 1e-5).unwrap();
            let s = g.softmax(n, 1).unwrap();
            g.tensor(s)
        };
        assert!(build().bit_eq(&build()));
    }
}
