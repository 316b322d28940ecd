use super::tensor::Tensor;

/// Probabilities are clamped to this floor before `log` so loss paths never
/// produce -inf on (near-)zero mass.
pub const LOG_CLAMP: f64 = 1e-30;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

/// Stable identity of a trainable parameter across tapes. Models hand these
/// out in their canonical parameter order; gradient accumulation and the
/// optimizer key off them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(Val, Val),
    Sub(Val, Val),
    Mul(Val, Val),
    Scale(Val, f64),
    MulScalar(Val, Val),
    MatMul(Val, Val),
    Transpose(Val),
    MatVec(Val, Val),
    VecMat(Val, Val),
    Dot(Val, Val),
    AddRowwise(Val, Val),
    Concat(Vec<Val>),
    StackRows(Vec<Val>),
    Slice(Val, usize, usize),
    Select(Val, usize),
    Flatten(Val),
    Gather(Val, Vec<usize>),
    SumAll(Val),
    SumAxis0(Val),
    Sigmoid(Val),
    Tanh(Val),
    Exp(Val),
    Log(Val),
    Softmax(Val),
    MaskedSoftmax(Val),
    LogAddExp(Val, Val),
}

struct Node {
    op: Op,
    values: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Define-by-run record of primitive applications. One tape per utterance
/// (or per probe computation); rebuilt every step, consumed by
/// [`Tape::backward`]. Construction order is the topological order, so the
/// reverse sweep is a single linear pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by a reverse sweep. Indexable by the originating
/// [`Val`] (any node) or by [`ParamId`] (leaves registered as parameters).
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// d loss / d node, if the node participates in the gradient flow.
    pub fn wrt(&self, v: Val) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Iterate (param, gradient) pairs for every parameter leaf that
    /// received gradient, in registration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(move |&(pid, node)| self.grads[node].as_deref().map(|g| (pid, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar contents of a one-element node.
    pub fn item(&self, v: Val) -> f64 {
        let n = &self.nodes[v.0];
        assert!(n.values.len() == 1, "item() on node of shape {:?}", n.shape);
        n.values[0]
    }

    fn push(&mut self, op: Op, values: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Val {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            op,
            values,
            shape,
            needs_grad,
        });
        Val(self.nodes.len() - 1)
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn vals(&self, v: Val) -> &[f64] {
        &self.nodes[v.0].values
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Register a tensor as a leaf. Gradient flows into it iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Val {
        self.push(
            Op::Leaf { param: None },
            t.values().to_vec(),
            t.shape().to_vec(),
            t.requires_grad,
        )
    }

    /// Register a trainable parameter leaf keyed by `id` for gradient
    /// accumulation across utterances.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Val {
        self.push(
            Op::Leaf { param: Some(id) },
            t.values().to_vec(),
            t.shape().to_vec(),
            true,
        )
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> Val {
        self.push(Op::Leaf { param: None }, values, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Val {
        self.constant(vec![v], vec![1])
    }

    pub fn vector(&mut self, values: &[f64]) -> Val {
        self.constant(values.to_vec(), vec![values.len()])
    }

    pub fn zeros(&mut self, n: usize) -> Val {
        self.constant(vec![0.0; n], vec![n])
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Val, b: Val) -> Val {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Val {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Val {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn logaddexp(&mut self, a: Val, b: Val) -> Val {
        self.binary_same_shape(
            "logaddexp",
            a,
            b,
            |x, y| {
                let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
                if hi == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    hi + (lo - hi).exp().ln_1p()
                }
            },
            Op::LogAddExp(a, b),
        )
    }

    fn binary_same_shape(
        &mut self,
        name: &str,
        a: Val,
        b: Val,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Val {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            panic!(
                "{name}: shape mismatch between {:?} and {:?}",
                na.shape, nb.shape
            );
        }
        let values = na
            .values
            .iter()
            .zip(&nb.values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = na.shape.clone();
        let ng = na.needs_grad || nb.needs_grad;
        self.push(op, values, shape, ng)
    }

    pub fn scale(&mut self, a: Val, c: f64) -> Val {
        let n = &self.nodes[a.0];
        let values = n.values.iter().map(|&x| x * c).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(Op::Scale(a, c), values, shape, ng)
    }

    /// Multiply every element of `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Val, s: Val) -> Val {
        let sv = {
            let n = &self.nodes[s.0];
            if n.values.len() != 1 {
                panic!(
                    "mul_scalar: scalar operand has shape {:?} (vector operand {:?})",
                    n.shape, self.nodes[a.0].shape
                );
            }
            n.values[0]
        };
        let n = &self.nodes[a.0];
        let values = n.values.iter().map(|&x| x * sv).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad || self.nodes[s.0].needs_grad);
        self.push(Op::MulScalar(a, s), values, shape, ng)
    }

    fn unary(&mut self, a: Val, f: impl Fn(f64) -> f64, op: Op) -> Val {
        let n = &self.nodes[a.0];
        let values = n.values.iter().map(|&x| f(x)).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(op, values, shape, ng)
    }

    pub fn sigmoid(&mut self, a: Val) -> Val {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Val) -> Val {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Val) -> Val {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the [`LOG_CLAMP`] floor.
    pub fn log(&mut self, a: Val) -> Val {
        self.unary(a, |x| x.max(LOG_CLAMP).ln(), Op::Log(a))
    }

    // ── Linear algebra ───────────────────────────────────────────────

    fn dims2(&self, name: &str, v: Val) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            panic!("{name}: expected a matrix, got shape {:?}", s);
        }
        (s[0], s[1])
    }

    fn dims1(&self, name: &str, v: Val) -> usize {
        let s = &self.nodes[v.0].shape;
        if s.len() != 1 {
            panic!("{name}: expected a vector, got shape {:?}", s);
        }
        s[0]
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Val {
        let (m, k) = self.dims2("matmul", a);
        let (k2, n) = self.dims2("matmul", b);
        if k != k2 {
            panic!(
                "matmul: shape mismatch between {:?} and {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            );
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), out, vec![m, n], ng)
    }

    pub fn transpose(&mut self, a: Val) -> Val {
        let (m, n) = self.dims2("transpose", a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(Op::Transpose(a), out, vec![n, m], ng)
    }

    /// (r × c) matrix times length-c vector.
    pub fn matvec(&mut self, m: Val, v: Val) -> Val {
        let (r, c) = self.dims2("matvec", m);
        let vl = self.dims1("matvec", v);
        if c != vl {
            panic!(
                "matvec: shape mismatch between {:?} and {:?}",
                self.nodes[m.0].shape, self.nodes[v.0].shape
            );
        }
        let mv = &self.nodes[m.0].values;
        let vv = &self.nodes[v.0].values;
        let out = (0..r)
            .map(|i| {
                mv[i * c..(i + 1) * c]
                    .iter()
                    .zip(vv)
                    .map(|(&a, &b)| a * b)
                    .sum()
            })
            .collect();
        let ng = self.needs(m) || self.needs(v);
        self.push(Op::MatVec(m, v), out, vec![r], ng)
    }

    /// Length-r vector times (r × c) matrix.
    pub fn vecmat(&mut self, v: Val, m: Val) -> Val {
        let vl = self.dims1("vecmat", v);
        let (r, c) = self.dims2("vecmat", m);
        if vl != r {
            panic!(
                "vecmat: shape mismatch between {:?} and {:?}",
                self.nodes[v.0].shape, self.nodes[m.0].shape
            );
        }
        let vv = &self.nodes[v.0].values;
        let mv = &self.nodes[m.0].values;
        let mut out = vec![0.0; c];
        for i in 0..r {
            let x = vv[i];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out.iter_mut().zip(&mv[i * c..(i + 1) * c]) {
                *o += x * y;
            }
        }
        let ng = self.needs(v) || self.needs(m);
        self.push(Op::VecMat(v, m), out, vec![c], ng)
    }

    pub fn dot(&mut self, a: Val, b: Val) -> Val {
        let la = self.dims1("dot", a);
        let lb = self.dims1("dot", b);
        if la != lb {
            panic!(
                "dot: shape mismatch between {:?} and {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            );
        }
        let s = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x * y)
            .sum();
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Dot(a, b), vec![s], vec![1], ng)
    }

    /// Add a length-c vector to every row of an (r × c) matrix.
    pub fn add_rowwise(&mut self, m: Val, v: Val) -> Val {
        let (r, c) = self.dims2("add_rowwise", m);
        let vl = self.dims1("add_rowwise", v);
        if c != vl {
            panic!(
                "add_rowwise: shape mismatch between {:?} and {:?}",
                self.nodes[m.0].shape, self.nodes[v.0].shape
            );
        }
        let mv = &self.nodes[m.0].values;
        let vv = &self.nodes[v.0].values;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(mv[i * c + j] + vv[j]);
            }
        }
        let ng = self.needs(m) || self.needs(v);
        self.push(Op::AddRowwise(m, v), out, vec![r, c], ng)
    }

    // ── Structure ────────────────────────────────────────────────────

    /// Concatenate 1-D vectors (scalars count as length-1 vectors).
    pub fn concat(&mut self, parts: &[Val]) -> Val {
        assert!(!parts.is_empty(), "concat of zero parts");
        let mut values = Vec::new();
        let mut ng = false;
        for &p in parts {
            let n = &self.nodes[p.0];
            if n.shape.len() != 1 {
                panic!("concat: expected vectors, got shape {:?}", n.shape);
            }
            values.extend_from_slice(&n.values);
            ng |= n.needs_grad;
        }
        let len = values.len();
        self.push(Op::Concat(parts.to_vec()), values, vec![len], ng)
    }

    /// Stack equal-length 1-D vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Val]) -> Val {
        assert!(!rows.is_empty(), "stack_rows of zero rows");
        let c = self.dims1("stack_rows", rows[0]);
        let mut values = Vec::with_capacity(rows.len() * c);
        let mut ng = false;
        for &r in rows {
            let n = &self.nodes[r.0];
            if n.shape != [c] {
                panic!(
                    "stack_rows: shape mismatch between {:?} and {:?}",
                    vec![c],
                    n.shape
                );
            }
            values.extend_from_slice(&n.values);
            ng |= n.needs_grad;
        }
        self.push(Op::StackRows(rows.to_vec()), values, vec![rows.len(), c], ng)
    }

    pub fn slice(&mut self, a: Val, start: usize, len: usize) -> Val {
        let la = self.dims1("slice", a);
        assert!(
            start + len <= la,
            "slice [{start}, {start}+{len}) out of bounds for length {la}"
        );
        let values = self.nodes[a.0].values[start..start + len].to_vec();
        let ng = self.needs(a);
        self.push(Op::Slice(a, start, len), values, vec![len], ng)
    }

    /// Pick one element of a vector as a scalar node.
    pub fn select(&mut self, a: Val, idx: usize) -> Val {
        let la = self.dims1("select", a);
        assert!(idx < la, "select index {idx} out of bounds for length {la}");
        let v = self.nodes[a.0].values[idx];
        let ng = self.needs(a);
        self.push(Op::Select(a, idx), vec![v], vec![1], ng)
    }

    /// Embedding lookup: gather rows of an (r × c) matrix.
    pub fn gather(&mut self, m: Val, ids: &[usize]) -> Val {
        let (r, c) = self.dims2("gather", m);
        let mv = &self.nodes[m.0].values;
        let mut values = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < r, "gather row {id} out of bounds for {r} rows");
            values.extend_from_slice(&mv[id * c..(id + 1) * c]);
        }
        let ng = self.needs(m);
        self.push(Op::Gather(m, ids.to_vec()), values, vec![ids.len(), c], ng)
    }

    /// Reinterpret any node as a 1-D vector over its flat storage.
    pub fn flatten(&mut self, a: Val) -> Val {
        let n = &self.nodes[a.0];
        let values = n.values.clone();
        let len = values.len();
        let ng = n.needs_grad;
        self.push(Op::Flatten(a), values, vec![len], ng)
    }

    /// Gather a single row as a 1-D vector.
    pub fn row(&mut self, m: Val, id: usize) -> Val {
        let g = self.gather(m, &[id]);
        self.flatten(g)
    }

    pub fn sum(&mut self, a: Val) -> Val {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let ng = self.needs(a);
        self.push(Op::SumAll(a), vec![s], vec![1], ng)
    }

    /// Column sums of a matrix: (r × c) → (c).
    pub fn sum_axis0(&mut self, m: Val) -> Val {
        let (r, c) = self.dims2("sum_axis0", m);
        let mv = &self.nodes[m.0].values;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(&mv[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        let ng = self.needs(m);
        self.push(Op::SumAxis0(m), out, vec![c], ng)
    }

    // ── Normalization ────────────────────────────────────────────────

    pub fn softmax(&mut self, a: Val) -> Val {
        let la = self.dims1("softmax", a);
        let out = softmax_values(&self.nodes[a.0].values, None);
        let ng = self.needs(a);
        debug_assert_eq!(out.len(), la);
        self.push(Op::Softmax(a), out, vec![la], ng)
    }

    /// Softmax restricted to unmasked positions; masked positions receive
    /// exactly 0. At least one position must be unmasked.
    pub fn masked_softmax(&mut self, a: Val, mask: &[bool]) -> Val {
        let la = self.dims1("masked_softmax", a);
        if mask.len() != la {
            panic!(
                "masked_softmax: shape mismatch between logits {:?} and mask [{}]",
                self.nodes[a.0].shape,
                mask.len()
            );
        }
        assert!(
            mask.iter().any(|&m| m),
            "masked_softmax: all positions masked"
        );
        let out = softmax_values(&self.nodes[a.0].values, Some(mask));
        let ng = self.needs(a);
        self.push(Op::MaskedSoftmax(a), out, vec![la], ng)
    }

    // ── Reverse sweep ────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the tape (the record is
    /// cleared by dropping it); gradients for every reachable leaf with
    /// `requires_grad` live in the returned [`Gradients`].
    pub fn backward(self, loss: Val) -> Gradients {
        let n = &self.nodes[loss.0];
        assert!(
            n.values.len() == 1,
            "backward: loss must be scalar, got shape {:?}",
            n.shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let dy = grads[i].take().unwrap();
            self.propagate(i, &dy, &mut grads);
            // keep the node's own gradient available to callers
            grads[i] = Some(dy);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(pid) } => Some((pid, i)),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn propagate(&self, node: usize, dy: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let acc = |grads: &mut Vec<Option<Vec<f64>>>, v: Val, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; self.nodes[v.0].values.len()]);
            }
            f(slot.as_mut().unwrap());
        };
        let y = &self.nodes[node].values;

        match &self.nodes[node].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                acc(grads, *a, &mut |g| {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d)
                });
                acc(grads, *b, &mut |g| {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d)
                });
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |g| {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d)
                });
                acc(grads, *b, &mut |g| {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g -= d)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i];
                    }
                });
                acc(grads, *b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * c;
                    }
                });
            }
            Op::MulScalar(a, s) => {
                let (av, sv) = (self.vals(*a), self.vals(*s)[0]);
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * sv;
                    }
                });
                acc(grads, *s, &mut |g| {
                    g[0] += dy.iter().zip(av).map(|(&d, &x)| d * x).sum::<f64>();
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let (av, bv) = (self.vals(*a), self.vals(*b));
                // dA = dY · B^T
                acc(grads, *a, &mut |g| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[i * n + j] * bv[p * n + j];
                            }
                            g[i * k + p] += s;
                        }
                    }
                });
                // dB = A^T · dY
                acc(grads, *b, &mut |g| {
                    for p in 0..k {
                        for i in 0..m {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                g[p * n + j] += x * dy[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                acc(grads, *a, &mut |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += dy[j * m + i];
                        }
                    }
                });
            }
            Op::MatVec(m, v) => {
                let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                let (mv, vv) = (self.vals(*m), self.vals(*v));
                acc(grads, *m, &mut |g| {
                    for i in 0..r {
                        let d = dy[i];
                        if d == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            g[i * c + j] += d * vv[j];
                        }
                    }
                });
                acc(grads, *v, &mut |g| {
                    for i in 0..r {
                        let d = dy[i];
                        if d == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            g[j] += d * mv[i * c + j];
                        }
                    }
                });
            }
            Op::VecMat(v, m) => {
                let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                let (vv, mv) = (self.vals(*v), self.vals(*m));
                acc(grads, *v, &mut |g| {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += mv[i * c + j] * dy[j];
                        }
                        g[i] += s;
                    }
                });
                acc(grads, *m, &mut |g| {
                    for i in 0..r {
                        let x = vv[i];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            g[i * c + j] += x * dy[j];
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                let d = dy[0];
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += d * bv[i];
                    }
                });
                acc(grads, *b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += d * av[i];
                    }
                });
            }
            Op::AddRowwise(m, v) => {
                let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                acc(grads, *m, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i];
                    }
                });
                acc(grads, *v, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dy[i * c + j];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].values.len();
                    acc(grads, p, &mut |g| {
                        g.iter_mut()
                            .zip(&dy[off..off + len])
                            .for_each(|(g, &d)| *g += d);
                    });
                    off += len;
                }
            }
            Op::StackRows(rows) => {
                let c = self.nodes[rows[0].0].values.len();
                for (i, &r) in rows.iter().enumerate() {
                    acc(grads, r, &mut |g| {
                        g.iter_mut()
                            .zip(&dy[i * c..(i + 1) * c])
                            .for_each(|(g, &d)| *g += d);
                    });
                }
            }
            Op::Slice(a, start, len) => {
                let (start, len) = (*start, *len);
                acc(grads, *a, &mut |g| {
                    g[start..start + len]
                        .iter_mut()
                        .zip(dy)
                        .for_each(|(g, &d)| *g += d);
                });
            }
            Op::Select(a, idx) => {
                let idx = *idx;
                acc(grads, *a, &mut |g| g[idx] += dy[0]);
            }
            Op::Flatten(a) => {
                acc(grads, *a, &mut |g| {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g += d)
                });
            }
            Op::Gather(m, ids) => {
                let c = self.nodes[m.0].shape[1];
                acc(grads, *m, &mut |g| {
                    for (i, &id) in ids.iter().enumerate() {
                        g[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&dy[i * c..(i + 1) * c])
                            .for_each(|(g, &d)| *g += d);
                    }
                });
            }
            Op::SumAll(a) => {
                let d = dy[0];
                acc(grads, *a, &mut |g| g.iter_mut().for_each(|g| *g += d));
            }
            Op::SumAxis0(m) => {
                let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                acc(grads, *m, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += dy[j];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Exp(a) => {
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = self.vals(*a);
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        if av[i] > LOG_CLAMP {
                            g[i] += dy[i] / av[i];
                        }
                    }
                });
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                // dx_i = y_i (dy_i − Σ_j dy_j y_j); masked entries have
                // y_i = 0 exactly, so they receive exactly 0.
                let s: f64 = dy.iter().zip(y).map(|(&d, &p)| d * p).sum();
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += y[i] * (dy[i] - s);
                    }
                });
            }
            Op::LogAddExp(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(grads, *a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / (1.0 + (bv[i] - av[i]).exp());
                    }
                });
                acc(grads, *b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] / (1.0 + (av[i] - bv[i]).exp());
                    }
                });
            }
        }
    }
}

fn softmax_values(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let live = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in logits.iter().enumerate() {
        if live(i) && x > max {
            max = x;
        }
    }
    let mut out = vec![0.0; logits.len()];
    let mut denom = 0.0;
    for (i, &x) in logits.iter().enumerate() {
        if live(i) {
            let e = (x - max).exp();
            out[i] = e;
            denom += e;
        }
    }
    for (i, o) in out.iter_mut().enumerate() {
        if live(i) {
            *o /= denom;
        }
    }
    out
}
