//! Reverse-mode automatic differentiation over tensors.
//!
//! A forward pass records one node per primitive operation; `backward`
//! replays the nodes once in reverse creation order (creation order is a
//! topological order because ops only reference earlier nodes) and
//! accumulates adjoints. Adjoint shapes always equal value shapes.
//!
//! Parameters and constants are borrowed, so recording a forward pass does
//! not copy weight matrices.

use super::tensor::{softmax_f64, softmax_prefix_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// a @ b^T where b is [n, k]
    MatmulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// [m, n] + broadcast row bias [n]
    AddRow(NodeId, NodeId),
    Scale(NodeId, f32),
    /// elementwise x - c (derivative 1, so c is not recorded)
    SubConst(NodeId),
    Gelu(NodeId),
    /// row-wise RMS norm with learned gain
    RmsNorm { x: NodeId, gain: NodeId, eps: f32 },
    /// row i softmaxes over columns [0, lens[i]), zero beyond
    SoftmaxRows { x: NodeId, lens: Vec<usize> },
    GatherRows { table: NodeId, ids: Vec<usize> },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    ConcatRows(NodeId, NodeId),
    GatherCols { x: NodeId, idx: Vec<usize> },
    /// pre gated by per-column thresholds: y = pre * [pre > theta]
    JumpRelu { pre: NodeId, theta: NodeId },
    /// mean over rows of (lse(row) - row[target]); scalar output
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
    /// KL(p || softmax(q)) against a constant probability vector p
    KlFromConstP { p: Vec<f64>, q: NodeId },
    /// sum_i |x_i - 1| with subgradient 0 at the kink
    L1FromOnes(NodeId),
    /// weighted sum of scalar nodes
    WeightedSum(Vec<(NodeId, f32)>),
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.get()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        id
    }

    fn grad_of(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, t: &'a Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value: Value::Borrowed(t), op: Op::Leaf, needs_grad: false });
        id
    }

    pub fn constant_owned(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable input: adjoint available after `backward`.
    pub fn param(&mut self, t: &'a Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value: Value::Borrowed(t), op: Op::Leaf, needs_grad: true });
        id
    }

    // ── op constructors ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.grad_of(a) || self.grad_of(b);
        self.push(v, Op::Matmul(a, b), g)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b));
        let g = self.grad_of(a) || self.grad_of(b);
        self.push(v, Op::MatmulBt(a, b), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let g = self.grad_of(a) || self.grad_of(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let g = self.grad_of(a) || self.grad_of(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b));
        let g = self.grad_of(a) || self.grad_of(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (m, n) = (xv.nrows(), xv.ncols());
        assert_eq!(bv.len(), n, "bias length mismatch");
        let mut out = xv.clone();
        let out_shape_fix = out.shape().to_vec();
        let _ = out_shape_fix;
        for i in 0..m {
            let row = out.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r += bv.data()[j];
            }
        }
        let g = self.grad_of(x) || self.grad_of(bias);
        self.push(out, Op::AddRow(x, bias), g)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let v = self.value(x).scale(c);
        let g = self.grad_of(x);
        self.push(v, Op::Scale(x, c), g)
    }

    pub fn sub_const(&mut self, x: NodeId, c: f32) -> NodeId {
        let v = {
            let xv = self.value(x);
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&u| u - c).collect())
        };
        let g = self.grad_of(x);
        self.push(v, Op::SubConst(x), g)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = {
            let xv = self.value(x);
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&u| gelu(u)).collect())
        };
        let g = self.grad_of(x);
        self.push(v, Op::Gelu(x), g)
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f32) -> NodeId {
        let v = rms_norm_forward(self.value(x), self.value(gain), eps);
        let g = self.grad_of(x) || self.grad_of(gain);
        self.push(v, Op::RmsNorm { x, gain, eps }, g)
    }

    pub fn softmax_rows(&mut self, x: NodeId, lens: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        assert_eq!(lens.len(), xv.nrows());
        let mut out = xv.clone();
        for (i, &len) in lens.iter().enumerate() {
            softmax_prefix_in_place(out.row_mut(i), len);
        }
        let g = self.grad_of(x);
        self.push(out, Op::SoftmaxRows { x, lens }, g)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let tv = self.value(table);
        let n = tv.ncols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in &ids {
            data.extend_from_slice(tv.row(id));
        }
        let g = self.grad_of(table);
        self.push(Tensor::new(vec![ids.len(), n], data), Op::GatherRows { table, ids }, g)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let n = xv.ncols();
        let data = xv.data()[start * n..(start + len) * n].to_vec();
        let g = self.grad_of(x);
        self.push(Tensor::new(vec![len, n], data), Op::SliceRows { x, start, len }, g)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let m = xv.nrows();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let g = self.grad_of(x);
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols { x, start, len }, g)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let m = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in &parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let g = parts.iter().any(|&p| self.grad_of(p));
        self.push(Tensor::new(vec![m, total], data), Op::ConcatCols(parts), g)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ncols(), bv.ncols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let shape = vec![av.nrows() + bv.nrows(), av.ncols()];
        let g = self.grad_of(a) || self.grad_of(b);
        self.push(Tensor::new(shape, data), Op::ConcatRows(a, b), g)
    }

    pub fn gather_cols(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        let m = xv.nrows();
        let mut data = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            let row = xv.row(i);
            for &j in &idx {
                data.push(row[j]);
            }
        }
        let g = self.grad_of(x);
        self.push(Tensor::new(vec![m, idx.len()], data), Op::GatherCols { x, idx }, g)
    }

    /// JumpReLU gate with constant thresholds; the a.e. derivative
    /// `1[pre > theta]` is used for the backward pass.
    pub fn jump_relu(&mut self, pre: NodeId, theta: NodeId) -> NodeId {
        let pv = self.value(pre);
        let tv = self.value(theta);
        let n = pv.ncols();
        assert_eq!(tv.len(), n);
        let mut out = pv.clone();
        for i in 0..pv.nrows() {
            let row = out.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                if *r <= tv.data()[j] {
                    *r = 0.0;
                }
            }
        }
        let g = self.grad_of(pre);
        self.push(out, Op::JumpRelu { pre, theta }, g)
    }

    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.nrows());
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            total += super::tensor::log_sum_exp(row) - row[t] as f64;
        }
        let loss = (total / targets.len() as f64) as f32;
        let g = self.grad_of(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropyRows { logits, targets }, g)
    }

    pub fn kl_from_const_p(&mut self, p: Vec<f64>, q: NodeId) -> NodeId {
        let qv = self.value(q);
        assert_eq!(qv.len(), p.len());
        let log_q: Vec<f64> = {
            let lse = super::tensor::log_sum_exp(qv.data());
            qv.data().iter().map(|&v| v as f64 - lse).collect()
        };
        let mut kl = 0.0f64;
        for (i, &pi) in p.iter().enumerate() {
            if pi > 0.0 {
                kl += pi * (pi.ln() - log_q[i]);
            }
        }
        let g = self.grad_of(q);
        self.push(Tensor::scalar(kl as f32), Op::KlFromConstP { p, q }, g)
    }

    pub fn l1_from_ones(&mut self, x: NodeId) -> NodeId {
        let v: f64 = self.value(x).data().iter().map(|&u| (u as f64 - 1.0).abs()).sum();
        let g = self.grad_of(x);
        self.push(Tensor::scalar(v as f32), Op::L1FromOnes(x), g)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f32)>) -> NodeId {
        let v: f64 = terms.iter().map(|&(id, c)| self.value(id).item() as f64 * c as f64).sum();
        let g = terms.iter().any(|&(id, _)| self.grad_of(id));
        self.push(Tensor::scalar(v as f32), Op::WeightedSum(terms), g)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Runs one reverse sweep from `out` seeded with `seed` and returns the
    /// adjoint per node (None where no gradient flowed).
    pub fn backward(&self, out: NodeId, seed: f32) -> Gradients {
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        {
            let shape = self.value(out).shape().to_vec();
            let n: usize = shape.iter().product();
            adj[out.0] = Some(Tensor::new(shape, vec![seed; n]));
        }
        for i in (0..self.nodes.len()).rev() {
            if adj[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = adj[i].take().unwrap();
            self.accumulate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Gradients { adj }
    }

    fn add_into(&self, adj: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.grad_of(id) {
            return;
        }
        match &mut adj[id.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.grad_of(*a) {
                    self.add_into(adj, *a, g.matmul_bt(self.value(*b)));
                }
                if self.grad_of(*b) {
                    self.add_into(adj, *b, self.value(*a).matmul_at(g));
                }
            }
            Op::MatmulBt(a, b) => {
                if self.grad_of(*a) {
                    self.add_into(adj, *a, g.matmul(self.value(*b)));
                }
                if self.grad_of(*b) {
                    self.add_into(adj, *b, g.matmul_at(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.add_into(adj, *a, g.clone());
                self.add_into(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_into(adj, *a, g.clone());
                self.add_into(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.grad_of(*a) {
                    self.add_into(adj, *a, g.mul(self.value(*b)));
                }
                if self.grad_of(*b) {
                    self.add_into(adj, *b, g.mul(self.value(*a)));
                }
            }
            Op::AddRow(x, bias) => {
                self.add_into(adj, *x, g.clone());
                if self.grad_of(*bias) {
                    let n = g.ncols();
                    let mut col = vec![0.0f64; n];
                    for i in 0..g.nrows() {
                        for (j, &v) in g.row(i).iter().enumerate() {
                            col[j] += v as f64;
                        }
                    }
                    self.add_into(
                        adj,
                        *bias,
                        Tensor::from_vec(col.into_iter().map(|v| v as f32).collect()),
                    );
                }
            }
            Op::Scale(x, c) => self.add_into(adj, *x, g.scale(*c)),
            Op::SubConst(x) => self.add_into(adj, *x, g.clone()),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&u, &gv)| gv * gelu_deriv(u))
                    .collect();
                self.add_into(adj, *x, Tensor::new(xv.shape().to_vec(), data));
            }
            Op::RmsNorm { x, gain, eps } => {
                let (dx, dgain) = rms_norm_backward(
                    self.value(*x),
                    self.value(*gain),
                    *eps,
                    g,
                    self.grad_of(*x),
                    self.grad_of(*gain),
                );
                if let Some(dx) = dx {
                    self.add_into(adj, *x, dx);
                }
                if let Some(dgain) = dgain {
                    self.add_into(adj, *gain, dgain);
                }
            }
            Op::SoftmaxRows { x, lens } => {
                let yv = self.value(NodeId(i));
                let mut dx = Tensor::zeros(yv.shape());
                for (r, &len) in lens.iter().enumerate() {
                    let y = yv.row(r);
                    let gr = g.row(r);
                    let mut s = 0.0f64;
                    for j in 0..len {
                        s += gr[j] as f64 * y[j] as f64;
                    }
                    let drow = dx.row_mut(r);
                    for j in 0..len {
                        drow[j] = (y[j] as f64 * (gr[j] as f64 - s)) as f32;
                    }
                }
                self.add_into(adj, *x, dx);
            }
            Op::GatherRows { table, ids } => {
                if self.grad_of(*table) {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.shape());
                    let n = tv.ncols();
                    for (r, &id) in ids.iter().enumerate() {
                        let src = g.row(r);
                        let dst = &mut dt.data_mut()[id * n..(id + 1) * n];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    self.add_into(adj, *table, dt);
                }
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.value(*x);
                let n = xv.ncols();
                let mut dx = Tensor::zeros(xv.shape());
                dx.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                self.add_into(adj, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..g.nrows() {
                    let src = g.row(r);
                    let dst = &mut dx.row_mut(r)[*start..*start + *len];
                    dst.copy_from_slice(src);
                }
                self.add_into(adj, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.grad_of(p) {
                        let mut dp = Tensor::zeros(self.value(p).shape());
                        for r in 0..g.nrows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[start..start + w]);
                        }
                        self.add_into(adj, p, dp);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).nrows();
                let n = g.ncols();
                if self.grad_of(*a) {
                    let da = Tensor::new(
                        self.value(*a).shape().to_vec(),
                        g.data()[..ra * n].to_vec(),
                    );
                    self.add_into(adj, *a, da);
                }
                if self.grad_of(*b) {
                    let db = Tensor::new(
                        self.value(*b).shape().to_vec(),
                        g.data()[ra * n..].to_vec(),
                    );
                    self.add_into(adj, *b, db);
                }
            }
            Op::GatherCols { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..g.nrows() {
                    let gr = g.row(r);
                    let drow = dx.row_mut(r);
                    for (c, &j) in idx.iter().enumerate() {
                        drow[j] += gr[c];
                    }
                }
                self.add_into(adj, *x, dx);
            }
            Op::JumpRelu { pre, theta } => {
                let pv = self.value(*pre);
                let tv = self.value(*theta);
                let n = pv.ncols();
                let mut dx = Tensor::zeros(pv.shape());
                for r in 0..pv.nrows() {
                    let prow = pv.row(r);
                    let grow = g.row(r);
                    let drow = dx.row_mut(r);
                    for j in 0..n {
                        if prow[j] > tv.data()[j] {
                            drow[j] = grow[j];
                        }
                    }
                }
                self.add_into(adj, *pre, dx);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let lv = self.value(*logits);
                let scale = g.item() as f64 / targets.len() as f64;
                let mut dl = Tensor::zeros(lv.shape());
                for (r, &t) in targets.iter().enumerate() {
                    let probs = softmax_f64(lv.row(r));
                    let drow = dl.row_mut(r);
                    for (j, p) in probs.iter().enumerate() {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        drow[j] = ((p - indicator) * scale) as f32;
                    }
                }
                self.add_into(adj, *logits, dl);
            }
            Op::KlFromConstP { p, q } => {
                let qv = self.value(*q);
                let probs = softmax_f64(qv.data());
                let gs = g.item() as f64;
                let data = probs
                    .iter()
                    .zip(p.iter())
                    .map(|(&qp, &pp)| ((qp - pp) * gs) as f32)
                    .collect();
                self.add_into(adj, *q, Tensor::new(qv.shape().to_vec(), data));
            }
            Op::L1FromOnes(x) => {
                let xv = self.value(*x);
                let gs = g.item();
                let data = xv
                    .data()
                    .iter()
                    .map(|&u| {
                        if u > 1.0 {
                            gs
                        } else if u < 1.0 {
                            -gs
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.add_into(adj, *x, Tensor::new(xv.shape().to_vec(), data));
            }
            Op::WeightedSum(terms) => {
                let gs = g.item();
                for &(id, c) in terms {
                    self.add_into(adj, id, Tensor::scalar(gs * c));
                }
            }
        }
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.adj[id.0].take()
    }
}

// ── kernels shared with the plain forward path ──────────────────────

pub(crate) const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    (0.5 * x * (1.0 + inner.tanh())) as f32
}

pub fn gelu_deriv(x: f32) -> f32 {
    let x = x as f64;
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    (0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)) as f32
}

pub fn rms_norm_forward(x: &Tensor, gain: &Tensor, eps: f32) -> Tensor {
    let (m, n) = (x.nrows(), x.ncols());
    assert_eq!(gain.len(), n);
    let mut out = Tensor::zeros(x.shape());
    for i in 0..m {
        let row = x.row(i);
        let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n as f64;
        let inv = 1.0 / (ms + eps as f64).sqrt();
        let dst = out.row_mut(i);
        for j in 0..n {
            dst[j] = (row[j] as f64 * inv * gain.data()[j] as f64) as f32;
        }
    }
    out
}

fn rms_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    eps: f32,
    g: &Tensor,
    want_dx: bool,
    want_dgain: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, n) = (x.nrows(), x.ncols());
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dgain = want_dgain.then(|| vec![0.0f64; n]);
    for i in 0..m {
        let row = x.row(i);
        let grow = g.row(i);
        let ms: f64 = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / n as f64;
        let inv = 1.0 / (ms + eps as f64).sqrt();
        if let Some(dg) = dgain.as_mut() {
            for j in 0..n {
                dg[j] += grow[j] as f64 * row[j] as f64 * inv;
            }
        }
        if let Some(dx) = dx.as_mut() {
            // y_j = x_j * inv * g_j ; dL/dx = inv*(g.*grad) - inv^3/n * x * sum(grad.*g.*x)
            let mut s = 0.0f64;
            for j in 0..n {
                s += grow[j] as f64 * gain.data()[j] as f64 * row[j] as f64;
            }
            let c = inv * inv * inv * s / n as f64;
            let drow = dx.row_mut(i);
            for j in 0..n {
                drow[j] =
                    (grow[j] as f64 * gain.data()[j] as f64 * inv - row[j] as f64 * c) as f32;
            }
        }
    }
    (
        dx,
        dgain.map(|dg| Tensor::from_vec(dg.into_iter().map(|v| v as f32).collect())),
    )
}
