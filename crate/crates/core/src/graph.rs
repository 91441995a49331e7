//! Reverse-mode automatic differentiation on a per-forward tape.
//!
//! A [`Graph`] borrows the parameter tensors it reads (no copies) and records
//! every intermediate node. [`Graph::backward`] seeds any set of nodes with
//! upstream gradients, accumulates parameter gradients into a caller buffer,
//! and hands back the gradients of the remaining nodes (inputs included) so
//! that separately recorded graphs can be chained by hand.

use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    /// Position on the tape; indexes the vector returned by [`Graph::backward`].
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Debug)]
enum Op {
    Param(usize),
    Input,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulScalar(NodeId, NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Gather { table: NodeId, ids: Vec<usize> },
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SumRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    PickPerRow(NodeId, Vec<usize>),
    PickEntries(NodeId, Vec<usize>),
    PairwiseSqDist(NodeId),
    QuadForm(NodeId, Vec<f64>),
    Reshape(NodeId),
}

struct Node<S> {
    op: Op,
    value: Tensor<S>,
    /// Op-specific forward cache (normalized activations for layer norm).
    cache: Option<Tensor<S>>,
}

pub struct Graph<'p, S: Scalar> {
    params: &'p [Tensor<S>],
    nodes: Vec<Node<S>>,
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p [Tensor<S>]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(i) => &self.params[i],
            _ => &node.value,
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node { op, value, cache: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        assert!(index < self.params.len(), "parameter index out of range");
        self.push(Op::Param(index), Tensor::zeros(0, 0))
    }

    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(m, n);
        gemm_acc(&self.value(a).data, &self.value(b).data, &mut out.data, m, k, n);
        self.push(Op::MatMul(a, b), out)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner dimension mismatch");
        let mut out = Tensor::zeros(m, n);
        gemm_nt_acc(&self.value(a).data, &self.value(b).data, &mut out.data, m, k, n);
        self.push(Op::MatMulT(a, b), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Add(a, b), out)
    }

    /// Adds a `1×n` row to every row of an `m×n` node.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "add_row expects a 1×n row");
        let mut out = self.value(a).clone();
        let r = &self.value(row).data;
        for i in 0..m {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        self.push(Op::AddRow(a, row), out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.rows, va.cols, data);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| x.scale(c));
        self.push(Op::Scale(a, c), out)
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar expects a 1×1 factor");
        let sv = self.value(s).data[0];
        let out = self.value(a).map(|x| x * sv);
        self.push(Op::MulScalar(a, s), out)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(gelu);
        self.push(Op::Gelu(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), out)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), out)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.sqrt());
        self.push(Op::Sqrt(a), out)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| S::one() / x);
        self.push(Op::Recip(a), out)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.rows, v.cols);
        for r in 0..v.rows {
            softmax_into(v.row(r), out.row_mut(r));
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.rows, v.cols);
        for r in 0..v.rows {
            let row = v.row(r);
            let m = max_by_value(row);
            let mut z = S::zero();
            for &x in row {
                z += (x - m).exp();
            }
            let lz = z.ln() + m;
            for (o, &x) in out.row_mut(r).iter_mut().zip(row) {
                *o = x - lz;
            }
        }
        self.push(Op::LogSoftmaxRows(a), out)
    }

    /// Row-wise layer normalization with affine `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let vx = self.value(x);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Tensor::zeros(m, n);
        let mut rstd = Tensor::zeros(m, 1);
        let mut out = Tensor::zeros(m, n);
        let inv_n = 1.0 / n as f64;
        for r in 0..m {
            let row = vx.row(r);
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean = mean.scale(inv_n);
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var.scale(inv_n);
            let rs = S::one() / (var + S::from_f64(LN_EPS)).sqrt();
            rstd.data[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat.data[r * n + c] = h;
                out.data[r * n + c] = h * g[c] + b[c];
            }
        }
        // cache rows: normalized activations followed by the reciprocal std
        let mut cache = Tensor::zeros(m, n + 1);
        for r in 0..m {
            cache.row_mut(r)[..n].copy_from_slice(xhat.row(r));
            cache.data[r * (n + 1) + n] = rstd.data[r];
        }
        let id = self.push(Op::LayerNorm { x, gamma, beta }, out);
        self.nodes[id.0].cache = Some(cache);
        id
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Tensor::zeros(ids.len(), t.cols);
        for (r, &i) in ids.iter().enumerate() {
            assert!(i < t.rows, "gather index {i} out of range for {} rows", t.rows);
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a);
        assert!(start <= end && end <= v.rows, "slice_rows out of range");
        let out = Tensor::from_vec(end - start, v.cols, v.data[start * v.cols..end * v.cols].to_vec());
        self.push(Op::SliceRows(a, start), out)
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a);
        assert!(start <= end && end <= v.cols, "slice_cols out of range");
        let w = end - start;
        let mut out = Tensor::zeros(v.rows, w);
        for r in 0..v.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, cols, data))
    }

    /// Column sums: `m×n → 1×n`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Tensor::zeros(1, v.cols);
        for r in 0..v.rows {
            for (o, &x) in out.data.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), out)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut s = S::zero();
        for &x in &self.value(a).data {
            s += x;
        }
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut s = S::zero();
        for &x in &v.data {
            s += x;
        }
        let n = v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s.scale(1.0 / n)))
    }

    /// Picks one column per row: `m×n → m×1`.
    pub fn pick_per_row(&mut self, a: NodeId, cols: &[usize]) -> NodeId {
        let v = self.value(a);
        assert_eq!(cols.len(), v.rows, "pick_per_row needs one index per row");
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < v.cols, "pick_per_row column out of range");
                v.at(r, c)
            })
            .collect();
        self.push(Op::PickPerRow(a, cols.to_vec()), Tensor::from_vec(v.rows, 1, data))
    }

    /// Picks flat entries: `→ 1×k`.
    pub fn pick_entries(&mut self, a: NodeId, flat: &[usize]) -> NodeId {
        let v = self.value(a);
        let data = flat.iter().map(|&i| v.data[i]).collect();
        self.push(Op::PickEntries(a, flat.to_vec()), Tensor::row_vector(data))
    }

    /// Squared Euclidean distances between all row pairs: `n×d → n×n`.
    pub fn pairwise_sq_dist(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let n = v.rows;
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let mut s = S::zero();
                for (&x, &y) in v.row(i).iter().zip(v.row(j)) {
                    let d = x - y;
                    s += d * d;
                }
                out.data[i * n + j] = s;
                out.data[j * n + i] = s;
            }
        }
        self.push(Op::PairwiseSqDist(a), out)
    }

    /// `wᵀ K w` for a constant weight vector.
    pub fn quad_form(&mut self, k: NodeId, w: &[f64]) -> NodeId {
        let v = self.value(k);
        assert_eq!(v.shape(), (w.len(), w.len()), "quad_form shape mismatch");
        let n = w.len();
        let mut s = S::zero();
        for i in 0..n {
            let mut row = S::zero();
            for (x, &wj) in v.data[i * n..(i + 1) * n].iter().zip(w) {
                row += x.scale(wj);
            }
            s += row.scale(w[i]);
        }
        self.push(Op::QuadForm(k, w.to_vec()), Tensor::scalar(s))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(a);
        assert_eq!(v.len(), rows * cols, "reshape size mismatch");
        let out = Tensor::from_vec(rows, cols, v.data.clone());
        self.push(Op::Reshape(a), out)
    }

    /// Back-propagates from `seeds`. Parameter gradients are accumulated into
    /// `param_grads` (one tensor per parameter, same shapes). Returns the
    /// gradient of every non-parameter node that received one.
    pub fn backward(&self, seeds: &[(NodeId, Tensor<S>)], param_grads: &mut [Tensor<S>]) -> Vec<Option<Tensor<S>>> {
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let Some(top) = seeds.iter().map(|(id, _)| id.0).max() else {
            return grads;
        };
        for (id, g) in seeds {
            assert_eq!(g.shape(), self.shape(*id), "seed shape mismatch");
            accumulate(&mut grads[id.0], g.clone());
        }
        for idx in (0..=top).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(i) => {
                    param_grads[*i].add_assign(&g);
                    continue;
                }
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                _ => {}
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Param(_) | Op::Input => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let mut ga = Tensor::zeros(m, k);
                gemm_nt_acc(&g.data, &self.value(*b).data, &mut ga.data, m, n, k);
                let mut gb = Tensor::zeros(k, n);
                gemm_tn_acc(&self.value(*a).data, &g.data, &mut gb.data, m, k, n);
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let mut ga = Tensor::zeros(m, k);
                gemm_acc(&g.data, &self.value(*b).data, &mut ga.data, m, n, k);
                let mut gb = Tensor::zeros(n, k);
                gemm_tn_acc(&g.data, &self.value(*a).data, &mut gb.data, m, n, k);
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(&mut grads[a.0], g.clone());
                let mut gr = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, &x) in gr.data.iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(&mut grads[row.0], gr);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let ga = zip_map(g, vb, |x, y| x * y);
                let gb = zip_map(g, va, |x, y| x * y);
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.map(|x| x.scale(*c)));
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data[0];
                accumulate(&mut grads[a.0], g.map(|x| x * sv));
                let mut gs = S::zero();
                for (&x, &y) in g.data.iter().zip(&self.value(*a).data) {
                    gs += x * y;
                }
                accumulate(&mut grads[s.0], Tensor::scalar(gs));
            }
            Op::Gelu(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| gv * gelu_grad(x));
                accumulate(&mut grads[a.0], ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, out, |gv, y| gv * (S::one() - y * y));
                accumulate(&mut grads[a.0], ga);
            }
            Op::Exp(a) => {
                accumulate(&mut grads[a.0], zip_map(g, out, |gv, y| gv * y));
            }
            Op::Sqrt(a) => {
                accumulate(&mut grads[a.0], zip_map(g, out, |gv, y| gv.scale(0.5) / y));
            }
            Op::Recip(a) => {
                accumulate(&mut grads[a.0], zip_map(g, out, |gv, y| -(gv * y * y)));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mut dot = S::zero();
                    for (&yy, &gg) in y.iter().zip(gr) {
                        dot += yy * gg;
                    }
                    for ((o, &yy), &gg) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mut total = S::zero();
                    for &gg in gr {
                        total += gg;
                    }
                    for ((o, &ly), &gg) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = gg - ly.exp() * total;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let cache = node.cache.as_ref().expect("layer norm cache");
                let (m, n) = g.shape();
                let gam = &self.value(*gamma).data;
                let mut gx = Tensor::zeros(m, n);
                let mut gg = Tensor::zeros(1, n);
                let mut gb = Tensor::zeros(1, n);
                let inv_n = 1.0 / n as f64;
                for r in 0..m {
                    let crow = cache.row(r);
                    let xhat = &crow[..n];
                    let rs = crow[n];
                    let gr = g.row(r);
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for c in 0..n {
                        let d = gr[c] * gam[c];
                        mean_d += d;
                        mean_dx += d * xhat[c];
                        gg.data[c] += gr[c] * xhat[c];
                        gb.data[c] += gr[c];
                    }
                    mean_d = mean_d.scale(inv_n);
                    mean_dx = mean_dx.scale(inv_n);
                    let orow = gx.row_mut(r);
                    for c in 0..n {
                        let d = gr[c] * gam[c];
                        orow[c] = rs * (d - mean_d - xhat[c] * mean_dx);
                    }
                }
                accumulate(&mut grads[x.0], gx);
                accumulate(&mut grads[gamma.0], gg);
                accumulate(&mut grads[beta.0], gb);
            }
            Op::Gather { table, ids } => {
                let (tr, tc) = self.shape(*table);
                let mut gt = Tensor::zeros(tr, tc);
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(&mut grads[table.0], gt);
            }
            Op::SliceRows(a, start) => {
                let (ar, ac) = self.shape(*a);
                let mut ga = Tensor::zeros(ar, ac);
                ga.data[start * ac..start * ac + g.len()].copy_from_slice(&g.data);
                accumulate(&mut grads[a.0], ga);
            }
            Op::SliceCols(a, start) => {
                let (ar, ac) = self.shape(*a);
                let mut ga = Tensor::zeros(ar, ac);
                for r in 0..ar {
                    ga.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    let mut gp = Tensor::zeros(pr, pc);
                    for r in 0..pr {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                    }
                    off += pc;
                    accumulate(&mut grads[p.0], gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    let gp = Tensor::from_vec(pr, pc, g.data[off..off + pr * pc].to_vec());
                    off += pr * pc;
                    accumulate(&mut grads[p.0], gp);
                }
            }
            Op::SumRows(a) => {
                let (ar, ac) = self.shape(*a);
                let mut ga = Tensor::zeros(ar, ac);
                for r in 0..ar {
                    ga.row_mut(r).copy_from_slice(&g.data);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sum(a) => {
                let (ar, ac) = self.shape(*a);
                accumulate(&mut grads[a.0], Tensor::from_vec(ar, ac, vec![g.data[0]; ar * ac]));
            }
            Op::Mean(a) => {
                let (ar, ac) = self.shape(*a);
                let gv = g.data[0].scale(1.0 / (ar * ac) as f64);
                accumulate(&mut grads[a.0], Tensor::from_vec(ar, ac, vec![gv; ar * ac]));
            }
            Op::PickPerRow(a, cols) => {
                let (ar, ac) = self.shape(*a);
                let mut ga = Tensor::zeros(ar, ac);
                for (r, &c) in cols.iter().enumerate() {
                    ga.data[r * ac + c] += g.data[r];
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::PickEntries(a, flat) => {
                let (ar, ac) = self.shape(*a);
                let mut ga = Tensor::zeros(ar, ac);
                for (k, &i) in flat.iter().enumerate() {
                    ga.data[i] += g.data[k];
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::PairwiseSqDist(a) => {
                let va = self.value(*a);
                let (n, d) = va.shape();
                let mut ga = Tensor::zeros(n, d);
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let coef = (g.data[i * n + j] + g.data[j * n + i]).scale(2.0);
                        let xi = va.row(i);
                        let xj = va.row(j);
                        let orow = ga.row_mut(i);
                        for c in 0..d {
                            orow[c] += coef * (xi[c] - xj[c]);
                        }
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::QuadForm(k, w) => {
                let n = w.len();
                let gv = g.data[0];
                let mut gk = Tensor::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        gk.data[i * n + j] = gv.scale(w[i] * w[j]);
                    }
                }
                accumulate(&mut grads[k.0], gk);
            }
            Op::Reshape(a) => {
                let (ar, ac) = self.shape(*a);
                accumulate(&mut grads[a.0], Tensor::from_vec(ar, ac, g.data.clone()));
            }
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    Tensor::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn max_by_value<S: Scalar>(row: &[S]) -> S {
    let mut m = row[0];
    for &x in &row[1..] {
        if x.value() > m.value() {
            m = x;
        }
    }
    m
}

pub(crate) fn softmax_into<S: Scalar>(row: &[S], out: &mut [S]) {
    let m = max_by_value(row);
    let mut z = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        z += *o;
    }
    let inv = S::one() / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    x * (S::one() + x.scale(INV_SQRT_2).erf()).scale(0.5)
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let cdf = (S::one() + x.scale(INV_SQRT_2).erf()).scale(0.5);
    let pdf = (-(x * x).scale(0.5)).exp().scale(INV_SQRT_2PI);
    cdf + x * pdf
}
