//! A small reverse-mode differentiation tape over [`Matrix`] values.
//!
//! The denoiser is built from a handful of fused operations (packed
//! multi-head attention, layer norm, distance-softmax likelihood) so that a
//! whole batch of variable-length sequences is one graph with no padding:
//! sequences are stacked along rows and every sequence-aware op carries the
//! row ranges of its segments.

use std::ops::Range;

use crate::tensor::{gemm_acc, Matrix};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    Silu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: Vec<Range<usize>>,
        k_segs: Vec<Range<usize>>,
        probs: Vec<Vec<f64>>,
    },
    SegmentMean(Var, Vec<Range<usize>>),
    SqDistMean(Var, Var),
    DistSoftmaxNll {
        z: Var,
        table: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Build the forward pass with the op methods, then call
/// [`Graph::backward`] on a `1 × 1` node.
pub struct Graph {
    nodes: Vec<Node>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records gradients for parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track: true,
        }
    }

    /// A graph for forward evaluation only; `backward` yields zeros.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            track: false,
        }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Trainable leaf bound to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: &Matrix) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 × C` bias row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1);
        assert_eq!(b.cols(), self.value(a).cols());
        let b = b.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (x, bb) in out.row_mut(i).iter_mut().zip(&b) {
                *x += bb;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiplies row `i` of `a` by the constant `factors[i]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(factors.len(), out.rows());
        for (i, f) in factors.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|x| *x *= f);
        }
        let ng = self.ng(a);
        self.push(out, Op::RowScale(a, factors), ng)
    }

    /// Row lookup: output row `i` is row `index[i]` of `src`.
    pub fn gather(&mut self, src: Var, index: Vec<usize>) -> Var {
        let s = self.value(src);
        let cols = s.cols();
        let mut out = Matrix::zeros(index.len(), cols);
        for (i, &r) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(s.row(r));
        }
        let ng = self.ng(src);
        self.push(out, Op::Gather(src, index), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 × C` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(i);
            for j in 0..cols {
                xh[j] = (r[j] - mean) * inv;
            }
            let o = out.row_mut(i);
            for j in 0..cols {
                o[j] = g[j] * xhat.get(i, j) + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat row mismatch");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Matrix::zeros(av.rows(), ca + cb);
        for i in 0..av.rows() {
            let o = out.row_mut(i);
            o[..ca].copy_from_slice(av.row(i));
            o[ca..].copy_from_slice(bv.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// Query segment `s` attends to key segment `s` only; there is no causal
    /// mask. `q`, `k`, `v` share the model width, split evenly into `heads`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: Vec<Range<usize>>,
        k_segs: Vec<Range<usize>>,
    ) -> Var {
        assert_eq!(q_segs.len(), k_segs.len(), "segment count mismatch");
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols();
        assert_eq!(kv.cols(), width);
        assert_eq!(vv.cols(), width);
        assert_eq!(width % heads, 0, "width must divide into heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(qv.rows(), width);
        let mut probs = Vec::with_capacity(q_segs.len() * heads);
        for (qs, ks) in q_segs.iter().zip(&k_segs) {
            let nk = ks.len();
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = vec![0.0; qs.len() * nk];
                for (qi, qr) in qs.clone().enumerate() {
                    let qrow = &qv.row(qr)[c0..c0 + dh];
                    let prow = &mut p[qi * nk..(qi + 1) * nk];
                    for (ki, kr) in ks.clone().enumerate() {
                        let krow = &kv.row(kr)[c0..c0 + dh];
                        prow[ki] = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out.row_mut(qr)[c0..c0 + dh];
                    for (ki, kr) in ks.clone().enumerate() {
                        let w = prow[ki];
                        for (o, x) in orow.iter_mut().zip(&vv.row(kr)[c0..c0 + dh]) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_segs,
                k_segs,
                probs,
            },
            ng,
        )
    }

    /// Mean of each row segment; output row `s` is the mean over `segs[s]`.
    pub fn segment_mean(&mut self, a: Var, segs: Vec<Range<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(segs.len(), av.cols());
        for (s, seg) in segs.iter().enumerate() {
            let inv = 1.0 / seg.len().max(1) as f64;
            for r in seg.clone() {
                for (o, x) in out.row_mut(s).iter_mut().zip(av.row(r)) {
                    *o += x * inv;
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentMean(a, segs), ng)
    }

    /// Mean over rows of the squared L2 row distance between `a` and `b`.
    pub fn sq_dist_mean(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sq_dist_mean shape mismatch");
        assert!(av.rows() > 0, "sq_dist_mean over zero rows");
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let out = Matrix::filled(1, 1, total / av.rows() as f64);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::SqDistMean(a, b), ng)
    }

    /// Mean negative log-likelihood of `targets` under the softmax of
    /// `-‖z_i − e_v‖²` over the rows `e_v` of `table`. Rows flagged in
    /// `excluded` get zero probability.
    pub fn dist_softmax_nll(
        &mut self,
        z: Var,
        table: Var,
        targets: Vec<usize>,
        excluded: &[bool],
    ) -> Var {
        let (zv, ev) = (self.value(z), self.value(table));
        assert_eq!(zv.cols(), ev.cols());
        assert_eq!(zv.rows(), targets.len());
        assert!(!targets.is_empty(), "likelihood over zero positions");
        let probs = distance_softmax(zv, ev, excluded);
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs.get(i, y).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len() as f64;
        let ng = self.ng(z) || self.ng(table);
        self.push(
            Matrix::filled(1, 1, nll),
            Op::DistSoftmaxNll {
                z,
                table,
                targets,
                probs,
            },
            ng,
        )
    }

    /// Mean softmax cross-entropy of integer `targets` given row `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        assert!(!targets.is_empty());
        let mut probs = lv.clone();
        for i in 0..probs.rows() {
            softmax_in_place(probs.row_mut(i));
        }
        let nll = targets
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs.get(i, y).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Matrix::filled(1, 1, nll),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Matrix::filled(1, 1, total), Op::WeightedSum(terms), ng)
    }

    /// Back-propagates from the scalar `loss` and returns one gradient per
    /// parameter slot (`n_params` slots, zeros for unused ones).
    pub fn backward(&self, loss: Var, param_shapes: &[(usize, usize)]) -> Vec<Matrix> {
        let mut param_grads: Vec<Matrix> = param_shapes
            .iter()
            .map(|&(r, c)| Matrix::zeros(r, c))
            .collect();
        if !self.ng(loss) {
            return param_grads;
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => param_grads[*id].add_scaled(&dout, 1.0),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        // dA = dC · Bᵀ
                        let mut da = Matrix::zeros(av.rows(), av.cols());
                        gemm_acc(
                            dout.rows(),
                            dout.cols(),
                            bv.rows(),
                            1.0,
                            dout.data(),
                            dout.cols(),
                            1,
                            bv.data(),
                            1,
                            bv.cols(),
                            da.data_mut(),
                            av.cols(),
                        );
                        accumulate(&mut grads, *a, da);
                    }
                    if self.ng(*b) {
                        // dB = Aᵀ · dC
                        let mut db = Matrix::zeros(bv.rows(), bv.cols());
                        gemm_acc(
                            av.cols(),
                            av.rows(),
                            dout.cols(),
                            1.0,
                            av.data(),
                            1,
                            av.cols(),
                            dout.data(),
                            dout.cols(),
                            1,
                            db.data_mut(),
                            bv.cols(),
                        );
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, dout.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, dout);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.ng(*bias) {
                        let mut db = Matrix::zeros(1, dout.cols());
                        for r in dout.iter_rows() {
                            for (d, x) in db.data_mut().iter_mut().zip(r) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, dout);
                    }
                }
                Op::Scale(a, s) => {
                    let mut d = dout;
                    d.scale_in_place(*s);
                    accumulate(&mut grads, *a, d);
                }
                Op::RowScale(a, f) => {
                    let mut d = dout;
                    for (i, fi) in f.iter().enumerate() {
                        d.row_mut(i).iter_mut().for_each(|x| *x *= fi);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gather(src, index) => {
                    let sv = self.value(*src);
                    let mut d = Matrix::zeros(sv.rows(), sv.cols());
                    for (i, &r) in index.iter().enumerate() {
                        for (x, g) in d.row_mut(r).iter_mut().zip(dout.row(i)) {
                            *x += g;
                        }
                    }
                    accumulate(&mut grads, *src, d);
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let mut d = dout;
                    for (g, &x) in d.data_mut().iter_mut().zip(av.data()) {
                        let s = sigmoid(x);
                        *g *= s * (1.0 + x * (1.0 - s));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let g = self.value(*gamma).data();
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut dg = Matrix::zeros(1, cols);
                        let mut db = Matrix::zeros(1, cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                dg.data_mut()[j] += dout.get(i, j) * xhat.get(i, j);
                                db.data_mut()[j] += dout.get(i, j);
                            }
                        }
                        if self.ng(*gamma) {
                            accumulate(&mut grads, *gamma, dg);
                        }
                        if self.ng(*beta) {
                            accumulate(&mut grads, *beta, db);
                        }
                    }
                    if self.ng(*x) {
                        let n = cols as f64;
                        let mut dx = Matrix::zeros(rows, cols);
                        let mut dxh = vec![0.0; cols];
                        for i in 0..rows {
                            let xh = xhat.row(i);
                            for j in 0..cols {
                                dxh[j] = dout.get(i, j) * g[j];
                            }
                            let s1: f64 = dxh.iter().sum();
                            let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                            let row = dx.row_mut(i);
                            for j in 0..cols {
                                row[j] = inv_std[i] / n * (n * dxh[j] - s1 - xh[j] * s2);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    if self.ng(*a) {
                        let d = Matrix::from_fn(dout.rows(), ca, |i, j| dout.get(i, j));
                        accumulate(&mut grads, *a, d);
                    }
                    if self.ng(*b) {
                        let d = Matrix::from_fn(dout.rows(), cb, |i, j| dout.get(i, ca + j));
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    q_segs,
                    k_segs,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let width = qv.cols();
                    let dh = width / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(qv.rows(), width);
                    let mut dk = Matrix::zeros(kv.rows(), width);
                    let mut dv = Matrix::zeros(vv.rows(), width);
                    let mut pi = 0;
                    for (qs, ks) in q_segs.iter().zip(k_segs) {
                        let nk = ks.len();
                        for h in 0..*heads {
                            let c0 = h * dh;
                            let p = &probs[pi];
                            pi += 1;
                            let mut ds = vec![0.0; nk];
                            for (qi, qr) in qs.clone().enumerate() {
                                let prow = &p[qi * nk..(qi + 1) * nk];
                                let dorow = &dout.row(qr)[c0..c0 + dh];
                                // dP = dO · Vᵀ, dV += Pᵀ · dO
                                for (ki, kr) in ks.clone().enumerate() {
                                    ds[ki] = dot(dorow, &vv.row(kr)[c0..c0 + dh]);
                                    let w = prow[ki];
                                    for (d, g) in dv.row_mut(kr)[c0..c0 + dh].iter_mut().zip(dorow)
                                    {
                                        *d += w * g;
                                    }
                                }
                                // softmax Jacobian
                                let inner = dot(&ds, prow);
                                for (d, &pp) in ds.iter_mut().zip(prow) {
                                    *d = pp * (*d - inner) * scale;
                                }
                                let qrow = &qv.row(qr)[c0..c0 + dh];
                                for (ki, kr) in ks.clone().enumerate() {
                                    let s = ds[ki];
                                    if s == 0.0 {
                                        continue;
                                    }
                                    for (d, x) in dq.row_mut(qr)[c0..c0 + dh]
                                        .iter_mut()
                                        .zip(&kv.row(kr)[c0..c0 + dh])
                                    {
                                        *d += s * x;
                                    }
                                    for (d, x) in dk.row_mut(kr)[c0..c0 + dh].iter_mut().zip(qrow) {
                                        *d += s * x;
                                    }
                                }
                            }
                        }
                    }
                    if self.ng(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.ng(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.ng(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::SegmentMean(a, segs) => {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for (s, seg) in segs.iter().enumerate() {
                        let inv = 1.0 / seg.len().max(1) as f64;
                        for r in seg.clone() {
                            for (x, g) in d.row_mut(r).iter_mut().zip(dout.row(s)) {
                                *x += g * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SqDistMean(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let c = 2.0 * dout.get(0, 0) / av.rows() as f64;
                    let mut d = av.clone();
                    d.add_scaled(bv, -1.0);
                    d.scale_in_place(c);
                    if self.ng(*b) {
                        let mut nd = d.clone();
                        nd.scale_in_place(-1.0);
                        accumulate(&mut grads, *b, nd);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, d);
                    }
                }
                Op::DistSoftmaxNll {
                    z,
                    table,
                    targets,
                    probs,
                } => {
                    let (zv, ev) = (self.value(*z), self.value(*table));
                    let c = dout.get(0, 0) / targets.len() as f64;
                    // G = (P − onehot) · c is the gradient w.r.t. the logits.
                    let mut gl = probs.clone();
                    for (i, &y) in targets.iter().enumerate() {
                        let v = gl.get(i, y);
                        gl.set(i, y, v - 1.0);
                    }
                    gl.scale_in_place(c);
                    if self.ng(*z) {
                        // rows of G sum to zero, so dZ = 2 G E
                        let mut dz = gl.matmul(ev);
                        dz.scale_in_place(2.0);
                        accumulate(&mut grads, *z, dz);
                    }
                    if self.ng(*table) {
                        // dE = 2 Gᵀ Z − 2 diag(colsum G) E
                        let mut de = Matrix::zeros(ev.rows(), ev.cols());
                        gemm_acc(
                            gl.cols(),
                            gl.rows(),
                            zv.cols(),
                            2.0,
                            gl.data(),
                            1,
                            gl.cols(),
                            zv.data(),
                            zv.cols(),
                            1,
                            de.data_mut(),
                            ev.cols(),
                        );
                        let mut colsum = vec![0.0; gl.cols()];
                        for r in gl.iter_rows() {
                            for (s, x) in colsum.iter_mut().zip(r) {
                                *s += x;
                            }
                        }
                        for (v, cs) in colsum.iter().enumerate() {
                            for (d, e) in de.row_mut(v).iter_mut().zip(ev.row(v)) {
                                *d -= 2.0 * cs * e;
                            }
                        }
                        accumulate(&mut grads, *table, de);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = dout.get(0, 0) / targets.len() as f64;
                    let mut d = probs.clone();
                    for (i, &y) in targets.iter().enumerate() {
                        let v = d.get(i, y);
                        d.set(i, y, v - 1.0);
                    }
                    d.scale_in_place(c);
                    accumulate(&mut grads, *logits, d);
                }
                Op::WeightedSum(terms) => {
                    let g = dout.get(0, 0);
                    for &(v, w) in terms {
                        if self.ng(v) {
                            accumulate(&mut grads, v, Matrix::filled(1, 1, g * w));
                        }
                    }
                }
            }
        }
        param_grads
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(g) => g.add_scaled(&d, 1.0),
        slot @ None => *slot = Some(d),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Softmax over `-‖z_i − e_v‖²`, with excluded rows forced to probability 0.
pub(crate) fn distance_softmax(z: &Matrix, table: &Matrix, excluded: &[bool]) -> Matrix {
    let logits = neg_sq_distances(z, table);
    let mut probs = logits;
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        for (v, x) in row.iter_mut().enumerate() {
            if excluded.get(v).copied().unwrap_or(false) {
                *x = f64::NEG_INFINITY;
            }
        }
        softmax_in_place(row);
    }
    probs
}

/// `out[i, v] = −‖z_i − e_v‖²`, via `2 z·e − ‖z‖² − ‖e‖²`.
pub(crate) fn neg_sq_distances(z: &Matrix, table: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), table.rows());
    gemm_acc(
        z.rows(),
        z.cols(),
        table.rows(),
        2.0,
        z.data(),
        z.cols(),
        1,
        table.data(),
        1,
        table.cols(),
        out.data_mut(),
        table.rows(),
    );
    let en: Vec<f64> = table.iter_rows().map(|r| dot(r, r)).collect();
    for i in 0..z.rows() {
        let zn = dot(z.row(i), z.row(i));
        for (x, e) in out.row_mut(i).iter_mut().zip(&en) {
            *x = (*x - zn - e).min(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to every entry of every
    /// parameter, compared with the tape gradient.
    fn check(params: Vec<Matrix>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let shapes: Vec<_> = params.iter().map(|p| p.shape()).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(i, p))
            .collect();
        let loss = f(&mut g, &vars);
        let grads = g.backward(loss, &shapes);
        let h = 1e-6;
        for (pi, p) in params.iter().enumerate() {
            for e in 0..p.data().len() {
                let eval = |delta: f64| {
                    let mut ps = params.clone();
                    ps[pi].data_mut()[e] += delta;
                    let mut g = Graph::inference();
                    let vars: Vec<Var> =
                        ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
                    let l = f(&mut g, &vars);
                    g.scalar(l)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads[pi].data()[e];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "param {pi}[{e}]: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    #[test]
    fn gradients_of_dense_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            rand_matrix(&mut rng, 4, 3),
            rand_matrix(&mut rng, 3, 5),
            rand_matrix(&mut rng, 1, 5),
            rand_matrix(&mut rng, 1, 5),
            rand_matrix(&mut rng, 1, 5),
            rand_matrix(&mut rng, 4, 5),
        ];
        check(params, |g, v| {
            let x = g.matmul(v[0], v[1]);
            let x = g.add_bias(x, v[2]);
            let x = g.silu(x);
            let x = g.layer_norm(x, v[3], v[4]);
            let x = g.row_scale(x, vec![0.5, -1.0, 2.0, 0.3]);
            let x = g.scale(x, 1.7);
            let y = g.concat_cols(x, v[5]);
            let z = g.gather(y, vec![3, 0, 0, 2]);
            let m = g.segment_mean(z, vec![0..1, 1..4]);
            let t = g.input(Matrix::filled(2, 10, 0.1));
            g.sq_dist_mean(m, t)
        });
    }

    #[test]
    fn gradients_of_attention_with_ragged_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            rand_matrix(&mut rng, 5, 4),
            rand_matrix(&mut rng, 4, 4),
            rand_matrix(&mut rng, 4, 4),
            rand_matrix(&mut rng, 5, 4),
        ];
        check(params, |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, vec![0..2, 2..5], vec![0..3, 3..4]);
            g.sq_dist_mean(a, v[3])
        });
    }

    #[test]
    fn gradients_of_likelihood_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![rand_matrix(&mut rng, 3, 2), rand_matrix(&mut rng, 4, 2)];
        check(params, |g, v| {
            let z = g.gather(v[1], vec![1, 2, 3]);
            let zz = g.add(z, v[0]);
            let a = g.dist_softmax_nll(zz, v[1], vec![1, 2, 3], &[true, false, false, false]);
            let l2 = g.cross_entropy(v[1], vec![0, 1, 1, 0]);
            g.weighted_sum(vec![(a, 1.0), (l2, 0.3)])
        });
    }

    #[test]
    fn attention_segments_do_not_leak() {
        let mut g = Graph::inference();
        let q = g.input(Matrix::filled(3, 2, 1.0));
        let k = g.input(Matrix::filled(3, 2, 1.0));
        let v = g.input(Matrix::from_vec(3, 2, vec![1.0, 1.0, 2.0, 2.0, 9.0, 9.0]));
        let out = g.attention(q, k, v, 1, vec![0..2, 2..3], vec![0..2, 2..3]);
        let o = g.value(out);
        assert!((o.get(0, 0) - 1.5).abs() < 1e-12);
        assert!((o.get(2, 0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn excluded_rows_get_zero_probability() {
        let z = Matrix::from_vec(1, 1, vec![0.0]);
        let e = Matrix::from_vec(2, 1, vec![0.0, 0.1]);
        let p = distance_softmax(&z, &e, &[true, false]);
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(0, 1), 1.0);
    }
}
