//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Calling [`Graph::backward`] on a `1×1` node walks the record in reverse and
//! accumulates gradients into every tracked node. Leaves registered with
//! [`Graph::param`] borrow their value, so building a graph per minibatch does
//! not copy model weights.
//!
//! Ops are deliberately coarse (fused attention, fused losses): each one owns a
//! hand-derived backward rule, and every rule is covered by the
//! finite-difference suite in `gradcheck`.

use std::borrow::Cow;

use super::functional::{log_softmax_unchecked, logsumexp, softmax_unchecked};
use super::tensor::{gemm, raw_gemm};
use super::{DiffError, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Tensor,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Tensor>,
    },
    MeanRows(Var),
    StackRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
    KlToTarget {
        logits: Var,
        target_log: Tensor,
        weights: Vec<f64>,
        log_probs: Tensor,
        row_kl: Vec<f64>,
    },
    InfoNce {
        x: Var,
        g: Var,
        tau: f64,
        probs: Tensor,
    },
    Entropy {
        logits: Var,
        log_probs: Tensor,
        row_entropy: Vec<f64>,
    },
    SumSquares(Var),
    WeightedSum(Vec<(f64, Var)>),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    grad: Option<Tensor>,
    tracked: bool,
    op: Op,
}

/// Single-threaded computation record. Distinct graphs are independent.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf borrowing an externally owned tensor.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(value), true, Op::Leaf)
    }

    /// Tracked leaf owning its value.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), true, Op::Leaf)
    }

    /// Untracked leaf; no gradient is ever accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, present after [`Graph::backward`] for tracked nodes
    /// reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Cow<'p, Tensor>, tracked: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            tracked,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.push(Cow::Owned(value), tracked, op)
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::Shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push_op(out, &[a, b], Op::Add(a, b)))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let [m, n] = self.shape(a);
        if self.shape(row) != [1, n] {
            return Err(DiffError::Shape(format!(
                "add_row {:?} + {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for r in 0..m {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push_op(out, &[a, row], Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(factor);
        self.push_op(out, &[a], Op::Scale(a, factor))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        self.push_op(out, &[a], Op::Gelu(a))
    }

    /// Row-wise layer normalisation with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, DiffError> {
        let [m, n] = self.shape(x);
        if self.shape(gain) != [1, n] || self.shape(bias) != [1, n] {
            return Err(DiffError::Shape("layer_norm gain/bias must be 1×n".into()));
        }
        let xv = self.value(x);
        let mut normed = Tensor::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = normed.clone();
        for r in 0..m {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        Ok(self.push_op(
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    /// Picks rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(table);
        let n = t.cols();
        let mut out = Tensor::zeros(ids.len(), n);
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(DiffError::Shape(format!(
                    "row {id} out of range for table with {} rows",
                    t.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        Ok(self.push_op(
            out,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`, `v`.
    /// Heads are contiguous column blocks. With `causal`, query `i` sees keys `≤ i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
    ) -> Result<Var, DiffError> {
        let [lq, d] = self.shape(q);
        let [lk, dk] = self.shape(k);
        if dk != d || self.shape(v) != [lk, d] || heads == 0 || d % heads != 0 {
            return Err(DiffError::Shape(format!(
                "attention q {:?} k {:?} v {:?} heads {heads}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if lk == 0 {
            return Err(DiffError::Shape("attention over zero keys".into()));
        }
        if causal && lk != lq {
            return Err(DiffError::Shape("causal attention needs lq == lk".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Tensor::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut s = Tensor::zeros(lq, lk);
            raw_gemm(
                lq,
                dh,
                lk,
                scale,
                &qv.data()[off..],
                d as isize,
                1,
                &kv.data()[off..],
                1,
                d as isize,
                0.0,
                s.data_mut(),
                lk as isize,
                1,
            );
            for i in 0..lq {
                let row = s.row_mut(i);
                let visible = if causal { i + 1 } else { lk };
                let p = softmax_unchecked(&row[..visible]);
                row[..visible].copy_from_slice(&p);
                row[visible..].iter_mut().for_each(|x| *x = 0.0);
            }
            raw_gemm(
                lq,
                lk,
                dh,
                1.0,
                s.data(),
                lk as isize,
                1,
                &vv.data()[off..],
                d as isize,
                1,
                0.0,
                &mut out.data_mut()[off..],
                d as isize,
                1,
            );
            probs.push(s);
        }
        Ok(self.push_op(
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// `1×n` mean over the rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        let pooled = super::functional::mean_pool(t)?;
        let out = Tensor::row_vector(pooled);
        Ok(self.push_op(out, &[a], Op::MeanRows(a)))
    }

    /// Stacks `1×n` rows into a `B×n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var, DiffError> {
        let n = rows
            .first()
            .map(|&r| self.shape(r)[1])
            .ok_or_else(|| DiffError::Shape("stack of zero rows".into()))?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if self.shape(r) != [1, n] {
                return Err(DiffError::Shape("stack_rows needs 1×n rows".into()));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let out = Tensor::from_vec(rows.len(), n, data)?;
        Ok(self.push_op(out, rows, Op::StackRows(rows.to_vec())))
    }

    /// `Σ_t w_t · (−log softmax(logits_t)[targets_t])`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, DiffError> {
        let z = self.value(logits);
        let [m, n] = z.shape();
        if targets.len() != m || weights.len() != m {
            return Err(DiffError::Shape(format!(
                "cross_entropy over {m} rows with {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = Tensor::zeros(m, n);
        let mut total = 0.0;
        for r in 0..m {
            let row = z.row(r);
            let t = targets[r];
            if t >= n {
                return Err(DiffError::Shape(format!("target {t} out of range {n}")));
            }
            let lse = logsumexp(row);
            if weights[r] != 0.0 {
                total += weights[r] * (lse - row[t]);
            }
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        Ok(self.push_op(
            Tensor::scalar(total),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ_t w_t · KL(softmax(logits_t) ‖ exp(target_log_t))`. The target is a
    /// constant: no gradient flows into whatever produced it.
    pub fn kl_to_target(
        &mut self,
        logits: Var,
        target_log: Tensor,
        weights: &[f64],
    ) -> Result<Var, DiffError> {
        let z = self.value(logits);
        if z.shape() != target_log.shape() || weights.len() != z.rows() {
            return Err(DiffError::Shape("kl_to_target shape mismatch".into()));
        }
        let mut log_probs = Tensor::zeros(z.rows(), z.cols());
        let mut row_kl = Vec::with_capacity(z.rows());
        let mut total = 0.0;
        for r in 0..z.rows() {
            let lp = log_softmax_unchecked(z.row(r));
            let kl: f64 = lp
                .iter()
                .zip(target_log.row(r))
                .map(|(a, b)| {
                    let p = a.exp();
                    if p > 0.0 {
                        p * (a - b)
                    } else {
                        0.0
                    }
                })
                .sum();
            total += weights[r] * kl;
            row_kl.push(kl);
            log_probs.row_mut(r).copy_from_slice(&lp);
        }
        Ok(self.push_op(
            Tensor::scalar(total),
            &[logits],
            Op::KlToTarget {
                logits,
                target_log,
                weights: weights.to_vec(),
                log_probs,
                row_kl,
            },
        ))
    }

    /// In-batch contrastive loss: mean over `i` of `−log softmax_j(⟨x_i, g_j⟩/τ)[i]`.
    pub fn info_nce(&mut self, x: Var, g: Var, tau: f64) -> Result<Var, DiffError> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(DiffError::InvalidArgument(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let (xv, gv) = (self.value(x), self.value(g));
        if xv.shape() != gv.shape() || xv.rows() == 0 {
            return Err(DiffError::Shape("info_nce batch mismatch".into()));
        }
        let b = xv.rows();
        let mut sims = Tensor::zeros(b, b);
        gemm(xv, false, gv, true, &mut sims, 1.0 / tau, 0.0);
        let mut probs = Tensor::zeros(b, b);
        let mut total = 0.0;
        for i in 0..b {
            let row = sims.row(i);
            let lse = logsumexp(row);
            total += lse - row[i];
            for (p, s) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (s - lse).exp();
            }
        }
        Ok(self.push_op(
            Tensor::scalar(total / b as f64),
            &[x, g],
            Op::InfoNce { x, g, tau, probs },
        ))
    }

    /// Mean over rows of the entropy of `softmax(logits_r)`.
    pub fn softmax_entropy(&mut self, logits: Var) -> Var {
        let z = self.value(logits);
        let mut log_probs = Tensor::zeros(z.rows(), z.cols());
        let mut row_entropy = Vec::with_capacity(z.rows());
        for r in 0..z.rows() {
            let lp = log_softmax_unchecked(z.row(r));
            let h: f64 = -lp
                .iter()
                .map(|a| {
                    let p = a.exp();
                    if p > 0.0 {
                        p * a
                    } else {
                        0.0
                    }
                })
                .sum::<f64>();
            row_entropy.push(h);
            log_probs.row_mut(r).copy_from_slice(&lp);
        }
        let mean = row_entropy.iter().sum::<f64>() / z.rows().max(1) as f64;
        self.push_op(
            Tensor::scalar(mean),
            &[logits],
            Op::Entropy {
                logits,
                log_probs,
                row_entropy,
            },
        )
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.push_op(Tensor::scalar(s), &[a], Op::SumSquares(a))
    }

    /// `Σ c_i · s_i` over scalar nodes, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var, DiffError> {
        let mut total = 0.0;
        for &(c, v) in terms {
            if self.shape(v) != [1, 1] {
                return Err(DiffError::Shape("weighted_sum needs scalar terms".into()));
            }
            total += c * self.value(v).item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.1).collect();
        Ok(self.push_op(
            Tensor::scalar(total),
            &inputs,
            Op::WeightedSum(terms.to_vec()),
        ))
    }

    /// Propagates `d loss / d node` into every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.shape(loss) != [1, 1] {
            return Err(DiffError::NonScalarLoss(self.shape(loss)));
        }
        if !self.tracked(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            let deltas = self.local_grads(idx, &upstream);
            self.nodes[idx].grad = Some(upstream);
            for (v, g) in deltas {
                if !self.tracked(v) {
                    continue;
                }
                match &mut self.nodes[v.0].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, up: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut out = Vec::with_capacity(2);
                if self.tracked(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(up, false, bv, true, &mut ga, 1.0, 0.0);
                    out.push((*a, ga));
                }
                if self.tracked(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, up, false, &mut gb, 1.0, 0.0);
                    out.push((*b, gb));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::AddRow(a, row) => {
                let mut gr = Tensor::zeros(1, up.cols());
                for r in 0..up.rows() {
                    for (g, u) in gr.data_mut().iter_mut().zip(up.row(r)) {
                        *g += u;
                    }
                }
                vec![(*a, up.clone()), (*row, gr)]
            }
            Op::Scale(a, f) => {
                let mut g = up.clone();
                g.scale(*f);
                vec![(*a, g)]
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut g = up.clone();
                for (gi, xi) in g.data_mut().iter_mut().zip(x.data()) {
                    *gi *= gelu_grad(*xi);
                }
                vec![(*a, g)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let [m, n] = normed.shape();
                let g = self.value(*gain).data();
                let mut gx = Tensor::zeros(m, n);
                let mut gg = Tensor::zeros(1, n);
                let mut gb = Tensor::zeros(1, n);
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let xh = normed.row(r);
                    let dy = up.row(r);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..n {
                        dxhat[c] = dy[c] * g[c];
                        sum_d += dxhat[c];
                        sum_dx += dxhat[c] * xh[c];
                        gg.data_mut()[c] += dy[c] * xh[c];
                        gb.data_mut()[c] += dy[c];
                    }
                    let inv = inv_std[r];
                    let nf = n as f64;
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv / nf * (nf * dxhat[c] - sum_d - xh[c] * sum_dx);
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gb)]
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut g = Tensor::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, u) in g.row_mut(id).iter_mut().zip(up.row(r)) {
                        *o += u;
                    }
                }
                vec![(*table, g)]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_grads(*q, *k, *v, *heads, probs, up),
            Op::MeanRows(a) => {
                let [m, n] = self.shape(*a);
                let mut g = Tensor::zeros(m, n);
                let inv = 1.0 / m as f64;
                for r in 0..m {
                    for (o, u) in g.row_mut(r).iter_mut().zip(up.data()) {
                        *o = u * inv;
                    }
                }
                vec![(*a, g)]
            }
            Op::StackRows(rows) => rows
                .iter()
                .enumerate()
                .map(|(i, &r)| (r, Tensor::row_vector(up.row(i).to_vec())))
                .collect(),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = up.item();
                let mut g = probs.clone();
                for r in 0..g.rows() {
                    let w = weights[r] * s;
                    let row = g.row_mut(r);
                    row[targets[r]] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= w);
                }
                vec![(*logits, g)]
            }
            Op::KlToTarget {
                logits,
                target_log,
                weights,
                log_probs,
                row_kl,
            } => {
                let s = up.item();
                let mut g = Tensor::zeros(log_probs.rows(), log_probs.cols());
                for r in 0..g.rows() {
                    let w = weights[r] * s;
                    if w == 0.0 {
                        continue;
                    }
                    let lp = log_probs.row(r);
                    let tl = target_log.row(r);
                    for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                        let p = lp[c].exp();
                        if p > 0.0 {
                            *o = w * p * (lp[c] - tl[c] - row_kl[r]);
                        }
                    }
                }
                vec![(*logits, g)]
            }
            Op::InfoNce { x, g, tau, probs } => {
                let b = probs.rows();
                let mut ds = probs.clone();
                for i in 0..b {
                    ds.set(i, i, ds.get(i, i) - 1.0);
                }
                ds.scale(up.item() / (b as f64 * tau));
                let (xv, gv) = (self.value(*x), self.value(*g));
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                gemm(&ds, false, gv, false, &mut gx, 1.0, 0.0);
                let mut gg = Tensor::zeros(gv.rows(), gv.cols());
                gemm(&ds, true, xv, false, &mut gg, 1.0, 0.0);
                vec![(*x, gx), (*g, gg)]
            }
            Op::Entropy {
                logits,
                log_probs,
                row_entropy,
            } => {
                let m = log_probs.rows();
                let s = up.item() / m as f64;
                let mut g = Tensor::zeros(m, log_probs.cols());
                for r in 0..m {
                    let lp = log_probs.row(r);
                    for (c, o) in g.row_mut(r).iter_mut().enumerate() {
                        let p = lp[c].exp();
                        if p > 0.0 {
                            *o = -s * p * (lp[c] + row_entropy[r]);
                        }
                    }
                }
                vec![(*logits, g)]
            }
            Op::SumSquares(a) => {
                let mut g = self.value(*a).clone();
                g.scale(2.0 * up.item());
                vec![(*a, g)]
            }
            Op::WeightedSum(terms) => terms
                .iter()
                .map(|&(c, v)| (v, Tensor::scalar(c * up.item())))
                .collect(),
        }
    }

    fn attention_grads(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[Tensor],
        up: &Tensor,
    ) -> Vec<(Var, Tensor)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [lq, d] = qv.shape();
        let lk = kv.rows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(lq, d);
        let mut gk = Tensor::zeros(lk, d);
        let mut gv = Tensor::zeros(lk, d);
        let mut dp = Tensor::zeros(lq, lk);
        for (h, p) in probs.iter().enumerate() {
            let off = h * dh;
            // dV_h = Pᵀ dO_h
            raw_gemm(
                lk,
                lq,
                dh,
                1.0,
                p.data(),
                1,
                lk as isize,
                &up.data()[off..],
                d as isize,
                1,
                0.0,
                &mut gv.data_mut()[off..],
                d as isize,
                1,
            );
            // dP = dO_h V_hᵀ
            raw_gemm(
                lq,
                dh,
                lk,
                1.0,
                &up.data()[off..],
                d as isize,
                1,
                &vv.data()[off..],
                1,
                d as isize,
                0.0,
                dp.data_mut(),
                lk as isize,
                1,
            );
            // dS = P ∘ (dP − rowsum(dP ∘ P)), folded with the 1/sqrt(dh) scale.
            for i in 0..lq {
                let pr = p.row(i);
                let row = dp.row_mut(i);
                let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, pi) in row.iter_mut().zip(pr) {
                    *x = pi * (*x - dot) * scale;
                }
            }
            raw_gemm(
                lq,
                lk,
                dh,
                1.0,
                dp.data(),
                lk as isize,
                1,
                &kv.data()[off..],
                d as isize,
                1,
                0.0,
                &mut gq.data_mut()[off..],
                d as isize,
                1,
            );
            raw_gemm(
                lk,
                lq,
                dh,
                1.0,
                dp.data(),
                1,
                lk as isize,
                &qv.data()[off..],
                d as isize,
                1,
                0.0,
                &mut gk.data_mut()[off..],
                d as isize,
                1,
            );
        }
        vec![(q, gq), (k, gk), (v, gv)]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
