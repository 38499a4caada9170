//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A forward pass records every operation on a [`Tape`]; node ids index the
//! tape in topological order, so the backward sweep is a single reverse walk
//! that accumulates gradients per node. Leaves may be bound to entries of a
//! [`ParamSet`], in which case [`Tape::accumulate_param_grads`] adds the
//! computed gradients into the parameter set.
//!
//! Every forward result passes a numeric guard: any NaN or infinity aborts
//! with [`Error::NumericGuard`] naming the operation.

use crate::autodiff::params::ParamSet;
use crate::autodiff::tensor::Tensor2;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    Matmul { a: usize, b: usize },
    MatmulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, bias: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    SoftmaxRows { a: usize },
    LayerNormRows { a: usize, gamma: usize, beta: usize, eps: f64 },
    Spmm { m: Rc<CsrMatrix>, h: usize },
    GatherRows { table: usize, idx: Vec<Option<usize>> },
    MeanRows { a: usize, rows: Vec<usize> },
    TemporalEncode { freqs: usize, times: Rc<Vec<f64>> },
    CeLossRows { logits: usize, targets: Vec<usize>, weights: Vec<f64> },
}

struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor2> {
        self.grads[id.0].as_ref()
    }
}

fn shape_err(op: &'static str, details: String) -> Error {
    Error::Shape { op, details }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor2, op: Op) -> Result<NodeId> {
        if !value.is_all_finite() {
            return Err(Error::NumericGuard { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf holding a constant; no gradient is reported for it.
    pub fn constant(&mut self, value: Tensor2) -> Result<NodeId> {
        self.push("constant", value, Op::Leaf { param: None })
    }

    /// Leaf bound to a named parameter; its value is copied onto the tape.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<NodeId> {
        let idx = params
            .idx(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        self.push(
            "param",
            params.by_idx(idx).value.clone(),
            Op::Leaf { param: Some(idx) },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(shape_err("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        let value = self.value(a).matmul(self.value(b));
        self.push("matmul", value, Op::Matmul { a: a.0, b: b.0 })
    }

    /// a * b^T
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != bc {
            return Err(shape_err("matmul_nt", format!("{ar}x{ac} * ({br}x{bc})^T")));
        }
        let value = self.value(a).matmul_nt(self.value(b));
        self.push("matmul_nt", value, Op::MatmulNt { a: a.0, b: b.0 })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let value = self.value(a).add(self.value(b));
        self.push("add", value, Op::Add { a: a.0, b: b.0 })
    }

    /// Adds a 1-row bias to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, ac) = self.value(a).shape();
        let (br, bc) = self.value(bias).shape();
        if br != 1 || bc != ac {
            return Err(shape_err("add_bias", format!("bias {br}x{bc} for {ac} columns")));
        }
        let brow = self.value(bias).row(0).to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&brow) {
                *v += b;
            }
        }
        self.push("add_bias", value, Op::AddBias { a: a.0, bias: bias.0 })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.value(a).scale(c);
        self.push("scale", value, Op::Scale { a: a.0, c })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push("relu", value, Op::Relu { a: a.0 })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("row mismatch: {} vs {}", self.value(*p).rows(), rows),
                ));
            }
            cols += self.value(*p).cols();
        }
        let mut value = Tensor2::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for p in parts {
                let src = self.value(*p).row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push(
            "concat_cols",
            value,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(a).shape();
        if start + len > cols {
            return Err(shape_err(
                "slice_cols",
                format!("slice {start}..{} of {cols} columns", start + len),
            ));
        }
        let mut value = Tensor2::zeros(rows, len);
        for i in 0..rows {
            value
                .row_mut(i)
                .copy_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        self.push("slice_cols", value, Op::SliceCols { a: a.0, start, len })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        self.push("softmax_rows", value, Op::SoftmaxRows { a: a.0 })
    }

    /// Row-wise standardization followed by the per-column affine
    /// `gamma * xhat + beta`.
    pub fn layer_norm_rows(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (_, cols) = self.value(a).shape();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != (1, cols) {
                return Err(shape_err(
                    "layer_norm_rows",
                    format!("{name} must be 1x{cols}, got {:?}", self.value(id).shape()),
                ));
            }
        }
        if eps <= 0.0 {
            return Err(shape_err("layer_norm_rows", format!("eps must be positive, got {eps}")));
        }
        let mut value = self.value(a).clone();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mean) * inv) + b[j];
            }
        }
        self.push(
            "layer_norm_rows",
            value,
            Op::LayerNormRows {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
        )
    }

    /// Sparse-dense product `m * h`. The sparse operator is a constant; the
    /// gradient flows to `h` only, through the nonzero pattern.
    pub fn spmm(&mut self, m: Rc<CsrMatrix>, h: NodeId) -> Result<NodeId> {
        let (hr, hc) = self.value(h).shape();
        if m.n_cols() != hr {
            return Err(shape_err(
                "spmm",
                format!("{}x{} * {hr}x{hc}", m.n_rows(), m.n_cols()),
            ));
        }
        let data = m.mul_dense(self.value(h).data(), hc)?;
        let value = Tensor2::from_vec(m.n_rows(), hc, data)?;
        self.push("spmm", value, Op::Spmm { m, h: h.0 })
    }

    /// Row `i` of the result is row `idx[i]` of `table`, or zeros when
    /// `idx[i]` is `None` (used for tokens that carry no table row).
    pub fn gather_rows(&mut self, table: NodeId, idx: &[Option<usize>]) -> Result<NodeId> {
        let (tr, tc) = self.value(table).shape();
        let mut value = Tensor2::zeros(idx.len(), tc);
        for (i, j) in idx.iter().enumerate() {
            if let Some(j) = j {
                if *j >= tr {
                    return Err(shape_err("gather_rows", format!("row {j} of {tr}")));
                }
                value.row_mut(i).copy_from_slice(self.value(table).row(*j));
            }
        }
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// Mean of the selected rows of `a`, as a single row.
    pub fn mean_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        if rows.is_empty() {
            return Err(shape_err("mean_rows", "no rows selected".into()));
        }
        let mut value = Tensor2::zeros(1, ac);
        for &r in rows {
            if r >= ar {
                return Err(shape_err("mean_rows", format!("row {r} of {ar}")));
            }
            for (o, v) in value.row_mut(0).iter_mut().zip(self.value(a).row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for v in value.data_mut() {
            *v *= inv;
        }
        self.push(
            "mean_rows",
            value,
            Op::MeanRows {
                a: a.0,
                rows: rows.to_vec(),
            },
        )
    }

    /// Sinusoidal timestamp encoding. `freqs` is a 1 x (d/2) row of paired
    /// frequencies; output row `i` interleaves `sin(w_k t_i), cos(w_k t_i)`,
    /// so the dot product of two rows depends on the time difference only.
    pub fn temporal_encode(&mut self, freqs: NodeId, times: Rc<Vec<f64>>) -> Result<NodeId> {
        let (fr, half) = self.value(freqs).shape();
        if fr != 1 || half == 0 {
            return Err(shape_err("temporal_encode", format!("freqs must be 1xK, got {fr}x{half}")));
        }
        let mut value = Tensor2::zeros(times.len(), 2 * half);
        let w = self.value(freqs).row(0).to_vec();
        for (i, &t) in times.iter().enumerate() {
            let row = value.row_mut(i);
            for (k, &wk) in w.iter().enumerate() {
                let (s, c) = (wk * t).sin_cos();
                row[2 * k] = s;
                row[2 * k + 1] = c;
            }
        }
        self.push(
            "temporal_encode",
            value,
            Op::TemporalEncode { freqs: freqs.0, times },
        )
    }

    /// Weighted mean of per-row cross-entropies: rows of `logits` are scored
    /// against `targets` and the weighted negative log-softmax values are
    /// averaged over the rows.
    pub fn ce_loss_rows(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId> {
        let (rows, cols) = self.value(logits).shape();
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err(
                "ce_loss_rows",
                format!("{rows} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if rows == 0 {
            return Err(shape_err("ce_loss_rows", "no rows".into()));
        }
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= cols {
                return Err(shape_err("ce_loss_rows", format!("target {t} of {cols} classes")));
            }
            let row = self.value(logits).row(i);
            total += w * (log_sum_exp(row) - row[t]);
        }
        let value = Tensor2::from_vec(1, 1, vec![total / rows as f64])?;
        self.push(
            "ce_loss_rows",
            value,
            Op::CeLossRows {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    /// Backward sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.value(loss).scalar()?;
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds this sweep's parameter gradients into `params.grad`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, params: &mut ParamSet) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(idx) } = node.op {
                if let Some(g) = &grads.grads[i] {
                    params.by_idx_mut(idx).grad.add_assign(g);
                }
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor2, grads: &mut Vec<Option<Tensor2>>) {
        let add_to = |grads: &mut Vec<Option<Tensor2>>, target: usize, delta: Tensor2| {
            match &mut grads[target] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let da = g.matmul_nt(&self.nodes[*b].value);
                let db = self.nodes[*a].value.matmul_tn(g);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::MatmulNt { a, b } => {
                // C = A B^T: dA = G B, dB = G^T A
                let da = g.matmul(&self.nodes[*b].value);
                let db = g.matmul_tn(&self.nodes[*a].value);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add { a, b } => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddBias { a, bias } => {
                add_to(grads, *a, g.clone());
                add_to(grads, *bias, g.col_sums());
            }
            Op::Scale { a, c } => {
                add_to(grads, *a, g.scale(*c));
            }
            Op::Relu { a } => {
                let mut da = g.clone();
                for (d, v) in da.data_mut().iter_mut().zip(self.nodes[*a].value.data()) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for p in parts {
                    let cols = self.nodes[*p].value.cols();
                    let mut dp = Tensor2::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    add_to(grads, *p, dp);
                }
            }
            Op::SliceCols { a, start, len } => {
                let (rows, cols) = self.nodes[*a].value.shape();
                let mut da = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    da.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                add_to(grads, *a, da);
            }
            Op::SoftmaxRows { a } => {
                let s = &self.nodes[i].value;
                let mut da = Tensor2::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let srow = s.row(r);
                    let grow = g.row(r);
                    let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                    for (d, (sv, gv)) in da.row_mut(r).iter_mut().zip(srow.iter().zip(grow)) {
                        *d = sv * (gv - dot);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::LayerNormRows { a, gamma, beta, eps } => {
                let x = &self.nodes[*a].value;
                let gam = self.nodes[*gamma].value.row(0);
                let n = x.cols() as f64;
                let mut da = Tensor2::zeros(x.rows(), x.cols());
                let mut dgamma = Tensor2::zeros(1, x.cols());
                let mut dbeta = Tensor2::zeros(1, x.cols());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let grow = g.row(r);
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(gv, gm)| gv * gm).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
                    for (j, d) in da.row_mut(r).iter_mut().enumerate() {
                        *d = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                    for j in 0..x.cols() {
                        dgamma.row_mut(0)[j] += grow[j] * xhat[j];
                        dbeta.row_mut(0)[j] += grow[j];
                    }
                }
                add_to(grads, *a, da);
                add_to(grads, *gamma, dgamma);
                add_to(grads, *beta, dbeta);
            }
            Op::Spmm { m, h } => {
                let cols = g.cols();
                let data = m
                    .transpose()
                    .mul_dense(g.data(), cols)
                    .expect("transpose shape matches");
                let dh = Tensor2::from_vec(m.n_cols(), cols, data).expect("consistent shape");
                add_to(grads, *h, dh);
            }
            Op::GatherRows { table, idx } => {
                let (tr, tc) = self.nodes[*table].value.shape();
                let mut dt = Tensor2::zeros(tr, tc);
                for (r, j) in idx.iter().enumerate() {
                    if let Some(j) = j {
                        for (d, v) in dt.row_mut(*j).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                }
                add_to(grads, *table, dt);
            }
            Op::MeanRows { a, rows } => {
                let (ar, ac) = self.nodes[*a].value.shape();
                let mut da = Tensor2::zeros(ar, ac);
                let inv = 1.0 / rows.len() as f64;
                for &r in rows {
                    for (d, v) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d += v * inv;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::TemporalEncode { freqs, times } => {
                let w = self.nodes[*freqs].value.row(0);
                let mut df = Tensor2::zeros(1, w.len());
                for (r, &t) in times.iter().enumerate() {
                    let grow = g.row(r);
                    for (k, &wk) in w.iter().enumerate() {
                        let (s, c) = (wk * t).sin_cos();
                        df.row_mut(0)[k] += t * (grow[2 * k] * c - grow[2 * k + 1] * s);
                    }
                }
                add_to(grads, *freqs, df);
            }
            Op::CeLossRows {
                logits,
                targets,
                weights,
            } => {
                let x = &self.nodes[*logits].value;
                let scale = g.get(0, 0) / x.rows() as f64;
                let mut dl = Tensor2::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let mut probs = x.row(r).to_vec();
                    softmax_in_place(&mut probs);
                    let w = weights[r] * scale;
                    for (j, d) in dl.row_mut(r).iter_mut().enumerate() {
                        let indicator = if j == targets[r] { 1.0 } else { 0.0 };
                        *d = w * (probs[j] - indicator);
                    }
                }
                add_to(grads, *logits, dl);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}
