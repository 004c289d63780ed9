//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Forward calls record one node per operation; `backward` replays the nodes
//! in exact reverse order, accumulating vector-Jacobian products. Parameters
//! are bound once per tape and read their current value from the registry, so
//! a fresh tape per batch is the whole lifecycle. A parameter that is not on
//! any path to the loss keeps an exactly-zero gradient.

use std::collections::HashMap;

use crate::error::{CromeError, Result};
use crate::numerics::matrix::{self, Matrix};
use crate::params::{ParamId, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub usize);

/// Forward/eval switch for batch normalization and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one batch-norm site.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BnStats {
    pub mean: Matrix,
    pub var: Matrix,
}

impl BnStats {
    pub fn new(width: usize) -> Self {
        BnStats {
            mean: Matrix::zeros(1, width),
            var: Matrix::from_vec(1, width, vec![1.0; width]),
        }
    }
}

/// Exponent clamp used by the loss kernels.
const EXP_CLAMP: f64 = 500.0;

#[inline]
fn clamped_exp(z: f64) -> (f64, bool) {
    if z > EXP_CLAMP {
        (EXP_CLAMP.exp(), true)
    } else if z < -EXP_CLAMP {
        ((-EXP_CLAMP).exp(), true)
    } else {
        (z.exp(), false)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: ValueId,
        b: ValueId,
    },
    Transpose {
        a: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        a: ValueId,
        c: f64,
    },
    Hadamard {
        a: ValueId,
        b: ValueId,
    },
    AddRowBroadcast {
        a: ValueId,
        bias: ValueId,
    },
    Relu {
        a: ValueId,
    },
    SoftmaxRows {
        a: ValueId,
    },
    BatchNormTrain {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        x_hat: Matrix,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        x_hat: Matrix,
        scale: Vec<f64>,
    },
    DropoutMask {
        x: ValueId,
        mask: Matrix,
    },
    ConcatRows {
        inputs: Vec<ValueId>,
        heights: Vec<usize>,
    },
    ConcatCols {
        inputs: Vec<ValueId>,
        widths: Vec<usize>,
    },
    SliceRows {
        a: ValueId,
        start: usize,
        len: usize,
    },
    SliceCols {
        a: ValueId,
        start: usize,
        len: usize,
    },
    MeanRows {
        a: ValueId,
    },
    FlattenRow {
        a: ValueId,
    },
    CosineSim {
        a: ValueId,
        b: ValueId,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
    },
    ProxyAnchor {
        sims: ValueId,
        labels: Vec<usize>,
        proxy_classes: Vec<usize>,
        alpha: f64,
        delta: f64,
        pos_sum: Vec<f64>,
        neg_sum: Vec<f64>,
        n_pos_proxies: usize,
    },
    CrossEntropyMean {
        probs: ValueId,
        labels: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, ValueId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Matrix) -> ValueId {
        self.push(Op::Leaf, value)
    }

    /// Bind a trainable parameter. Binding the same parameter twice returns
    /// the same node, so gradient contributions from every use accumulate.
    pub fn param(&mut self, params: &Params, id: ParamId) -> ValueId {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(Op::Leaf, params.get(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: ValueId) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn shapes(&self, a: ValueId, b: ValueId) -> ((usize, usize), (usize, usize)) {
        (self.value(a).shape(), self.value(b).shape())
    }

    // ── recorded operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul { a, b }, out))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).transpose();
        self.push(Op::Transpose { a }, out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = self.shapes(a, b);
        if sa != sb {
            return Err(CromeError::shape("add", sa, sb));
        }
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0);
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let out = self.value(a).map(|v| c * v);
        self.push(Op::Scale { a, c }, out)
    }

    pub fn hadamard(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = self.shapes(a, b);
        if sa != sb {
            return Err(CromeError::shape("hadamard", sa, sb));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Matrix::from_vec(sa.0, sa.1, data);
        Ok(self.push(Op::Hadamard { a, b }, out))
    }

    /// out[i][j] = a[i][j] + bias[0][j], bias is 1 x cols.
    pub fn add_row_broadcast(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (sa, sb) = self.shapes(a, bias);
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(CromeError::shape("add_row_broadcast", sa, sb));
        }
        let va = self.value(a);
        let vb = self.value(bias);
        let mut out = va.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += vb.data[c];
            }
        }
        Ok(self.push(Op::AddRowBroadcast { a, bias }, out))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let out = matrix::relu(self.value(a));
        self.push(Op::Relu { a }, out)
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> ValueId {
        let out = matrix::softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows { a }, out)
    }

    /// Batch normalization over the batch (row) dimension.
    ///
    /// Train mode standardizes with batch statistics (variance floor 1e-5)
    /// and updates `running` with momentum 0.9. Eval mode applies the running
    /// statistics verbatim.
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running: &mut BnStats,
        mode: Mode,
    ) -> Result<ValueId> {
        const EPS: f64 = 1e-5;
        const MOMENTUM: f64 = 0.9;
        let (n, d) = self.value(x).shape();
        let (sg, sb) = self.shapes(gamma, beta);
        if sg != (1, d) || sb != (1, d) {
            return Err(CromeError::shape("batch_norm", (n, d), sg));
        }
        match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(CromeError::DegenerateBatch(format!(
                        "batch_norm in train mode needs a batch of at least 2 rows, got {n}"
                    )));
                }
                let vx = self.value(x);
                let mean = vx.col_mean();
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        let dv = vx.get(r, c) - mean.data[c];
                        var[c] += dv * dv;
                    }
                }
                for v in var.iter_mut() {
                    *v /= n as f64;
                }
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + EPS).sqrt()).collect();
                let mut x_hat = Matrix::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        x_hat.set(r, c, (vx.get(r, c) - mean.data[c]) * inv_std[c]);
                    }
                }
                let g = self.value(gamma).clone();
                let b = self.value(beta).clone();
                let mut out = Matrix::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        out.set(r, c, g.data[c] * x_hat.get(r, c) + b.data[c]);
                    }
                }
                for c in 0..d {
                    running.mean.data[c] = MOMENTUM * running.mean.data[c] + (1.0 - MOMENTUM) * mean.data[c];
                    running.var.data[c] = MOMENTUM * running.var.data[c] + (1.0 - MOMENTUM) * var[c];
                }
                Ok(self.push(
                    Op::BatchNormTrain {
                        x,
                        gamma,
                        beta,
                        x_hat,
                        inv_std,
                    },
                    out,
                ))
            }
            Mode::Eval => {
                let scale: Vec<f64> = running
                    .var
                    .data
                    .iter()
                    .map(|&v| 1.0 / (v + EPS).sqrt())
                    .collect();
                let vx = self.value(x);
                let mut x_hat = Matrix::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        x_hat.set(r, c, (vx.get(r, c) - running.mean.data[c]) * scale[c]);
                    }
                }
                let g = self.value(gamma).clone();
                let b = self.value(beta).clone();
                let mut out = Matrix::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        out.set(r, c, g.data[c] * x_hat.get(r, c) + b.data[c]);
                    }
                }
                Ok(self.push(
                    Op::BatchNormEval {
                        x,
                        gamma,
                        beta,
                        x_hat,
                        scale,
                    },
                    out,
                ))
            }
        }
    }

    /// Inverted dropout. Train mode zeroes entries with probability `rate`
    /// and scales survivors by 1/(1-rate); eval mode is the identity.
    pub fn dropout(
        &mut self,
        x: ValueId,
        rate: f64,
        mode: Mode,
        rng: &mut crate::numerics::rng::RngStream,
    ) -> Result<ValueId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CromeError::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let (n, d) = self.value(x).shape();
        let keep_scale = 1.0 / (1.0 - rate);
        let mask = Matrix::from_vec(
            n,
            d,
            (0..n * d)
                .map(|_| if rng.next_f64() >= rate { keep_scale } else { 0.0 })
                .collect(),
        );
        let vx = self.value(x);
        let data = vx
            .data
            .iter()
            .zip(mask.data.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Matrix::from_vec(n, d, data);
        Ok(self.push(Op::DropoutMask { x, mask }, out))
    }

    pub fn concat_rows(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        assert!(!inputs.is_empty());
        let cols = self.value(inputs[0]).cols;
        let mut heights = Vec::with_capacity(inputs.len());
        let mut data = Vec::new();
        for &v in inputs {
            let m = self.value(v);
            if m.cols != cols {
                return Err(CromeError::shape("concat_rows", (m.rows, cols), m.shape()));
            }
            heights.push(m.rows);
            data.extend_from_slice(&m.data);
        }
        let rows = heights.iter().sum();
        let out = Matrix::from_vec(rows, cols, data);
        Ok(self.push(
            Op::ConcatRows {
                inputs: inputs.to_vec(),
                heights,
            },
            out,
        ))
    }

    pub fn concat_cols(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        assert!(!inputs.is_empty());
        let rows = self.value(inputs[0]).rows;
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let m = self.value(v);
            if m.rows != rows {
                return Err(CromeError::shape("concat_cols", (rows, m.cols), m.shape()));
            }
            widths.push(m.cols);
        }
        let cols: usize = widths.iter().sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &v in inputs {
            let m = self.value(v).clone();
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + m.cols]
                    .copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        Ok(self.push(
            Op::ConcatCols {
                inputs: inputs.to_vec(),
                widths,
            },
            out,
        ))
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, len: usize) -> ValueId {
        let m = self.value(a);
        assert!(start + len <= m.rows, "slice_rows out of range");
        let out = Matrix::from_vec(
            len,
            m.cols,
            m.data[start * m.cols..(start + len) * m.cols].to_vec(),
        );
        self.push(Op::SliceRows { a, start, len }, out)
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> ValueId {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows, len);
        for r in 0..m.rows {
            out.row_mut(r)
                .copy_from_slice(&m.data[r * m.cols + start..r * m.cols + start + len]);
        }
        self.push(Op::SliceCols { a, start, len }, out)
    }

    /// Mean over rows: k x d -> 1 x d.
    pub fn mean_rows(&mut self, a: ValueId) -> ValueId {
        let out = self.value(a).col_mean();
        self.push(Op::MeanRows { a }, out)
    }

    /// Row-major flatten: r x c -> 1 x (r*c).
    pub fn flatten_row(&mut self, a: ValueId) -> ValueId {
        let m = self.value(a);
        let out = Matrix::from_vec(1, m.rows * m.cols, m.data.clone());
        self.push(Op::FlattenRow { a }, out)
    }

    /// Pairwise cosine similarity between rows of `a` (n x d) and rows of
    /// `b` (m x d), yielding n x m. Errors on any zero-norm row.
    pub fn cosine_sim(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = self.shapes(a, b);
        if sa.1 != sb.1 {
            return Err(CromeError::shape("cosine_sim", sa, sb));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let row_norms = |m: &Matrix| -> Result<Vec<f64>> {
            (0..m.rows)
                .map(|r| {
                    let n2: f64 = m.row(r).iter().map(|v| v * v).sum();
                    if n2 == 0.0 {
                        Err(CromeError::DegenerateVector(format!(
                            "zero-norm row {r} in cosine_sim"
                        )))
                    } else {
                        Ok(n2.sqrt())
                    }
                })
                .collect()
        };
        let norms_a = row_norms(va)?;
        let norms_b = row_norms(vb)?;
        let mut out = Matrix::zeros(sa.0, sb.0);
        for i in 0..sa.0 {
            for j in 0..sb.0 {
                let dot: f64 = va.row(i).iter().zip(vb.row(j)).map(|(&x, &y)| x * y).sum();
                out.set(i, j, dot / (norms_a[i] * norms_b[j]));
            }
        }
        Ok(self.push(
            Op::CosineSim {
                a,
                b,
                norms_a,
                norms_b,
            },
            out,
        ))
    }

    /// Proxy anchor loss from a precomputed similarity matrix.
    ///
    /// `sims` is n x |P| (data rows vs proxy rows). The positive term runs
    /// over proxies with at least one same-class row in the batch; empty
    /// inner sums contribute log1p(0) = 0. Exponents are clamped at +-500.
    pub fn proxy_anchor(
        &mut self,
        sims: ValueId,
        labels: &[usize],
        proxy_classes: &[usize],
        alpha: f64,
        delta: f64,
    ) -> Result<ValueId> {
        let (n, p) = self.value(sims).shape();
        if p == 0 || proxy_classes.len() != p {
            return Err(CromeError::Config(format!(
                "proxy_anchor needs at least one proxy; got {} proxies for a {}-wide sims matrix",
                proxy_classes.len(),
                p
            )));
        }
        if labels.len() != n {
            return Err(CromeError::Config(format!(
                "proxy_anchor got {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        let s = self.value(sims).clone();
        let mut pos_sum = vec![0.0; p];
        let mut neg_sum = vec![0.0; p];
        let mut has_pos = vec![false; p];
        for j in 0..p {
            for i in 0..n {
                let sij = s.get(i, j);
                if labels[i] == proxy_classes[j] {
                    has_pos[j] = true;
                    pos_sum[j] += clamped_exp(-alpha * (sij - delta)).0;
                } else {
                    neg_sum[j] += clamped_exp(alpha * (sij + delta)).0;
                }
            }
        }
        let n_pos_proxies = has_pos.iter().filter(|&&h| h).count();
        let mut loss = 0.0;
        if n_pos_proxies > 0 {
            let mut acc = 0.0;
            for j in 0..p {
                if has_pos[j] {
                    acc += pos_sum[j].ln_1p();
                }
            }
            loss += acc / n_pos_proxies as f64;
        }
        let mut acc = 0.0;
        for j in 0..p {
            acc += neg_sum[j].ln_1p();
        }
        loss += acc / p as f64;
        Ok(self.push(
            Op::ProxyAnchor {
                sims,
                labels: labels.to_vec(),
                proxy_classes: proxy_classes.to_vec(),
                alpha,
                delta,
                pos_sum,
                neg_sum,
                n_pos_proxies,
            },
            Matrix::scalar(loss),
        ))
    }

    /// Mean cross-entropy over a batch of probability rows (n x 2), with the
    /// true-class probability clamped at 1e-12 before the log.
    pub fn cross_entropy_mean(&mut self, probs: ValueId, labels: &[usize]) -> Result<ValueId> {
        let (n, c) = self.value(probs).shape();
        if labels.len() != n || c != 2 {
            return Err(CromeError::Config(format!(
                "cross_entropy_mean needs n x 2 probabilities and one label per row; got {n}x{c} with {} labels",
                labels.len()
            )));
        }
        let vp = self.value(probs);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let p = vp.get(i, y).max(1e-12);
            loss -= p.ln();
        }
        loss /= n as f64;
        Ok(self.push(
            Op::CrossEntropyMean {
                probs,
                labels: labels.to_vec(),
            },
            Matrix::scalar(loss),
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns per-node gradients; nodes
    /// off any path to the loss hold `None`.
    pub fn backward(&self, loss: ValueId) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(CromeError::State(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        if !lv.item().is_finite() {
            return Err(CromeError::NonFinite("loss before backward".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let accum = |grads: &mut [Option<Matrix>], id: ValueId, delta: Matrix| {
            match &mut grads[id.0] {
                Some(existing) => existing.add_scaled(&delta, 1.0),
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let da = matrix::matmul(g, &vb.transpose()).expect("matmul backward");
                let db = matrix::matmul(&va.transpose(), g).expect("matmul backward");
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::Transpose { a } => {
                accum(grads, *a, g.transpose());
            }
            Op::Add { a, b } => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Scale { a, c } => {
                accum(grads, *a, g.map(|v| c * v));
            }
            Op::Hadamard { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let da = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(vb.data.iter()).map(|(&x, &y)| x * y).collect(),
                );
                let db = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(va.data.iter()).map(|(&x, &y)| x * y).collect(),
                );
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::AddRowBroadcast { a, bias } => {
                accum(grads, *a, g.clone());
                let mut db = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        db.data[c] += g.get(r, c);
                    }
                }
                accum(grads, *bias, db);
            }
            Op::Relu { a } => {
                let va = self.value(*a);
                let da = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(va.data.iter())
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                );
                accum(grads, *a, da);
            }
            Op::SoftmaxRows { a } => {
                let out = &self.nodes[i].value;
                let mut da = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let orow = out.row(r);
                    let grow = g.row(r);
                    let dot: f64 = orow.iter().zip(grow.iter()).map(|(&o, &gv)| o * gv).sum();
                    for c in 0..g.cols {
                        da.set(r, c, orow[c] * (grow[c] - dot));
                    }
                }
                accum(grads, *a, da);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let (n, d) = g.shape();
                let vg = self.value(*gamma);
                let mut dgamma = Matrix::zeros(1, d);
                let mut dbeta = Matrix::zeros(1, d);
                let mut sum_dxhat = vec![0.0; d];
                let mut sum_dxhat_xhat = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        let gv = g.get(r, c);
                        let xh = x_hat.get(r, c);
                        dgamma.data[c] += gv * xh;
                        dbeta.data[c] += gv;
                        let dxh = gv * vg.data[c];
                        sum_dxhat[c] += dxh;
                        sum_dxhat_xhat[c] += dxh * xh;
                    }
                }
                let mut dx = Matrix::zeros(n, d);
                let nf = n as f64;
                for r in 0..n {
                    for c in 0..d {
                        let dxh = g.get(r, c) * vg.data[c];
                        let xh = x_hat.get(r, c);
                        dx.set(
                            r,
                            c,
                            (inv_std[c] / nf)
                                * (nf * dxh - sum_dxhat[c] - xh * sum_dxhat_xhat[c]),
                        );
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *gamma, dgamma);
                accum(grads, *beta, dbeta);
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                x_hat,
                scale,
            } => {
                let (n, d) = g.shape();
                let vg = self.value(*gamma);
                let mut dgamma = Matrix::zeros(1, d);
                let mut dbeta = Matrix::zeros(1, d);
                let mut dx = Matrix::zeros(n, d);
                for r in 0..n {
                    for c in 0..d {
                        let gv = g.get(r, c);
                        dgamma.data[c] += gv * x_hat.get(r, c);
                        dbeta.data[c] += gv;
                        dx.set(r, c, gv * vg.data[c] * scale[c]);
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *gamma, dgamma);
                accum(grads, *beta, dbeta);
            }
            Op::DropoutMask { x, mask } => {
                let dx = Matrix::from_vec(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(mask.data.iter())
                        .map(|(&gv, &m)| gv * m)
                        .collect(),
                );
                accum(grads, *x, dx);
            }
            Op::ConcatRows { inputs, heights } => {
                let mut start = 0;
                for (v, &h) in inputs.iter().zip(heights.iter()) {
                    let part = Matrix::from_vec(
                        h,
                        g.cols,
                        g.data[start * g.cols..(start + h) * g.cols].to_vec(),
                    );
                    accum(grads, *v, part);
                    start += h;
                }
            }
            Op::ConcatCols { inputs, widths } => {
                let mut off = 0;
                for (v, &w) in inputs.iter().zip(widths.iter()) {
                    let mut part = Matrix::zeros(g.rows, w);
                    for r in 0..g.rows {
                        part.row_mut(r)
                            .copy_from_slice(&g.data[r * g.cols + off..r * g.cols + off + w]);
                    }
                    accum(grads, *v, part);
                    off += w;
                }
            }
            Op::SliceRows { a, start, len } => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows, va.cols);
                da.data[start * va.cols..(start + len) * va.cols].copy_from_slice(&g.data);
                accum(grads, *a, da);
            }
            Op::SliceCols { a, start, len } => {
                let va = self.value(*a);
                let mut da = Matrix::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    da.data[r * va.cols + start..r * va.cols + start + len]
                        .copy_from_slice(g.row(r));
                }
                accum(grads, *a, da);
            }
            Op::MeanRows { a } => {
                let va = self.value(*a);
                let k = va.rows as f64;
                let mut da = Matrix::zeros(va.rows, va.cols);
                for r in 0..va.rows {
                    for c in 0..va.cols {
                        da.set(r, c, g.data[c] / k);
                    }
                }
                accum(grads, *a, da);
            }
            Op::FlattenRow { a } => {
                let va = self.value(*a);
                let da = Matrix::from_vec(va.rows, va.cols, g.data.clone());
                accum(grads, *a, da);
            }
            Op::CosineSim {
                a,
                b,
                norms_a,
                norms_b,
            } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let s = &self.nodes[i].value;
                let mut da = Matrix::zeros(va.rows, va.cols);
                let mut db = Matrix::zeros(vb.rows, vb.cols);
                for r in 0..va.rows {
                    for j in 0..vb.rows {
                        let gv = g.get(r, j);
                        if gv == 0.0 {
                            continue;
                        }
                        let sij = s.get(r, j);
                        let denom = norms_a[r] * norms_b[j];
                        for c in 0..va.cols {
                            da.data[r * va.cols + c] += gv
                                * (vb.get(j, c) / denom
                                    - sij * va.get(r, c) / (norms_a[r] * norms_a[r]));
                            db.data[j * vb.cols + c] += gv
                                * (va.get(r, c) / denom
                                    - sij * vb.get(j, c) / (norms_b[j] * norms_b[j]));
                        }
                    }
                }
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::ProxyAnchor {
                sims,
                labels,
                proxy_classes,
                alpha,
                delta,
                pos_sum,
                neg_sum,
                n_pos_proxies,
            } => {
                let s = self.value(*sims);
                let (n, p) = s.shape();
                let gv = g.item();
                let mut ds = Matrix::zeros(n, p);
                for j in 0..p {
                    for r in 0..n {
                        let sij = s.get(r, j);
                        if labels[r] == proxy_classes[j] {
                            if *n_pos_proxies == 0 {
                                continue;
                            }
                            let (e, clamped) = clamped_exp(-alpha * (sij - delta));
                            if clamped {
                                continue;
                            }
                            ds.set(
                                r,
                                j,
                                gv * (1.0 / *n_pos_proxies as f64) * (-alpha * e)
                                    / (1.0 + pos_sum[j]),
                            );
                        } else {
                            let (e, clamped) = clamped_exp(alpha * (sij + delta));
                            if clamped {
                                continue;
                            }
                            ds.set(
                                r,
                                j,
                                gv * (1.0 / p as f64) * (alpha * e) / (1.0 + neg_sum[j]),
                            );
                        }
                    }
                }
                accum(grads, *sims, ds);
            }
            Op::CrossEntropyMean { probs, labels } => {
                let vp = self.value(*probs);
                let (n, _) = vp.shape();
                let gv = g.item();
                let mut dp = Matrix::zeros(vp.rows, vp.cols);
                for (r, &y) in labels.iter().enumerate() {
                    let p = vp.get(r, y);
                    if p > 1e-12 {
                        dp.set(r, y, gv * (-1.0 / (n as f64 * p)));
                    }
                }
                accum(grads, *probs, dp);
            }
        }
    }

    /// Gradient of each bound parameter, zero where no gradient flowed.
    pub fn param_grads(&self, params: &Params, grads: &Grads) -> HashMap<ParamId, Matrix> {
        let mut out = HashMap::new();
        for (&pid, &vid) in self.bound.iter() {
            let m = params.get(pid);
            let g = grads
                .get(vid)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows, m.cols));
            out.insert(pid, g);
        }
        out
    }
}

pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: ValueId) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}
