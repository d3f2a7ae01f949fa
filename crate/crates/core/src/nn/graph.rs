use super::scalar::{gemm, View};
use super::{NnError, Scalar, Tensor};
use crate::rng::StreamRng;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const LAYERNORM_EPS: f64 = 1e-5;

enum Op<F> {
    Leaf,
    Reshape(Var),
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax(Var),
    Gelu { x: Var, tanh: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<F> },
    Gather { x: Var, rows: Vec<usize> },
    Combine { kept_src: Var, full_src: Var, kept: Vec<usize>, dropped: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, probs: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<F>, row_losses: Vec<F> },
    WeightedSum { x: Var, weights: Vec<F> },
}

#[derive(Clone, Copy, Debug)]
struct AttnGeom {
    seqs: usize,
    len: usize,
    heads: usize,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode tape. Built fresh for each forward pass and owned by one
/// training context; [`Graph::backward`] walks it in reverse insertion order.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<F: Scalar>(t: &Tensor<F>, op: &'static str) -> Result<(), NnError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(op))
    }
}

fn strictly_increasing(idx: &[usize]) -> bool {
    idx.windows(2).all(|w| w[0] < w[1])
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Per-row losses recorded by a cross-entropy node (`None` rows are 0).
    pub fn row_losses(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { row_losses, .. } => Some(row_losses),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var, NnError> {
        ensure_finite(&value, "leaf")?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor<F>) -> Result<Var, NnError> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var, NnError> {
        self.leaf(value, false)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NnError> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `x[.., k] @ w[k, n]`; leading dimensions of `x` are treated as rows.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(NnError::Shape(format!("matmul {xs:?} x {ws:?}")));
        }
        let (m, k) = self.value(x).as_matrix();
        let n = ws[1];
        let mut out_shape = xs[..xs.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = Tensor::zeros(out_shape);
        gemm(
            F::one(),
            self.value(x).data(),
            View::dense(m, k),
            self.value(w).data(),
            View::dense(k, n),
            F::zero(),
            out.data_mut(),
            View::dense(m, n),
        );
        ensure_finite(&out, "matmul")?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::MatMul(x, w), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = self.value(a).clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        ensure_finite(&out, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (_, n) = self.value(x).as_matrix();
        if self.shape(bias) != [n] {
            return Err(NnError::Shape(format!(
                "bias {:?} for rows of width {n}",
                self.shape(bias)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &v) in row.iter_mut().zip(b) {
                *o += v;
            }
        }
        ensure_finite(&out, "add_bias")?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// Affine layer normalisation over the last dimension (epsilon 1e-5).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let (m, n) = self.value(x).as_matrix();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(NnError::Shape(format!(
                "layernorm affine {:?}/{:?} for width {n}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = F::from_f64_lossy(LAYERNORM_EPS);
        let nf = F::from_usize(n).unwrap();
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = Tensor::zeros(self.shape(x).to_vec());
        let od = out.data_mut();
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                od[i * n + j] = h * g[j] + b[j];
            }
        }
        ensure_finite(&out, "layernorm")?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let (_, n) = self.value(x).as_matrix();
        let mut out = self.value(x).clone();
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                softmax_in_place(row);
            }
        }
        ensure_finite(&out, "softmax")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NnError> {
        let mut out = self.value(x).clone();
        let mut tanh = Vec::with_capacity(out.len());
        for v in out.data_mut() {
            let t = gelu_tanh(*v);
            tanh.push(t);
            *v = F::from_f64_lossy(0.5) * *v * (F::one() + t);
        }
        ensure_finite(&out, "gelu")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gelu { x, tanh }, rg))
    }

    /// Rows of `table[vocab, d]` selected by `ids`; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(NnError::Shape(format!("embedding table {ts:?}")));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NnError::Index(format!("token id {bad} outside vocabulary {v}")));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    /// Rate 0 returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut StreamRng) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Shape(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let scale = F::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < rate { F::zero() } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        ensure_finite(&out, "dropout")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Selects rows of `x` (leading dims flattened). `rows` must be strictly
    /// increasing and in range. Backward scatters into the selected rows.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NnError> {
        let (r, d) = self.value(x).as_matrix();
        if !strictly_increasing(rows) {
            return Err(NnError::Index("gather rows must be strictly increasing".into()));
        }
        if let Some(&last) = rows.last() {
            if last >= r {
                return Err(NnError::Index(format!("gather row {last} outside {r} rows")));
            }
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather { x, rows: rows.to_vec() }, rg))
    }

    /// Scatters the rows of `kept_src` back to positions `kept` and fills
    /// `dropped` positions from `full_src`. `kept` and `dropped` must
    /// partition `0..rows(full_src)`; the output has `full_src`'s shape.
    pub fn combine_rows(
        &mut self,
        kept_src: Var,
        full_src: Var,
        kept: &[usize],
        dropped: &[usize],
    ) -> Result<Var, NnError> {
        let (r, d) = self.value(full_src).as_matrix();
        let (kr, kd) = self.value(kept_src).as_matrix();
        if kd != d || kr != kept.len() {
            return Err(NnError::Shape(format!(
                "combine: kept source {:?} for {} kept rows of width {d}",
                self.shape(kept_src),
                kept.len()
            )));
        }
        check_partition(kept, dropped, r)?;
        let mut out = self.value(full_src).clone();
        let od = out.data_mut();
        let kv = self.value(kept_src).data();
        for (j, &i) in kept.iter().enumerate() {
            od[i * d..(i + 1) * d].copy_from_slice(&kv[j * d..(j + 1) * d]);
        }
        let rg = self.rg(kept_src) || self.rg(full_src);
        Ok(self.push(
            out,
            Op::Combine { kept_src, full_src, kept: kept.to_vec(), dropped: dropped.to_vec() },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `seqs` independent
    /// sequences of `len` rows each. `q`, `k`, `v` are `[seqs * len, d]`;
    /// head `h` uses columns `h*d/heads..(h+1)*d/heads`. With `causal`, row
    /// `i` of a sequence attends to rows `0..=i` of the same sequence.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seqs: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var, NnError> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(NnError::Shape("attention q/k/v shapes differ".into()));
        }
        let (rows, d) = self.value(q).as_matrix();
        if seqs == 0 || rows % seqs != 0 || heads == 0 || d % heads != 0 {
            return Err(NnError::Shape(format!(
                "attention: {rows} rows, width {d}, {seqs} sequences, {heads} heads"
            )));
        }
        let geom = AttnGeom { seqs, len: rows / seqs, heads };
        let (len, dh) = (geom.len, d / heads);
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![F::zero(); seqs * heads * len * len];
        let mut out = Tensor::zeros(shape);
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            let od = out.data_mut();
            for s in 0..seqs {
                for h in 0..heads {
                    let head = head_view(s, h, len, d, dh);
                    let p_off = (s * heads + h) * len * len;
                    let p = &mut probs[p_off..p_off + len * len];
                    gemm(scale, qv, head, kv, head.t(), F::zero(), p, View::dense(len, len));
                    for i in 0..len {
                        let row = &mut p[i * len..(i + 1) * len];
                        if causal {
                            row[i + 1..].iter_mut().for_each(|x| *x = F::neg_infinity());
                        }
                        softmax_in_place(row);
                    }
                    gemm(F::one(), p, View::dense(len, len), vv, head, F::zero(), od, head);
                }
            }
        }
        ensure_finite(&out, "attention")?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::Attention { q, k, v, geom, probs }, rg))
    }

    /// Mean negative log-likelihood over rows with a target; `None` rows are
    /// ignored. `logits` is `[.., vocab]` with one row per target entry.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<Var, NnError> {
        let (m, vocab) = self.value(logits).as_matrix();
        if targets.len() != m {
            return Err(NnError::Shape(format!("{} targets for {m} logit rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(NnError::Index(format!("target {bad} outside vocabulary {vocab}")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(NnError::EmptyTargets);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut row_losses = vec![F::zero(); m];
        let mut total = F::zero();
        for (i, row) in probs.chunks_mut(vocab).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
            if let Some(t) = targets[i] {
                row_losses[i] = lse - row[t];
                total += row_losses[i];
            }
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        let out = Tensor::scalar(total / F::from_usize(count).unwrap());
        ensure_finite(&out, "cross_entropy")?;
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, row_losses },
            rg,
        ))
    }

    /// `sum(x * weights)` against a constant weight tensor of the same size.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<F>) -> Result<Var, NnError> {
        if weights.len() != self.value(x).len() {
            return Err(NnError::Shape("weighted_sum size mismatch".into()));
        }
        let s: F = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        let out = Tensor::scalar(s);
        ensure_finite(&out, "weighted_sum")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::WeightedSum { x, weights: weights.data().to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let ones = Tensor::full(self.shape(x).to_vec(), F::one());
        self.weighted_sum(x, &ones)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::MatMul(x, w) => {
                let (m, k) = self.value(*x).as_matrix();
                let n = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(dx) = slot(nodes, grads, *x) {
                    gemm(
                        F::one(),
                        g,
                        View::dense(m, n),
                        wv,
                        View::dense(k, n).t(),
                        F::one(),
                        dx,
                        View::dense(m, k),
                    );
                }
                if let Some(dw) = slot(nodes, grads, *w) {
                    gemm(
                        F::one(),
                        xv,
                        View::dense(m, k).t(),
                        g,
                        View::dense(m, n),
                        F::one(),
                        dw,
                        View::dense(k, n),
                    );
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = slot(nodes, grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    add_into(db, g);
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = slot(nodes, grads, *bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                if let Some(dgamma) = slot(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dgamma[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(dbeta) = slot(nodes, grads, *beta) {
                    for grow in g.chunks(n) {
                        add_into(dbeta, grow);
                    }
                }
                if let Some(dx) = slot(nodes, grads, *x) {
                    let nf = F::from_usize(n).unwrap();
                    let mut dh = vec![F::zero(); n];
                    for (i, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for j in 0..n {
                            dh[j] = grow[j] * gv[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hrow[j];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        let dxrow = &mut dx[i * n..(i + 1) * n];
                        for j in 0..n {
                            dxrow[j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (_, n) = node.value.as_matrix();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((yrow, grow), dxrow) in
                        node.value.data().chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n))
                    {
                        let dot: F = yrow.iter().zip(grow).map(|(&y, &gg)| y * gg).sum();
                        for j in 0..n {
                            dxrow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x).data();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (((d, &xi), &gi), &t) in dx.iter_mut().zip(xv).zip(g).zip(tanh) {
                        *d += gi * gelu_grad(xi, t);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dt) = slot(nodes, grads, *table) {
                    for (j, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[j * d..(j + 1) * d]);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for ((d, &m), &gi) in dx.iter_mut().zip(mask).zip(g) {
                        *d += gi * m;
                    }
                }
            }
            Op::Gather { x, rows } => {
                let (_, d) = self.value(*x).as_matrix();
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (j, &i) in rows.iter().enumerate() {
                        add_into(&mut dx[i * d..(i + 1) * d], &g[j * d..(j + 1) * d]);
                    }
                }
            }
            Op::Combine { kept_src, full_src, kept, dropped } => {
                let (_, d) = self.value(*full_src).as_matrix();
                if let Some(dk) = slot(nodes, grads, *kept_src) {
                    for (j, &i) in kept.iter().enumerate() {
                        add_into(&mut dk[j * d..(j + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
                if let Some(df) = slot(nodes, grads, *full_src) {
                    for &i in dropped {
                        add_into(&mut df[i * d..(i + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::Attention { q, k, v, geom, probs } => {
                self.attention_backward(*q, *k, *v, *geom, probs, g, grads);
            }
            Op::CrossEntropy { logits, targets, probs, .. } => {
                let (_, vocab) = self.value(*logits).as_matrix();
                let count = targets.iter().filter(|t| t.is_some()).count();
                let scale = g[0] / F::from_usize(count).unwrap();
                if let Some(dl) = slot(nodes, grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let (prow, drow) =
                            (&probs[i * vocab..(i + 1) * vocab], &mut dl[i * vocab..(i + 1) * vocab]);
                        for j in 0..vocab {
                            drow[j] += scale * prow[j];
                        }
                        drow[t] -= scale;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(dx) = slot(nodes, grads, *x) {
                    for (d, &w) in dx.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttnGeom,
        probs: &[F],
        g: &[F],
        grads: &mut [Option<Vec<F>>],
    ) {
        let (_, d) = self.value(q).as_matrix();
        let AttnGeom { seqs, len, heads, .. } = geom;
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let total = qv.len();
        let mut dq = vec![F::zero(); total];
        let mut dk = vec![F::zero(); total];
        let mut dv = vec![F::zero(); total];
        let mut ds = vec![F::zero(); len * len];
        for s in 0..seqs {
            for h in 0..heads {
                let head = head_view(s, h, len, d, dh);
                let p_off = (s * heads + h) * len * len;
                let p = &probs[p_off..p_off + len * len];
                let pv = View::dense(len, len);
                // dV += P^T dO
                gemm(F::one(), p, pv.t(), g, head, F::one(), &mut dv, head);
                // dP = dO V^T
                gemm(F::one(), g, head, vv, head.t(), F::zero(), &mut ds, pv);
                for i in 0..len {
                    let (prow, drow) = (&p[i * len..(i + 1) * len], &mut ds[i * len..(i + 1) * len]);
                    let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..len {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                }
                gemm(scale, &ds, pv, kv, head, F::one(), &mut dq, head);
                gemm(scale, &ds, pv.t(), qv, head, F::one(), &mut dk, head);
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                match &mut grads[var.0] {
                    Some(existing) => add_into(existing, &delta),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
    }
}

fn slot<'a, F: Scalar>(nodes: &[Node<F>], grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

fn head_view(seq: usize, head: usize, len: usize, d: usize, dh: usize) -> View {
    View { offset: seq * len * d + head * dh, rows: len, cols: dh, rs: d, cs: 1 }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(sqrt(2/pi) (x + 0.044715 x^3))` written as `1 - 2 / (e^{2y} + 1)`.
fn gelu_tanh<F: Scalar>(x: F) -> F {
    let (c, a, two) = (F::from_f64_lossy(GELU_C), F::from_f64_lossy(GELU_A), F::from_f64_lossy(2.0));
    let y = c * (x + a * x * x * x);
    F::one() - two / ((two * y).exp() + F::one())
}

fn gelu_grad<F: Scalar>(x: F, t: F) -> F {
    let (c, a, half) = (F::from_f64_lossy(GELU_C), F::from_f64_lossy(GELU_A), F::from_f64_lossy(0.5));
    let three = F::from_f64_lossy(3.0);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

fn check_partition(kept: &[usize], dropped: &[usize], total: usize) -> Result<(), NnError> {
    if kept.len() + dropped.len() != total {
        return Err(NnError::Index(format!(
            "kept ({}) + dropped ({}) rows do not cover {total}",
            kept.len(),
            dropped.len()
        )));
    }
    if !strictly_increasing(kept) || !strictly_increasing(dropped) {
        return Err(NnError::Index("kept/dropped rows must be strictly increasing".into()));
    }
    let mut seen = vec![false; total];
    for &i in kept.iter().chain(dropped) {
        if i >= total || seen[i] {
            return Err(NnError::Index(format!("row {i} out of range or repeated")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Per-node gradients from one [`Graph::backward`] call.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// `None` when `v` does not require a gradient or the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
