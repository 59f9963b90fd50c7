use super::kernels::{add_into, gemm, sigmoid, softmax_row};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape parameters of a causal grouped-query attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq_len: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddRow { a: Var, row: Var },
    MulRows { a: Var, s: Var },
    Sum { a: Var },
    MeanRows { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    Sigmoid { a: Var },
    Silu { a: Var },
    RmsNorm { x: Var, w: Var, inv_rms: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    GatherRows { a: Var, rows: Vec<usize> },
    GatherElements { a: Var, index: Vec<(usize, usize)> },
    IndexAdd { base: Var, src: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, dims: AttentionDims, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of primitive applications for one forward pass.
///
/// Leaves are inserted with [`Tape::leaf`]; every other node is produced by a
/// primitive method. [`Tape::backward`] walks the record in reverse and
/// accumulates gradients into leaves that require them.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// Finite-value checking follows `debug_assertions`.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric { op: op_name });
        }
        let rg = inputs.iter().any(|&i| self.needs_grad(i));
        let value = Tensor::new(shape, data)?.with_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- primitives ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { a }, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, data, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, data, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale { a, c }, &[a])
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if self.value(row).numel() != c {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let bias = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            add_into(&mut data[i * c..(i + 1) * c], bias);
        }
        let shape = self.shape(a).to_vec();
        self.push("add_row", shape, data, Op::AddRow { a, row }, &[a, row])
    }

    /// Scales row `i` of `a` by `s[i]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if self.value(s).numel() != r {
            return Err(Error::Shape {
                op: "mul_rows",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let scale = self.value(s).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            data[i * c..(i + 1) * c].iter_mut().for_each(|x| *x *= scale[i]);
        }
        let shape = self.shape(a).to_vec();
        self.push("mul_rows", shape, data, Op::MulRows { a, s }, &[a, s])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { a }, &[a])
    }

    /// Column means of a matrix, shape `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            add_into(&mut out, &src[i * c..(i + 1) * c]);
        }
        out.iter_mut().for_each(|x| *x /= r as f64);
        self.push("mean_rows", vec![1, c], out, Op::MeanRows { a }, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let src = self.value(a).data();
        if src.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = src.to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for j in 0..len {
                    buf[j] = data[base + j * inner];
                }
                softmax_row(&mut buf);
                for j in 0..len {
                    data[base + j * inner] = buf[j];
                }
            }
        }
        self.push("softmax", shape, data, Op::Softmax { a, outer, len, inner }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("sigmoid", shape, data, Op::Sigmoid { a }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("silu", shape, data, Op::Silu { a }, &[a])
    }

    /// Row-wise RMS normalization: `x / sqrt(mean(x^2) + eps) * w`.
    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("rms_norm eps must be positive"));
        }
        let (r, c) = self.dims2(x)?;
        if self.value(w).numel() != c {
            return Err(Error::Shape {
                op: "rms_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![0.0; r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * ws[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push("rms_norm", shape, out, Op::RmsNorm { x, w, inv_rms }, &[x, w])
    }

    /// Gathers rows `ids` of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::contract("embedding lookup with no ids"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push("embedding", vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    bound: v,
                });
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_row(&mut probs[i * v..(i + 1) * v]);
        }
        let loss = total / n as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index { what: "rows", index: i, bound: r });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push("gather_rows", vec![rows.len(), c], out, Op::GatherRows { a, rows: rows.to_vec() }, &[a])
    }

    /// Picks `a[row, col]` for each pair; result is a `[len, 1]` column.
    pub fn gather_elements(&mut self, a: Var, index: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len());
        for &(i, j) in index {
            if i >= r || j >= c {
                return Err(Error::Index { what: "elements", index: i * c + j, bound: r * c });
            }
            out.push(src[i * c + j]);
        }
        self.push("gather_elements", vec![index.len(), 1], out, Op::GatherElements { a, index: index.to_vec() }, &[a])
    }

    /// `out = base; out[rows[j]] += src[j]`.
    pub fn index_add(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(base)?;
        let (m, c2) = self.dims2(src)?;
        if c != c2 || m != rows.len() {
            return Err(Error::Shape {
                op: "index_add",
                lhs: self.shape(base).to_vec(),
                rhs: self.shape(src).to_vec(),
            });
        }
        let mut out = self.value(base).data().to_vec();
        let s = self.value(src).data();
        for (j, &i) in rows.iter().enumerate() {
            if i >= r {
                return Err(Error::Index { what: "rows", index: i, bound: r });
            }
            add_into(&mut out[i * c..(i + 1) * c], &s[j * c..(j + 1) * c]);
        }
        let shape = self.shape(base).to_vec();
        self.push("index_add", shape, out, Op::IndexAdd { base, src, rows: rows.to_vec() }, &[base, src])
    }

    /// Causal scaled dot-product attention with grouped key/value heads.
    ///
    /// `q` is `[batch*seq, n_q_heads*head_dim]`; `k` and `v` are
    /// `[batch*seq, n_kv_heads*head_dim]`. Query head `h` reads key/value head
    /// `h / (n_q_heads / n_kv_heads)`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, dims: AttentionDims) -> Result<Var> {
        let AttentionDims { batch, seq_len: t_len, n_q_heads: hq, n_kv_heads: hkv, head_dim: hd } = dims;
        if hkv == 0 || hq % hkv != 0 {
            return Err(Error::contract(format!("{hq} query heads not divisible by {hkv} kv heads")));
        }
        let rows = batch * t_len;
        let expect_q = [rows, hq * hd];
        let expect_kv = [rows, hkv * hd];
        for (var, exp) in [(q, &expect_q), (k, &expect_kv), (v, &expect_kv)] {
            if self.shape(var) != exp {
                return Err(Error::Shape { op: "causal_attention", lhs: self.shape(var).to_vec(), rhs: exp.to_vec() });
            }
        }
        let group = hq / hkv;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (qw, kw) = (hq * hd, hkv * hd);
        let mut out = vec![0.0; rows * qw];
        let mut probs = vec![0.0; batch * hq * t_len * t_len];
        for b in 0..batch {
            for h in 0..hq {
                let kh = h / group;
                let p_base = (b * hq + h) * t_len * t_len;
                for t in 0..t_len {
                    let qrow = &qs[(b * t_len + t) * qw + h * hd..][..hd];
                    let prow = &mut probs[p_base + t * t_len..][..t_len];
                    for s in 0..=t {
                        let krow = &ks[(b * t_len + s) * kw + kh * hd..][..hd];
                        prow[s] = scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>();
                    }
                    softmax_row(&mut prow[..=t]);
                    let orow = &mut out[(b * t_len + t) * qw + h * hd..][..hd];
                    for s in 0..=t {
                        let p = prow[s];
                        let vrow = &vs[(b * t_len + s) * kw + kh * hd..][..hd];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
        }
        self.push("causal_attention", vec![rows, qw], out, Op::Attention { q, k, v, dims, probs }, &[q, k, v])
    }

    // ---- reverse pass -------------------------------------------------

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires
    /// gradients. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.needs_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        macro_rules! acc {
            ($v:expr) => {
                self.slot(grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                if let Some(ga) = acc!(*a) {
                    gemm(m, n, k, g, false, self.value(*b).data(), true, ga, 1.0);
                }
                if let Some(gb) = acc!(*b) {
                    gemm(k, m, n, self.value(*a).data(), true, g, false, gb, 1.0);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = self.value(*a).dims2().unwrap();
                if let Some(ga) = acc!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddRow { a, row } => {
                let c = self.value(*row).numel();
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gr) = acc!(*row) {
                    for chunk in g.chunks_exact(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulRows { a, s } => {
                let (r, c) = self.value(*a).dims2().unwrap();
                let (av, sv) = (self.value(*a).data(), self.value(*s).data());
                if let Some(ga) = acc!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * sv[i];
                        }
                    }
                }
                if let Some(gs) = acc!(*s) {
                    for i in 0..r {
                        gs[i] += (0..c).map(|j| g[i * c + j] * av[i * c + j]).sum::<f64>();
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanRows { a } => {
                let (r, c) = self.value(*a).dims2().unwrap();
                if let Some(ga) = acc!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                if let Some(ga) = acc!(*a) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[base + j * inner] * out[base + j * inner]).sum();
                            for j in 0..*len {
                                let p = base + j * inner;
                                ga[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::Silu { a } => {
                let xs = self.value(*a).data();
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        let s = sigmoid(xs[i]);
                        ga[i] += g[i] * s * (1.0 + xs[i] * (1.0 - s));
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let (xs, ws) = (self.value(*x).data(), self.value(*w).data());
                if let Some(gx) = acc!(*x) {
                    for i in 0..r {
                        let inv = inv_rms[i];
                        let row = &xs[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = (0..c).map(|j| gr[j] * ws[j] * row[j]).sum();
                        let coef = inv * inv * inv * dot / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += inv * ws[j] * gr[j] - coef * row[j];
                        }
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for i in 0..r {
                        for j in 0..c {
                            gw[j] += g[i * c + j] * xs[i * c + j] * inv_rms[i];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).dims2().unwrap().1;
                if let Some(gt) = acc!(*table) {
                    for (row, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).dims2().unwrap().1;
                let n = targets.len() as f64;
                if let Some(gl) = acc!(*logits) {
                    let scale = g[0] / n;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            gl[i * v + j] += scale * (probs[i * v + j] - ind);
                        }
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                let c = self.value(*a).dims2().unwrap().1;
                if let Some(ga) = acc!(*a) {
                    for (j, &i) in rows.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[j * c..(j + 1) * c]);
                    }
                }
            }
            Op::GatherElements { a, index } => {
                let c = self.value(*a).dims2().unwrap().1;
                if let Some(ga) = acc!(*a) {
                    for (k, &(i, j)) in index.iter().enumerate() {
                        ga[i * c + j] += g[k];
                    }
                }
            }
            Op::IndexAdd { base, src, rows } => {
                let c = self.value(*base).dims2().unwrap().1;
                if let Some(gb) = acc!(*base) {
                    add_into(gb, g);
                }
                if let Some(gs) = acc!(*src) {
                    for (j, &i) in rows.iter().enumerate() {
                        add_into(&mut gs[j * c..(j + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                self.attention_backward(g, *q, *k, *v, dims, probs, grads);
            }
        }
    }

    /// Gradient buffer of `v`, allocated on first use; `None` when `v` needs no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs_grad(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        dims: &AttentionDims,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionDims { batch, seq_len: t_len, n_q_heads: hq, n_kv_heads: hkv, head_dim: hd } = *dims;
        let group = hq / hkv;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qw, kw) = (hq * hd, hkv * hd);
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; qs.len()];
        let mut dk = vec![0.0; ks.len()];
        let mut dv = vec![0.0; vs.len()];
        let mut dp = vec![0.0; t_len];
        for b in 0..batch {
            for h in 0..hq {
                let kh = h / group;
                let p_base = (b * hq + h) * t_len * t_len;
                for t in 0..t_len {
                    let prow = &probs[p_base + t * t_len..][..t_len];
                    let grow = &g[(b * t_len + t) * qw + h * hd..][..hd];
                    let mut dot = 0.0;
                    for s in 0..=t {
                        let voff = (b * t_len + s) * kw + kh * hd;
                        let vrow = &vs[voff..voff + hd];
                        dp[s] = grow.iter().zip(vrow).map(|(x, y)| x * y).sum();
                        dot += prow[s] * dp[s];
                        dv[voff..voff + hd].iter_mut().zip(grow).for_each(|(d, x)| *d += prow[s] * x);
                    }
                    let qoff = (b * t_len + t) * qw + h * hd;
                    for s in 0..=t {
                        let ds = prow[s] * (dp[s] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let koff = (b * t_len + s) * kw + kh * hd;
                        for d in 0..hd {
                            dq[qoff + d] += ds * ks[koff + d];
                            dk[koff + d] += ds * qs[qoff + d];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs_grad(var) {
                match &mut grads[var.0] {
                    Some(acc) => add_into(acc, &d),
                    slot @ None => *slot = Some(d),
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}
