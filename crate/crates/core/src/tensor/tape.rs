use super::{stable_sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Tanh { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    Gather { table: Var, rows: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    Concat { parts: Vec<Var> },
    StackRows { parts: Vec<Var> },
    Conv1d { input: Var, filters: Var, bias: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    GradReverse { a: Var, lambda: f64 },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BinaryCrossEntropy { p: Var, targets: Vec<f64>, eps: f64 },
    NormalizeMean { a: Var, sum: f64 },
    Blend { alpha: Var, diff: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of the operations of one forward pass.
///
/// Nodes are stored in recording order, which is also a valid topological
/// order. A tape is meant to be used for exactly one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any reached it) into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g);
        }
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf; it receives gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Records `t` as a constant leaf regardless of its flag.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).data[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node shape")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let ad = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose { a }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).len() != n || self.shape(row).len() != 1 {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let (ad, rd) = (self.value(a), self.value(row));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(ad[i * n..(i + 1) * n].iter().zip(rd).map(|(x, y)| x + y));
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(vec![m, n], out, Op::AddRow { a, row }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale { a, factor }, |x| x * factor)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh { a }, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu { a }, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid { a }, stable_sigmoid)
    }

    /// Identity on the forward pass; the backward pass multiplies the
    /// incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::GradReverse { a, lambda }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape { a }, rg))
    }

    /// Row lookup into a `V×d` table, producing `rows.len()×d`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::contract("gather_rows with no rows"));
        }
        let td = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= v {
                return Err(Error::Index { index: r, bound: v });
            }
            out.extend_from_slice(&td[r * d..(r + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![rows.len(), d],
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Flat concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of nothing"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let n = out.len();
        Ok(self.push(
            vec![n],
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks equal-length vectors into a `parts.len()×n` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("stack_rows of nothing"))?;
        let n = self.value(first).len();
        let mut out = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            if self.value(p).len() != n {
                return Err(shape_err("stack_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            vec![parts.len(), n],
            out,
            Op::StackRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Valid 1-D convolution of an `L×d` input with `F` filters of width
    /// `window`, each stored as a flat row of `window·d` weights.
    ///
    /// Each output is the left-to-right dot product of the filter row with
    /// the contiguous input window, plus the bias.
    pub fn conv1d(&mut self, input: Var, filters: Var, bias: Var, window: usize) -> Result<Var> {
        let (len, d) = self.dims2(input, "conv1d")?;
        let (nf, wd) = self.dims2(filters, "conv1d")?;
        if window == 0 || wd != window * d {
            return Err(shape_err("conv1d", self.shape(input), self.shape(filters)));
        }
        if self.value(bias).len() != nf {
            return Err(shape_err("conv1d", self.shape(filters), self.shape(bias)));
        }
        if len < window {
            return Err(Error::InputTooShort { len, window });
        }
        let steps = len - window + 1;
        let (xd, fd, bd) = (self.value(input), self.value(filters), self.value(bias));
        let mut out = Vec::with_capacity(steps * nf);
        for t in 0..steps {
            let win = &xd[t * d..t * d + wd];
            for f in 0..nf {
                let row = &fd[f * wd..(f + 1) * wd];
                let mut acc = 0.0;
                for (w, x) in row.iter().zip(win) {
                    acc += w * x;
                }
                out.push(acc + bd[f]);
            }
        }
        let rg = self.rg(input) || self.rg(filters) || self.rg(bias);
        Ok(self.push(
            vec![steps, nf],
            out,
            Op::Conv1d {
                input,
                filters,
                bias,
            },
            rg,
        ))
    }

    /// Per-column max over all rows of a `T×F` matrix.
    pub fn max_over_time(&mut self, input: Var) -> Result<Var> {
        let (t, _) = self.dims2(input, "max_over_time")?;
        self.segment_max(input, &[(0, t)])
    }

    /// Per-column max over the segments `[0,p1)`, `[p1,p2)`, `[p2,T)`,
    /// concatenated segment-major into a `3F` vector.
    pub fn piecewise_max_pool(&mut self, input: Var, p1: usize, p2: usize) -> Result<Var> {
        let (t, _) = self.dims2(input, "piecewise_max_pool")?;
        if !(0 < p1 && p1 < p2 && p2 < t) {
            return Err(Error::DegenerateSegment { p1, p2, len: t });
        }
        self.segment_max(input, &[(0, p1), (p1, p2), (p2, t)])
    }

    fn segment_max(&mut self, input: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (_, f) = self.dims2(input, "max_pool")?;
        let xd = self.value(input);
        let mut out = Vec::with_capacity(segments.len() * f);
        let mut argmax = Vec::with_capacity(segments.len() * f);
        for &(lo, hi) in segments {
            for c in 0..f {
                let mut best = lo * f + c;
                for r in lo + 1..hi {
                    let idx = r * f + c;
                    // strict comparison keeps the first maximal index
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(input);
        let n = out.len();
        Ok(self.push(vec![n], out, Op::MaxPool { input, argmax }, rg))
    }

    /// Numerically stable `-log softmax(logits)[label]`.
    ///
    /// A `K` vector with one label yields a scalar; a `B×K` matrix with `B`
    /// labels yields a length-`B` vector of per-row losses.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, k) = match self.shape(logits) {
            [k] => (1, *k),
            [r, k] => (*r, *k),
            s => return Err(shape_err("softmax_cross_entropy", s, &[labels.len()])),
        };
        if labels.len() != rows {
            return Err(shape_err("softmax_cross_entropy", self.shape(logits), &[labels.len()]));
        }
        let xd = self.value(logits);
        let mut probs = Vec::with_capacity(rows * k);
        let mut out = Vec::with_capacity(rows);
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::Index { index: label, bound: k });
            }
            let row = &xd[r * k..(r + 1) * k];
            let p = softmax(row);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.push(lse - row[label]);
            probs.extend(p);
        }
        let rg = self.rg(logits);
        let n = out.len();
        Ok(self.push(
            vec![n],
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Element-wise log-loss of probabilities `p` against 0/1 `targets`,
    /// with `p` clamped to `[eps, 1-eps]`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64], eps: f64) -> Result<Var> {
        if self.value(p).len() != targets.len() {
            return Err(shape_err("binary_cross_entropy", self.shape(p), &[targets.len()]));
        }
        let out = self
            .value(p)
            .iter()
            .zip(targets)
            .map(|(&pv, &t)| bce(pv, t, eps))
            .collect();
        let rg = self.rg(p);
        let shape = self.shape(p).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BinaryCrossEntropy {
                p,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Rescales a non-negative vector so its mean is one: `n·x / sum(x)`.
    pub fn normalize_mean(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a);
        let sum: f64 = d.iter().sum();
        if sum == 0.0 || !sum.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        let n = d.len() as f64;
        let out = d.iter().map(|x| n * x / sum).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::NormalizeMean { a, sum }, rg))
    }

    /// `alpha·first + (1-alpha)·second`, element-wise, with constant
    /// `first` and `second`.
    pub fn blend(&mut self, alpha: Var, first: &[f64], second: &[f64]) -> Result<Var> {
        let ad = self.value(alpha);
        if ad.len() != first.len() || ad.len() != second.len() {
            return Err(shape_err("blend", self.shape(alpha), &[first.len(), second.len()]));
        }
        let out = ad
            .iter()
            .zip(first.iter().zip(second))
            .map(|(&a, (&x, &y))| a * x + (1.0 - a) * y)
            .collect();
        let diff = first.iter().zip(second).map(|(x, y)| x - y).collect();
        let rg = self.rg(alpha);
        let shape = self.shape(alpha).to_vec();
        Ok(self.push(shape, out, Op::Blend { alpha, diff }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.data.len()]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (x, y) in grow.iter().zip(brow) {
                                acc += x * y;
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (o, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * x;
                            }
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x * factor);
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.data) {
                        *o += x * (1.0 - y * y);
                    }
                }
            }
            Op::Relu { a } => {
                let ad = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), z) in ga.iter_mut().zip(g).zip(ad) {
                        if *z > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.data) {
                        *o += x * y * (1.0 - y);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Gather { table, rows } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.slot(grads, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, x) in gt[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, x)| *o += x);
                        }
                    }
                    offset += c;
                }
            }
            Op::Concat { parts } | Op::StackRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(o, x)| *o += x);
                    }
                    offset += n;
                }
            }
            Op::Conv1d {
                input,
                filters,
                bias,
            } => {
                let d = self.shape(*input)[1];
                let (nf, wd) = (self.shape(*filters)[0], self.shape(*filters)[1]);
                let steps = node.shape[0];
                let (xd, fd) = (self.value(*input), self.value(*filters));
                if let Some(gx) = self.slot(grads, *input) {
                    for t in 0..steps {
                        for f in 0..nf {
                            let gv = g[t * nf + f];
                            if gv == 0.0 {
                                continue;
                            }
                            let row = &fd[f * wd..(f + 1) * wd];
                            for (o, w) in gx[t * d..t * d + wd].iter_mut().zip(row) {
                                *o += gv * w;
                            }
                        }
                    }
                }
                if let Some(gf) = self.slot(grads, *filters) {
                    for t in 0..steps {
                        let win = &xd[t * d..t * d + wd];
                        for f in 0..nf {
                            let gv = g[t * nf + f];
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, x) in gf[f * wd..(f + 1) * wd].iter_mut().zip(win) {
                                *o += gv * x;
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for t in 0..steps {
                        for f in 0..nf {
                            gb[f] += g[t * nf + f];
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(gx) = self.slot(grads, *input) {
                    for (x, &idx) in g.iter().zip(argmax) {
                        gx[idx] += x;
                    }
                }
            }
            Op::GradReverse { a, lambda } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += -lambda * x);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let k = probs.len() / labels.len();
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..k {
                            let target = if c == label { 1.0 } else { 0.0 };
                            gl[r * k + c] += g[r] * (probs[r * k + c] - target);
                        }
                    }
                }
            }
            Op::BinaryCrossEntropy { p, targets, eps } => {
                let pd = self.value(*p);
                if let Some(gp) = self.slot(grads, *p) {
                    for i in 0..gp.len() {
                        // derivative evaluated at the clamped probability
                        let pc = pd[i].clamp(*eps, 1.0 - eps);
                        let t = targets[i];
                        gp[i] += g[i] * (-t / pc + (1.0 - t) / (1.0 - pc));
                    }
                }
            }
            Op::NormalizeMean { a, sum } => {
                let ad = self.value(*a);
                let n = ad.len() as f64;
                let dot: f64 = g.iter().zip(ad).map(|(x, y)| x * y).sum();
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += n * x / sum - n * dot / (sum * sum);
                    }
                }
            }
            Op::Blend { alpha, diff } => {
                if let Some(ga) = self.slot(grads, *alpha) {
                    for ((o, x), dv) in ga.iter_mut().zip(g).zip(diff) {
                        *o += x * dv;
                    }
                }
            }
        }
    }
}

/// Row softmax with max subtraction.
pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub(crate) fn bce(p: f64, target: f64, eps: f64) -> f64 {
    let pc = p.clamp(eps, 1.0 - eps);
    -(target * pc.ln() + (1.0 - target) * (1.0 - pc).ln())
}
