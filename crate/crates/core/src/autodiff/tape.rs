use super::tensor::{gemm, gemm_nt, gemm_tn};
use super::{AutodiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Concat(Vec<Var>),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    MeanRows {
        x: Var,
        segments: Vec<usize>,
        weights: Vec<f64>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ScatterAddRows {
        x: Var,
        index: Vec<usize>,
    },
    ColumnStandardize {
        x: Var,
        centered: Vec<f64>,
        std: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation; recording order is a
/// valid topological order for the reverse pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn shape_err(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize), AutodiffError> {
        let t = self.value(v);
        if t.is_matrix() {
            Ok((t.rows(), t.cols()))
        } else {
            Err(shape_err(format!("{what} expects a matrix, got {:?}", t.shape())))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(format!("matmul [{m},{k}]·[{k2},{n}]")));
        }
        let data = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.derived(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum of equal shapes, or a `[R,C]` matrix plus a `[C]`
    /// bias broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa == sb {
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect();
            let value = Tensor::new(sa, data)?;
            return Ok(self.derived(value, Op::Add(a, b), &[a, b]));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let bias = self.value(b).data().to_vec();
            let mut data = self.value(a).data().to_vec();
            for row in data.chunks_mut(sa[1]) {
                for (x, y) in row.iter_mut().zip(&bias) {
                    *x += y;
                }
            }
            let value = Tensor::new(sa, data)?;
            return Ok(self.derived(value, Op::AddBias(a, b), &[a, b]));
        }
        Err(shape_err(format!("add {sa:?} + {sb:?}")))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(shape_err(format!("{what} {sa:?} vs {sb:?}")))
        }
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| c * x);
        self.derived(value, Op::Scale(a, c), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.matrix(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        Ok(self.derived(value, Op::Transpose(a), &[a]))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat of nothing".into()));
        }
        let rows = self.matrix(parts[0], "concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix(p, "concat")?;
            if r != rows {
                return Err(shape_err(format!("concat rows {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.derived(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, sigmoid);
        self.derived(value, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + e^x)` in the overflow-safe form `max(x, 0) + ln(1 + e^-|x|)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.map(a, softplus);
        self.derived(value, Op::Softplus(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// Per-segment mean of matrix rows. Row `r` belongs to segment
    /// `segments[r]`; rows with `include[r] == false` are left out unless
    /// that would leave their segment empty, in which case the whole segment
    /// is averaged. Segments without rows produce zero rows.
    pub fn mean_rows(
        &mut self,
        x: Var,
        segments: &[usize],
        num_segments: usize,
        include: Option<&[bool]>,
    ) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix(x, "mean_rows")?;
        if segments.len() != rows || include.is_some_and(|m| m.len() != rows) {
            return Err(shape_err(format!(
                "mean_rows: {rows} rows, {} segment ids",
                segments.len()
            )));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(AutodiffError::IndexOutOfRange {
                index: bad,
                len: num_segments,
            });
        }
        let mut included = vec![0usize; num_segments];
        let mut total = vec![0usize; num_segments];
        for (r, &s) in segments.iter().enumerate() {
            total[s] += 1;
            if include.is_none_or(|m| m[r]) {
                included[s] += 1;
            }
        }
        let weights: Vec<f64> = segments
            .iter()
            .enumerate()
            .map(|(r, &s)| {
                if included[s] == 0 {
                    1.0 / total[s] as f64
                } else if include.is_none_or(|m| m[r]) {
                    1.0 / included[s] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let src = self.value(x).data();
        let mut data = vec![0.0; num_segments * cols];
        for (r, (&s, &w)) in segments.iter().zip(&weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let out = &mut data[s * cols..(s + 1) * cols];
            for (o, v) in out.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *o += w * v;
            }
        }
        let value = Tensor::matrix(num_segments, cols, data)?;
        Ok(self.derived(
            value,
            Op::MeanRows {
                x,
                segments: segments.to_vec(),
                weights,
            },
            &[x],
        ))
    }

    /// Output row `i` is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange {
                index: bad,
                len: rows,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::matrix(index.len(), cols, data)?;
        Ok(self.derived(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix(x, "slice_rows")?;
        if start > end || end > rows {
            return Err(shape_err(format!(
                "slice_rows: {start}..{end} of {rows} rows"
            )));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let value = Tensor::matrix(end - start, cols, data)?;
        Ok(self.derived(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Sums row `i` of `x` into output row `index[i]`, in input order.
    pub fn scatter_add_rows(
        &mut self,
        x: Var,
        index: &[usize],
        num_rows: usize,
    ) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix(x, "scatter_add_rows")?;
        if index.len() != rows {
            return Err(shape_err(format!(
                "scatter_add_rows: {rows} rows, {} indices",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= num_rows) {
            return Err(AutodiffError::IndexOutOfRange {
                index: bad,
                len: num_rows,
            });
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; num_rows * cols];
        for (r, &i) in index.iter().enumerate() {
            let out = &mut data[i * cols..(i + 1) * cols];
            for (o, v) in out.iter_mut().zip(&src[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        let value = Tensor::matrix(num_rows, cols, data)?;
        Ok(self.derived(
            value,
            Op::ScatterAddRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// `(X - colmean) / (colstd + eps)` with the population standard deviation.
    pub fn column_standardize(&mut self, x: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.matrix(x, "column_standardize")?;
        if rows == 0 {
            return Err(shape_err("column_standardize of zero rows".into()));
        }
        let src = self.value(x).data();
        let n = rows as f64;
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += src[r * cols + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let centered: Vec<f64> = src
            .iter()
            .enumerate()
            .map(|(i, v)| v - mean[i % cols])
            .collect();
        let mut std = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let d = centered[r * cols + c];
                std[c] += d * d;
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
        let data = centered
            .iter()
            .enumerate()
            .map(|(i, d)| d / (std[i % cols] + eps))
            .collect();
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.derived(
            value,
            Op::ColumnStandardize {
                x,
                centered,
                std,
                eps,
            },
            &[x],
        ))
    }

    /// Reverse pass from a one-element `loss`. Gradients are kept for leaves
    /// only; intermediate gradients are dropped once propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(seed.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(seed.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, delta: impl FnOnce() -> Tensor) {
        if self.nodes[to.0].requires_grad {
            accumulate(&mut grads[to.0], delta());
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shaped = |like: Var, data: Vec<f64>| {
            Tensor::new(self.value(like).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.send(grads, *a, || shaped(*a, gemm_nt(g.data(), bv.data(), m, n, k)));
                self.send(grads, *b, || shaped(*b, gemm_tn(av.data(), g.data(), m, k, n)));
            }
            Op::Add(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || g.clone());
            }
            Op::AddBias(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || {
                    let cols = g.cols();
                    let mut acc = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (s, v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    Tensor::vector(acc)
                });
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, || g.clone());
                self.send(grads, *b, || shaped(*b, g.data().iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let times = |other: &Tensor| {
                    g.data()
                        .iter()
                        .zip(other.data())
                        .map(|(x, y)| x * y)
                        .collect::<Vec<_>>()
                };
                self.send(grads, *a, || shaped(*a, times(bv)));
                self.send(grads, *b, || shaped(*b, times(av)));
            }
            Op::Scale(a, c) => {
                self.send(grads, *a, || shaped(*a, g.data().iter().map(|v| c * v).collect()));
            }
            Op::Transpose(a) => {
                self.send(grads, *a, || {
                    let (m, n) = (g.rows(), g.cols());
                    let mut data = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            data[j * m + i] = g.data()[i * n + j];
                        }
                    }
                    shaped(*a, data)
                });
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.send(grads, p, || {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        shaped(p, data)
                    });
                    offset += w;
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.send(grads, *a, || {
                    shaped(
                        *a,
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gv, s)| gv * s * (1.0 - s))
                            .collect(),
                    )
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.send(grads, *a, || {
                    shaped(
                        *a,
                        g.data()
                            .iter()
                            .zip(x.data())
                            .map(|(gv, xv)| gv * sigmoid(*xv))
                            .collect(),
                    )
                });
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.send(grads, *a, || Tensor::filled(self.value(*a).shape(), gv));
            }
            Op::MeanRows {
                x,
                segments,
                weights,
            } => {
                let cols = g.cols();
                self.send(grads, *x, || {
                    let mut data = vec![0.0; segments.len() * cols];
                    for (r, (&s, &w)) in segments.iter().zip(weights).enumerate() {
                        let src = &g.data()[s * cols..(s + 1) * cols];
                        for (o, v) in data[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *o = w * v;
                        }
                    }
                    shaped(*x, data)
                });
            }
            Op::GatherRows { x, index } => {
                let cols = g.cols();
                self.send(grads, *x, || {
                    let mut data = vec![0.0; self.value(*x).numel()];
                    for (r, &i) in index.iter().enumerate() {
                        let src = &g.data()[r * cols..(r + 1) * cols];
                        for (o, v) in data[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    shaped(*x, data)
                });
            }
            Op::SliceRows { x, start } => {
                let cols = g.cols();
                self.send(grads, *x, || {
                    let mut data = vec![0.0; self.value(*x).numel()];
                    data[start * cols..start * cols + g.numel()].copy_from_slice(g.data());
                    shaped(*x, data)
                });
            }
            Op::ScatterAddRows { x, index } => {
                let cols = g.cols();
                self.send(grads, *x, || {
                    let mut data = Vec::with_capacity(index.len() * cols);
                    for &i in index {
                        data.extend_from_slice(&g.data()[i * cols..(i + 1) * cols]);
                    }
                    shaped(*x, data)
                });
            }
            Op::ColumnStandardize {
                x,
                centered,
                std,
                eps,
            } => {
                let (rows, cols) = (g.rows(), g.cols());
                self.send(grads, *x, || {
                    let n = rows as f64;
                    let mut data = vec![0.0; rows * cols];
                    for c in 0..cols {
                        let s = std[c] + eps;
                        let mut g_mean = 0.0;
                        let mut g_dot = 0.0;
                        for r in 0..rows {
                            let gv = g.data()[r * cols + c];
                            g_mean += gv;
                            g_dot += gv * centered[r * cols + c];
                        }
                        g_mean /= n;
                        // d std / d x_r = centered_r / (n * std); zero when the column is constant
                        let through_std = if std[c] > 0.0 {
                            g_dot / (s * s * n * std[c])
                        } else {
                            0.0
                        };
                        for r in 0..rows {
                            let i = r * cols + c;
                            data[i] = (g.data()[i] - g_mean) / s - through_std * centered[i];
                        }
                    }
                    shaped(*x, data)
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn closed_form_activations() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::vector(vec![0.0]));
        let s = t.sigmoid(z);
        let sp = t.softplus(z);
        assert_eq!(t.value(s).data(), &[0.5]);
        assert!((t.value(sp).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!((t.value(sp).data()[0] - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::vector(vec![1000.0, -1000.0]));
        let sp = t.softplus(z);
        assert_eq!(t.value(sp).data(), &[1000.0, 0.0]);
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).data(), &[1.0, 0.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i = t.constant(Tensor::eye(3));
        let av = t.constant(a.clone());
        let out = t.matmul(i, av).unwrap();
        assert_eq!(t.value(out), &a);
        assert!(t.matmul(av, av).is_err());
    }

    #[test]
    fn standardize_two_rows() {
        let mut t = Tape::new();
        let x = t.constant(mat(2, 1, &[1.0, 3.0]));
        let y = t.column_standardize(x, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn standardize_moments() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..40).map(|i| ((i * 7919) % 31) as f64 * 0.37 - 2.0).collect();
        let x = t.constant(mat(10, 4, &data));
        let y = t.column_standardize(x, 0.0).unwrap();
        let y = t.value(y);
        for c in 0..4 {
            let col: Vec<f64> = (0..10).map(|r| y.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() <= 1e-12);
            assert!((var.sqrt() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.param(mat(2, 3, &[0.1, -2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &Tensor::filled(&[2, 3], 1.0));
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![2.0, 3.0]));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![2.0, 3.0]));
        assert!(matches!(t.backward(w), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::vector(vec![1.0]));
        let c = t.constant(Tensor::vector(vec![5.0]));
        let p = t.mul(w, c).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[5.0]);
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_none());
    }

    #[test]
    fn index_ops_validate() {
        let mut t = Tape::new();
        let x = t.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(matches!(
            t.gather_rows(x, &[0, 2]),
            Err(AutodiffError::IndexOutOfRange { index: 2, len: 2 })
        ));
        assert!(t.scatter_add_rows(x, &[0, 5], 3).is_err());
        assert!(t.scatter_add_rows(x, &[0], 3).is_err());
        assert!(t.mean_rows(x, &[0, 1], 1, None).is_err());
        let g = t.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(g).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = t.scatter_add_rows(x, &[1, 1], 3).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 0.0, 4.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_rows_respects_inclusion() {
        let mut t = Tape::new();
        let x = t.constant(mat(4, 1, &[1.0, 2.0, 10.0, 20.0]));
        let m = t
            .mean_rows(x, &[0, 0, 1, 1], 3, Some(&[true, false, false, false]))
            .unwrap();
        // segment 1 has no included rows so falls back to all of them
        assert_eq!(t.value(m).data(), &[1.0, 15.0, 0.0]);
    }

    #[test]
    fn broadcast_bias_and_concat() {
        let mut t = Tape::new();
        let a = t.param(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.param(Tensor::vector(vec![10.0, 20.0]));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
        let c = t.concat(&[a, s]).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 4]);
        assert_eq!(t.value(c).row(1), &[3.0, 4.0, 13.0, 24.0]);
        let total = t.sum(c);
        let g = t.backward(total).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.get(a).unwrap().data(), &[2.0; 4]);
        let bad = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(t.add(a, bad).is_err());
    }
}
