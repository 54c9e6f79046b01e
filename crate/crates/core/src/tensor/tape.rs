use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `m×n + 1×n`
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    ClampMin(Var, f64),
    Abs(Var),
    SmoothL1(Var, f64),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Mean over rows of `-log softmax(row)[target]`.
    CrossEntropy(Var, Vec<usize>),
    #[cfg(test)]
    FaultySquare(Var),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Single-threaded recording graph for one training step.
///
/// Every value is a row-major `rows × cols` matrix. Values are held in f64;
/// parameters enter as f32 and gradients leave as f32.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every leaf of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        debug_assert!(
            matches!(op, Op::Leaf) || value.iter().all(|v| v.is_finite()),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        let data = n.value.iter().map(|&x| x as f32).collect();
        Tensor::new(&[n.rows, n.cols], data).expect("node dims are consistent")
    }

    /// Records a constant; it never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::shape("constant", &[rows, cols], &[value.len()]));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.matrix_dims()?;
        let value = t.data().iter().map(|&x| x as f64).collect();
        self.constant(r, c, value)
    }

    /// Leaf that reports a gradient regardless of any parameter store.
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::shape("input", &[rows, cols], &[value.len()]));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, true))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let (rows, cols) = p
            .tensor
            .matrix_dims()
            .expect("parameters are at most 2-D");
        let value = p.tensor.data().iter().map(|&x| x as f64).collect();
        let v = self.push(rows, cols, value, Op::Leaf, p.trainable());
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (r, c) = self.dims(a);
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, value, rec, ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, value, rec, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`, the layout of a linear layer with weight `[d_out, d_in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(arow, &bv[j * k..(j + 1) * k]));
            }
        }
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).iter().any(|&y| y == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// Broadcast-adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r, n2) = self.dims(row);
        if r != 1 || n != n2 {
            return Err(Error::shape("add_row", &[m, n], &[r, n2]));
        }
        let rv = self.value(row);
        let value = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let ng = self.needs(&[a, row]);
        Ok(self.push(m, n, value, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Var {
        self.map(
            a,
            |x| {
                if x.abs() < beta {
                    0.5 * x * x / beta
                } else {
                    x.abs() - 0.5 * beta
                }
            },
            Op::SmoothL1(a, beta),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.needs(&[a]);
        self.push(m, n, value, Op::SoftmaxRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.needs(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.needs(&[a]);
        self.push(1, 1, vec![s], Op::Mean(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > n {
            return Err(Error::Contract(format!(
                "column slice {start}..{end} out of range for {m}×{n}"
            )));
        }
        let value = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let ng = self.needs(&[a]);
        Ok(self.push(m, end - start, value, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.dims(p).0,
            None => return Err(Error::Contract("concat of zero parts".into())),
        };
        if let Some(&bad) = parts.iter().find(|&&p| self.dims(p).0 != m) {
            let d = self.dims(bad);
            return Err(Error::shape("concat_cols", &[m], &[d.0, d.1]));
        }
        let n: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut value = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.dims(p).1;
                value.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(m, n, value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Contract(format!("row {bad} out of range for {m} rows")));
        }
        let av = self.value(a);
        let value = rows
            .iter()
            .flat_map(|&r| av[r * n..(r + 1) * n].iter().copied())
            .collect();
        let ng = self.needs(&[a]);
        Ok(self.push(rows.len(), n, value, Op::GatherRows(a, rows.to_vec()), ng))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", &[m, n], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!("target class {bad} out of range for {n} logits")));
        }
        let lv = self.value(logits);
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &lv[i * n..(i + 1) * n];
                log_sum_exp(row) - row[t]
            })
            .sum();
        let ng = self.needs(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![total / m.max(1) as f64],
            Op::CrossEntropy(logits, targets.to_vec()),
            ng,
        ))
    }

    #[cfg(test)]
    pub(crate) fn faulty_square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::FaultySquare(a))
    }

    /// Computes gradients of the scalar `loss` with respect to all leaves.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got {r}×{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagates `loss` and accumulates f32 gradients into every
    /// trainable parameter reachable from it. Frozen parameters are skipped.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (&id, &var) in &self.params {
            let Some(g) = grads.get(var) else { continue };
            let p = store.get_mut(id);
            if !p.trainable() {
                continue;
            }
            let buf = p.tensor.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += x as f32;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += x * gv;
                            }
                        }
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |da| {
                    for i in 0..m {
                        let drow = &mut da[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, y) in drow.iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                                *d += gv * y;
                            }
                        }
                    }
                });
                self.acc(grads, *b, |db| {
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (d, x) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *d += gv * x;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                self.acc(grads, *b, |d| axpy(d, 1.0, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                self.acc(grads, *b, |d| axpy(d, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |d| {
                    for ((d, gv), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv / y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (((d, gv), x), y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= gv * x / (y * y);
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = node.cols;
                self.acc(grads, *a, |d| axpy(d, 1.0, g));
                self.acc(grads, *row, |d| {
                    for grow in g.chunks(n) {
                        axpy(d, 1.0, grow);
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |d| axpy(d, *s, g)),
            Op::AddScalar(a) => self.acc(grads, *a, |d| axpy(d, 1.0, g)),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |d| {
                for ((d, gv), y) in d.iter_mut().zip(g).zip(out) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            Op::SoftmaxRows(a) => {
                let n = node.cols;
                self.acc(grads, *a, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let inner = dot(grow, yrow);
                        for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - inner);
                        }
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick_a = |x: f64, y: f64| if is_max { x >= y } else { x <= y };
                self.acc(grads, *a, |d| {
                    for (((d, gv), x), y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        if pick_a(*x, *y) {
                            *d += gv;
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for (((d, gv), x), y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        if !pick_a(*x, *y) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a);
                self.acc(grads, *a, |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                        if *x > *floor {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += gv;
                        } else if *x < 0.0 {
                            *d -= gv;
                        }
                    }
                });
            }
            Op::SmoothL1(a, beta) => {
                let av = self.value(*a);
                self.acc(grads, *a, |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                        let slope = if x.abs() < *beta { x / beta } else { x.signum() };
                        *d += gv * slope;
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SliceCols(a, start) => {
                let width = node.cols;
                let n = self.dims(*a).1;
                self.acc(grads, *a, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(g.chunks(width)) {
                        axpy(&mut drow[*start..*start + width], 1.0, grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    self.acc(grads, p, |d| {
                        for (drow, grow) in d.chunks_mut(c).zip(g.chunks(n)) {
                            axpy(drow, 1.0, &grow[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::GatherRows(a, rows) => {
                let n = node.cols;
                self.acc(grads, *a, |d| {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut d[r * n..(r + 1) * n], 1.0, &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::CrossEntropy(logits, targets) => {
                let n = self.dims(*logits).1;
                let lv = self.value(*logits);
                let scale = g[0] / targets.len().max(1) as f64;
                self.acc(grads, *logits, |d| {
                    for (i, &t) in targets.iter().enumerate() {
                        let mut p = lv[i * n..(i + 1) * n].to_vec();
                        softmax_in_place(&mut p);
                        p[t] -= 1.0;
                        axpy(&mut d[i * n..(i + 1) * n], scale, &p);
                    }
                });
            }
            #[cfg(test)]
            Op::FaultySquare(a) => {
                // Wrong on purpose: the true derivative is 2x.
                let av = self.value(*a);
                self.acc(grads, *a, |d| {
                    for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * 3.0 * x;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums let the compiler vectorize.
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
