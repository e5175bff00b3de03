//! Minimal reverse-mode automatic differentiation over f64 matrices.
//!
//! A `Tape` records one forward computation; `backward` walks it in
//! reverse and accumulates gradients. Everything runs in double
//! precision so finite-difference checks are meaningful.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf { param: Option<String> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    /// a * b^T
    MatMulNt(Var, Var),
    /// broadcast a 1 x d row over all rows
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MaxRows(Var, Vec<usize>),
    Reshape(Var),
    MeanAll(Var),
    /// mean squared difference against a constant target
    MseConst(Var, Array2<f64>),
    /// mean squared difference between two tracked values
    Mse(Var, Var),
    /// mean cross-entropy of row logits against class targets;
    /// targets of usize::MAX are masked out
    CrossEntropyRows(Var, Vec<usize>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not reported for it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Named parameter; its gradient appears in `backward`'s map.
    pub fn param(&mut self, name: &str, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf { param: Some(name.to_string()) })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[row.0].value;
        self.push(v, Op::MulRow(a, row))
    }

    /// Adds a non-differentiated constant (attention masks and the like).
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    const LN_EPS: f64 = 1e-8;

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / d;
            let inv = 1.0 / (var + Self::LN_EPS).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(v, Op::LayerNormRows(a))
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = &self.nodes[table.0].value;
        let mut v = Array2::zeros((indices.len(), t.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            v.row_mut(i).assign(&t.row(ix));
        }
        self.push(v, Op::GatherRows(table, indices.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(0), &views).expect("row concat");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(1), &views).expect("col concat");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Column-wise max over rows, yielding a 1 x d row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::from_elem((1, x.ncols()), f64::NEG_INFINITY);
        let mut argmax = vec![0usize; x.ncols()];
        for (r, row) in x.rows().into_iter().enumerate() {
            for (c, &val) in row.iter().enumerate() {
                if val > v[[0, c]] {
                    v[[0, c]] = val;
                    argmax[c] = r;
                }
            }
        }
        self.push(v, Op::MaxRows(a, argmax))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("reshape size");
        self.push(v, Op::Reshape(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    pub fn mse_const(&mut self, a: Var, target: &Array2<f64>) -> Var {
        let diff = &self.nodes[a.0].value - target;
        let v = Array2::from_elem((1, 1), diff.mapv(|x| x * x).sum() / diff.len() as f64);
        self.push(v, Op::MseConst(a, target.clone()))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let v = Array2::from_elem((1, 1), diff.mapv(|x| x * x).sum() / diff.len() as f64);
        self.push(v, Op::Mse(a, b))
    }

    /// Mean cross-entropy over rows; targets equal to usize::MAX are ignored.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = &self.nodes[logits.0].value;
        assert_eq!(x.nrows(), targets.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for (row, &t) in x.rows().into_iter().zip(targets) {
            if t == usize::MAX {
                continue;
            }
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.fold(0.0, |acc, &v| acc + (v - max).exp()).ln() + max;
            total += lse - row[t];
            count += 1;
        }
        let v = Array2::from_elem((1, 1), total / count.max(1) as f64);
        self.push(v, Op::CrossEntropyRows(logits, targets.to_vec()))
    }

    /// Reverse pass from a scalar root; returns gradients of named params.
    pub fn backward(&mut self, root: Var) -> BTreeMap<String, Array2<f64>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));

        let add_grad = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, g: Array2<f64>| {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..n).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, g.clone());
                    add_grad(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut grads, *a, g.clone());
                    add_grad(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    add_grad(&mut grads, a, ga);
                    add_grad(&mut grads, b, gb);
                }
                Op::Scale(a, c) => add_grad(&mut grads, *a, &g * *c),
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    add_grad(&mut grads, a, ga);
                    add_grad(&mut grads, b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = g.dot(&self.nodes[b.0].value);
                    let gb = g.t().dot(&self.nodes[a.0].value);
                    add_grad(&mut grads, a, ga);
                    add_grad(&mut grads, b, gb);
                }
                Op::AddRow(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_grad(&mut grads, *a, g);
                    add_grad(&mut grads, *row, grow);
                }
                Op::MulRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let ga = &g * &self.nodes[row.0].value;
                    let grow = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    add_grad(&mut grads, a, ga);
                    add_grad(&mut grads, row, grow);
                }
                Op::AddConst(a) => add_grad(&mut grads, *a, g),
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    add_grad(&mut grads, *a, &g * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = y * &g;
                    for (mut row, (yrow, grow)) in ga
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows().into_iter().zip(g.rows()))
                    {
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                        for (v, &yv) in row.iter_mut().zip(yrow.iter()) {
                            *v -= yv * dot;
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a) => {
                    let x = &self.nodes[a.0].value;
                    let xhat = &self.nodes[i].value;
                    let mut ga = Array2::zeros(x.dim());
                    let d = x.ncols() as f64;
                    for (r, (xrow, (hrow, grow))) in x
                        .rows()
                        .into_iter()
                        .zip(xhat.rows().into_iter().zip(g.rows()))
                        .enumerate()
                    {
                        let mean = xrow.sum() / d;
                        let var = xrow.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
                        let inv = 1.0 / (var + Self::LN_EPS).sqrt();
                        let gmean = grow.sum() / d;
                        let gh: f64 = grow.iter().zip(hrow.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
                        for (c, slot) in ga.row_mut(r).iter_mut().enumerate() {
                            *slot = inv * (grow[c] - gmean - hrow[c] * gh);
                        }
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::GatherRows(table, indices) => {
                    let t = &self.nodes[table.0].value;
                    let mut gt = Array2::zeros(t.dim());
                    for (i, &ix) in indices.iter().enumerate() {
                        let mut row = gt.row_mut(ix);
                        row += &g.row(i);
                    }
                    add_grad(&mut grads, *table, gt);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        let gp = g.slice(s![start..start + rows, ..]).to_owned();
                        add_grad(&mut grads, p, gp);
                        start += rows;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (a, start) = (*a, *start);
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    let mut dst = ga.slice_mut(s![start..start + g.nrows(), ..]);
                    dst += &g;
                    add_grad(&mut grads, a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (a, start) = (*a, *start);
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    let mut dst = ga.slice_mut(s![.., start..start + g.ncols()]);
                    dst += &g;
                    add_grad(&mut grads, a, ga);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for p in parts {
                        let cols = self.nodes[p.0].value.ncols();
                        let gp = g.slice(s![.., start..start + cols]).to_owned();
                        add_grad(&mut grads, p, gp);
                        start += cols;
                    }
                }
                Op::MaxRows(a, argmax) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    for (c, &r) in argmax.iter().enumerate() {
                        ga[[r, c]] += g[[0, c]];
                    }
                    add_grad(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let dim = self.nodes[a.0].value.dim();
                    let ga = g.into_shape_with_order(dim).expect("reshape grad");
                    add_grad(&mut grads, *a, ga);
                }
                Op::MeanAll(a) => {
                    let dim = self.nodes[a.0].value.dim();
                    let scale = g[[0, 0]] / (dim.0 * dim.1) as f64;
                    add_grad(&mut grads, *a, Array2::from_elem(dim, scale));
                }
                Op::MseConst(a, target) => {
                    let diff = &self.nodes[a.0].value - target;
                    let scale = 2.0 * g[[0, 0]] / diff.len() as f64;
                    add_grad(&mut grads, *a, diff * scale);
                }
                Op::Mse(a, b) => {
                    let (a, b) = (*a, *b);
                    let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
                    let scale = 2.0 * g[[0, 0]] / diff.len() as f64;
                    add_grad(&mut grads, a, &diff * scale);
                    add_grad(&mut grads, b, diff * -scale);
                }
                Op::CrossEntropyRows(logits, targets) => {
                    let x = &self.nodes[logits.0].value;
                    let count = targets.iter().filter(|&&t| t != usize::MAX).count().max(1);
                    let mut gl = Array2::zeros(x.dim());
                    for (r, &t) in targets.iter().enumerate() {
                        if t == usize::MAX {
                            continue;
                        }
                        let row = x.row(r);
                        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for (c, slot) in gl.row_mut(r).iter_mut().enumerate() {
                            let p = (row[c] - max).exp() / sum;
                            *slot = (p - if c == t { 1.0 } else { 0.0 }) * g[[0, 0]] / count as f64;
                        }
                    }
                    add_grad(&mut grads, *logits, gl);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = &grads[i] {
                    out.entry(name.clone())
                        .and_modify(|acc: &mut Array2<f64>| *acc += g)
                        .or_insert_with(|| g.clone());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences against the analytic gradient for a
    /// composite expression touching most ops.
    #[test]
    fn gradients_match_finite_differences() {
        let w0 = array![[0.3, -0.2, 0.5], [0.1, 0.7, -0.4], [0.2, 0.2, 0.1]];
        let b0 = array![[0.05, -0.1, 0.2]];
        let x0 = array![[1.0, -0.5, 0.25], [0.3, 0.8, -0.6]];

        let eval = |w: &Array2<f64>, b: &Array2<f64>, x: &Array2<f64>, want_grads: bool| {
            let mut tape = Tape::new();
            let wv = tape.param("w", w.clone());
            let bv = tape.param("b", b.clone());
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, wv);
            let h = tape.add_row(h, bv);
            let h = tape.relu(h);
            let n = tape.layer_norm_rows(h);
            let sm = tape.softmax_rows(n);
            let prod = tape.matmul_nt(sm, wv);
            let pooled = tape.max_rows(prod);
            let joined = tape.concat_cols(&[pooled, pooled]);
            let back = tape.slice_cols(joined, 1, 3);
            let loss_a = tape.mse_const(back, &array![[0.2, -0.3]]);
            let ce = tape.cross_entropy_rows(prod, &[1, 0]);
            let total = tape.add(loss_a, ce);
            let grads = if want_grads {
                Some(tape.backward(total))
            } else {
                None
            };
            (tape.scalar(total), grads)
        };

        let (_, grads) = eval(&w0, &b0, &x0, true);
        let grads = grads.unwrap();
        let eps = 1e-6;
        for (name, base) in [("w", &w0), ("b", &b0)] {
            let g = &grads[name];
            for r in 0..base.nrows() {
                for c in 0..base.ncols() {
                    let mut plus = base.clone();
                    plus[[r, c]] += eps;
                    let mut minus = base.clone();
                    minus[[r, c]] -= eps;
                    let (fp, _) = if name == "w" {
                        eval(&plus, &b0, &x0, false)
                    } else {
                        eval(&w0, &plus, &x0, false)
                    };
                    let (fm, _) = if name == "w" {
                        eval(&minus, &b0, &x0, false)
                    } else {
                        eval(&w0, &minus, &x0, false)
                    };
                    let fd = (fp - fm) / (2.0 * eps);
                    let an = g[[r, c]];
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        ((an - fd) / denom).abs() < 1e-5,
                        "{name}[{r},{c}]: analytic {an} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Array2::zeros((4, 259)));
        let ce = tape.cross_entropy_rows(logits, &[0, 5, 100, 258]);
        assert!((tape.scalar(ce) - (259f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let mut tape = Tape::new();
        let table = tape.param("t", array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let picked = tape.gather_rows(table, &[2, 0, 2]);
        let loss = tape.mean_all(picked);
        let grads = tape.backward(loss);
        // row 2 picked twice, row 1 never
        let gt = &grads["t"];
        assert!(gt[[1, 0]] == 0.0 && gt[[1, 1]] == 0.0);
        assert!((gt[[2, 0]] - 2.0 / 6.0).abs() < 1e-12);
    }
}
