//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every tensor in the pipeline is an `Array2<f64>`; vectors are stored as
//! `(1, C)` or `(N, 1)` and scalars as `(1, 1)`. A [`Graph`] is rebuilt per
//! optimization step: leaves are inserted for trainable parameters, the
//! forward pass records one node per op, and [`Graph::backward`] walks the
//! tape in reverse. `detach` cuts the tape, which is how every one-way
//! correlation contract in the model is enforced.

use ndarray::{s, Array2, Axis};
use std::rc::Rc;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `(N,C) + (1,C)` row broadcast.
    AddRow(Var, Var),
    /// `(N,C) * (1,1)` scalar broadcast.
    MulScalar(Var, Var),
    /// `(N,C) * (N,1)` column broadcast.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Tanh(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    /// `aᵀ · b`
    MatMulTN(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SumAll(Var),
    SumRows(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    /// Exclusive prefix sum along each row.
    CumsumExclusive(Var),
    /// Row-major reshape (element count preserved).
    Reshape(Var),
    /// `(G*k, C) -> (G, C)`: sum over consecutive groups of `k` rows.
    SumRowGroups(Var, usize),
    /// Bilinear lookup into a feature plane stored as `(nu*nv, C)`.
    PlaneInterp {
        plane: Var,
        coords: Var,
        nu: usize,
        nv: usize,
    },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Copies the current value into a fresh constant; gradients never flow
    /// back through the result.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
        op: Op,
    ) -> Var {
        let value = f(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        debug_assert_eq!(self.shape(bias).0, 1);
        self.binary(a, bias, |x, y| x + &y.row(0), Op::AddRow(a, bias))
    }

    pub fn mul_scalar(&mut self, a: Var, scalar: Var) -> Var {
        debug_assert_eq!(self.shape(scalar), (1, 1));
        self.binary(a, scalar, |x, y| x * y[[0, 0]], Op::MulScalar(a, scalar))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.shape(col).1, 1);
        self.binary(a, col, |x, y| x * y, Op::MulCol(a, col))
    }

    fn unary(&mut self, a: Var, f: impl Fn(&Array2<f64>) -> Array2<f64>, op: Op) -> Var {
        let value = f(&self.nodes[a.0].value);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddConst(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| v.max(0.0)), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(sigmoid), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::tanh), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::exp), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::ln), Op::Ln(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::sin), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::cos), Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::abs), Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(|v| v * v), Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.mapv(f64::sqrt), Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.mapv(|v| v.clamp(lo, hi)), Op::Clamp(a, lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(y), Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.dot(&y.t()), Op::MatMulNT(a, b))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x.t().dot(y), Op::MatMulTN(a, b))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.unary(a, |x| softmax_rows(x), Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        self.unary(a, |x| log_softmax_rows(x), Op::LogSoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut value = Array2::zeros((n, total));
        let mut off = 0;
        for p in parts {
            let w = self.shape(*p).1;
            value.slice_mut(s![.., off..off + w]).assign(&self.nodes[p.0].value);
            off += w;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        self.unary(a, |x| x.slice(s![.., start..end]).to_owned(), Op::SliceCols(a, start, end))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.unary(a, |x| Array2::from_elem((1, 1), x.sum()), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let col = x.sum_axis(Axis(1));
                col.insert_axis(Axis(1))
            },
            Op::SumRows(a),
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let value = {
            let x = &self.nodes[a.0].value;
            let mut out = Array2::zeros((idx.len(), x.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&x.row(i));
            }
            out
        };
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx), ng)
    }

    pub fn cumsum_exclusive(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| {
                let mut out = Array2::zeros(x.dim());
                for (mut orow, xrow) in out.rows_mut().into_iter().zip(x.rows()) {
                    let mut acc = 0.0;
                    for (o, &v) in orow.iter_mut().zip(xrow.iter()) {
                        *o = acc;
                        acc += v;
                    }
                }
                out
            },
            Op::CumsumExclusive(a),
        )
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        debug_assert_eq!(self.nodes[a.0].value.len(), rows * cols);
        self.unary(
            a,
            |x| {
                x.to_owned()
                    .into_shape((rows, cols))
                    .expect("reshape: row-major layout")
            },
            Op::Reshape(a),
        )
    }

    pub fn sum_row_groups(&mut self, a: Var, group: usize) -> Var {
        self.unary(
            a,
            |x| {
                let (rows, cols) = x.dim();
                debug_assert_eq!(rows % group, 0);
                let mut out = Array2::zeros((rows / group, cols));
                for r in 0..rows {
                    let mut dst = out.row_mut(r / group);
                    dst += &x.row(r);
                }
                out
            },
            Op::SumRowGroups(a, group),
        )
    }

    /// Bilinear interpolation of `plane` (shape `(nu*nv, C)`, row index
    /// `u * nv + v`) at `coords` (shape `(P, 2)` in grid units). Coordinates
    /// are clamped to the grid; the result is differentiable with respect to
    /// both the plane values and the coordinates.
    pub fn plane_interp(&mut self, plane: Var, coords: Var, nu: usize, nv: usize) -> Var {
        let value = {
            let p = &self.nodes[plane.0].value;
            let c = &self.nodes[coords.0].value;
            let channels = p.ncols();
            let mut out = Array2::zeros((c.nrows(), channels));
            for r in 0..c.nrows() {
                let (i0, j0, fu, fv) = bilinear_cell(c[[r, 0]], c[[r, 1]], nu, nv);
                let w00 = (1.0 - fu) * (1.0 - fv);
                let w01 = (1.0 - fu) * fv;
                let w10 = fu * (1.0 - fv);
                let w11 = fu * fv;
                let base00 = i0 * nv + j0;
                for ch in 0..channels {
                    out[[r, ch]] = w00 * p[[base00, ch]]
                        + w01 * p[[base00 + 1, ch]]
                        + w10 * p[[base00 + nv, ch]]
                        + w11 * p[[base00 + nv + 1, ch]];
                }
            }
            out
        };
        let ng = self.ng(plane) || self.ng(coords);
        self.push(value, Op::PlaneInterp { plane, coords, nu, nv }, ng)
    }

    fn accumulate(&mut self, v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Runs the backward pass from a `(1,1)` loss node.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward seed must be scalar");
        self.nodes[loss.0].grad = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            // Moving the op out avoids aliasing self while we accumulate.
            match &self.nodes[i].op {
                Op::Leaf | Op::Constant => {}
                &Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                &Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, -g);
                }
                &Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                &Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let ga = &g / bv;
                    let gb = -&g * &self.nodes[a.0].value / (bv * bv);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                &Op::AddRow(a, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(a, g);
                    self.accumulate(bias, gb);
                }
                &Op::MulScalar(a, sc) => {
                    let sv = self.nodes[sc.0].value[[0, 0]];
                    let gs = (&g * &self.nodes[a.0].value).sum();
                    self.accumulate(a, &g * sv);
                    self.accumulate(sc, Array2::from_elem((1, 1), gs));
                }
                &Op::MulCol(a, col) => {
                    let ga = &g * &self.nodes[col.0].value;
                    let gc = (&g * &self.nodes[a.0].value)
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    self.accumulate(a, ga);
                    self.accumulate(col, gc);
                }
                &Op::Scale(a, k) => self.accumulate(a, &g * k),
                &Op::AddConst(a) => self.accumulate(a, g),
                &Op::Relu(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, ga);
                }
                &Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &(y * &y.mapv(|v| 1.0 - v));
                    self.accumulate(a, ga);
                }
                &Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &y.mapv(|v| 1.0 - v * v);
                    self.accumulate(a, ga);
                }
                &Op::Exp(a) => {
                    let ga = &g * &self.nodes[i].value;
                    self.accumulate(a, ga);
                }
                &Op::Ln(a) => {
                    let ga = &g / &self.nodes[a.0].value;
                    self.accumulate(a, ga);
                }
                &Op::Sin(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(f64::cos);
                    self.accumulate(a, ga);
                }
                &Op::Cos(a) => {
                    let ga = -&g * &self.nodes[a.0].value.mapv(f64::sin);
                    self.accumulate(a, ga);
                }
                &Op::Abs(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(a, ga);
                }
                &Op::Square(a) => {
                    let ga = 2.0 * &g * &self.nodes[a.0].value;
                    self.accumulate(a, ga);
                }
                &Op::Sqrt(a) => {
                    let ga = 0.5 * &g / &self.nodes[i].value;
                    self.accumulate(a, ga);
                }
                &Op::Clamp(a, lo, hi) => {
                    let ga = &g * &self.nodes[a.0]
                        .value
                        .mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                    self.accumulate(a, ga);
                }
                &Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                &Op::MatMulNT(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value);
                    let gb = g.t().dot(&self.nodes[a.0].value);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                &Op::MatMulTN(a, b) => {
                    let ga = self.nodes[b.0].value.dot(&g.t());
                    let gb = self.nodes[a.0].value.dot(&g);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                &Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    self.accumulate(a, ga);
                }
                &Op::LogSoftmaxRows(a) => {
                    let soft = self.nodes[i].value.mapv(f64::exp);
                    let rowsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(&soft * &rowsum);
                    self.accumulate(a, ga);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(p).1;
                        let gp = g.slice(s![.., off..off + w]).to_owned();
                        off += w;
                        self.accumulate(p, gp);
                    }
                }
                &Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    ga.slice_mut(s![.., start..end]).assign(&g);
                    self.accumulate(a, ga);
                }
                &Op::SumAll(a) => {
                    let ga = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                    self.accumulate(a, ga);
                }
                &Op::SumRows(a) => {
                    let (n, c) = self.nodes[a.0].value.dim();
                    let mut ga = Array2::zeros((n, c));
                    for r in 0..n {
                        ga.row_mut(r).fill(g[[r, 0]]);
                    }
                    self.accumulate(a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let mut ga = Array2::zeros(self.nodes[a.0].value.dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(r);
                    }
                    self.accumulate(a, ga);
                }
                &Op::CumsumExclusive(a) => {
                    // d/dx[k] = sum_{j>k} g[j]
                    let (n, c) = g.dim();
                    let mut ga = Array2::zeros((n, c));
                    for r in 0..n {
                        let mut acc = 0.0;
                        for k in (0..c).rev() {
                            ga[[r, k]] = acc;
                            acc += g[[r, k]];
                        }
                    }
                    self.accumulate(a, ga);
                }
                &Op::Reshape(a) => {
                    let dim = self.nodes[a.0].value.dim();
                    let ga = g.into_shape(dim).expect("reshape backward");
                    self.accumulate(a, ga);
                }
                &Op::SumRowGroups(a, group) => {
                    let (rows, cols) = self.nodes[a.0].value.dim();
                    let mut ga = Array2::zeros((rows, cols));
                    for r in 0..rows {
                        ga.row_mut(r).assign(&g.row(r / group));
                    }
                    self.accumulate(a, ga);
                }
                &Op::PlaneInterp { plane, coords, nu, nv } => {
                    let channels = self.nodes[plane.0].value.ncols();
                    let c = self.nodes[coords.0].value.clone();
                    let p = &self.nodes[plane.0].value;
                    let mut gp = Array2::zeros(p.dim());
                    let mut gc = Array2::zeros(c.dim());
                    for r in 0..c.nrows() {
                        let (i0, j0, fu, fv) = bilinear_cell(c[[r, 0]], c[[r, 1]], nu, nv);
                        let base00 = i0 * nv + j0;
                        let w = [
                            (base00, (1.0 - fu) * (1.0 - fv)),
                            (base00 + 1, (1.0 - fu) * fv),
                            (base00 + nv, fu * (1.0 - fv)),
                            (base00 + nv + 1, fu * fv),
                        ];
                        let mut du = 0.0;
                        let mut dv = 0.0;
                        for ch in 0..channels {
                            let go = g[[r, ch]];
                            for &(idx, wi) in &w {
                                gp[[idx, ch]] += wi * go;
                            }
                            let f00 = p[[base00, ch]];
                            let f01 = p[[base00 + 1, ch]];
                            let f10 = p[[base00 + nv, ch]];
                            let f11 = p[[base00 + nv + 1, ch]];
                            du += go * ((1.0 - fv) * (f10 - f00) + fv * (f11 - f01));
                            dv += go * ((1.0 - fu) * (f01 - f00) + fu * (f11 - f10));
                        }
                        // no coordinate gradient where the lookup clamped
                        let u_in = c[[r, 0]] >= 0.0 && c[[r, 0]] <= (nu - 1) as f64;
                        let v_in = c[[r, 1]] >= 0.0 && c[[r, 1]] <= (nv - 1) as f64;
                        gc[[r, 0]] = if u_in { du } else { 0.0 };
                        gc[[r, 1]] = if v_in { dv } else { 0.0 };
                    }
                    self.accumulate(plane, gp);
                    self.accumulate(coords, gc);
                }
            }
        }
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

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Cell index and fractional offsets for a bilinear lookup, with clamping to
/// the valid grid interior.
fn bilinear_cell(u: f64, v: f64, nu: usize, nv: usize) -> (usize, usize, f64, f64) {
    let uc = u.clamp(0.0, (nu - 1) as f64);
    let vc = v.clamp(0.0, (nv - 1) as f64);
    let i0 = (uc.floor() as usize).min(nu - 2);
    let j0 = (vc.floor() as usize).min(nv - 2);
    (i0, j0, uc - i0 as f64, vc - j0 as f64)
}

/// Finite-difference gradient checking used by the test suites.
pub mod check {
    use ndarray::Array2;

    /// Central finite-difference gradient of `f` at `x`.
    pub fn fd_grad(f: &mut dyn FnMut(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let orig = xp[[r, c]];
            xp[[r, c]] = orig + h;
            let fp = f(&xp);
            xp[[r, c]] = orig - h;
            let fm = f(&xp);
            xp[[r, c]] = orig;
            g[[r, c]] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Max relative error between analytic and finite-difference gradients.
    pub fn rel_err(analytic: &Array2<f64>, fd: &Array2<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in analytic.iter().zip(fd.iter()) {
            let denom = a.abs().max(b.abs()).max(1e-6);
            worst = worst.max((a - b).abs() / denom);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::check::{fd_grad, rel_err};
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_softmax_grads_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a0 = randn(&mut rng, 4, 5);
        let b0 = randn(&mut rng, 5, 3);

        let run = |a: &Array2<f64>, b: &Array2<f64>| -> (f64, Array2<f64>, Array2<f64>) {
            let mut g = Graph::new();
            let av = g.leaf(a.clone());
            let bv = g.leaf(b.clone());
            let m = g.matmul(av, bv);
            let sm = g.softmax_rows(m);
            let sq = g.square(sm);
            let l = g.sum_all(sq);
            g.backward(l);
            (g.scalar(l), g.grad(av).unwrap().clone(), g.grad(bv).unwrap().clone())
        };
        let (_, ga, gb) = run(&a0, &b0);
        let fa = fd_grad(&mut |a| run(a, &b0).0, &a0, 1e-6);
        let fb = fd_grad(&mut |b| run(&a0, b).0, &b0, 1e-6);
        assert!(rel_err(&ga, &fa) < 1e-6, "{}", rel_err(&ga, &fa));
        assert!(rel_err(&gb, &fb) < 1e-6);
    }

    #[test]
    fn cumsum_exclusive_and_backward() {
        let mut g = Graph::new();
        let x = g.leaf(ndarray::arr2(&[[1.0, 2.0, 3.0]]));
        let y = g.cumsum_exclusive(x);
        assert_eq!(g.value(y), &ndarray::arr2(&[[0.0, 1.0, 3.0]]));
        let w = g.constant(ndarray::arr2(&[[10.0, 1.0, 0.1]]));
        let p = g.mul(y, w);
        let l = g.sum_all(p);
        g.backward(l);
        // dL/dx[k] = sum_{j>k} w[j]
        assert_eq!(g.grad(x).unwrap(), &ndarray::arr2(&[[1.1, 0.1, 0.0]]));
    }

    #[test]
    fn plane_interp_matches_scalar_bilinear_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nu = 5;
        let nv = 4;
        let plane0 = randn(&mut rng, nu * nv, 3);
        let coords0 = Array2::from_shape_fn((10, 2), |(_, j)| {
            if j == 0 {
                rng.gen_range(0.0..(nu - 1) as f64)
            } else {
                rng.gen_range(0.0..(nv - 1) as f64)
            }
        });

        // scalar-loop oracle
        let oracle = |plane: &Array2<f64>, u: f64, v: f64, ch: usize| -> f64 {
            let i0 = (u.floor() as usize).min(nu - 2);
            let j0 = (v.floor() as usize).min(nv - 2);
            let fu = u - i0 as f64;
            let fv = v - j0 as f64;
            let f = |i: usize, j: usize| plane[[i * nv + j, ch]];
            (1.0 - fu) * (1.0 - fv) * f(i0, j0)
                + (1.0 - fu) * fv * f(i0, j0 + 1)
                + fu * (1.0 - fv) * f(i0 + 1, j0)
                + fu * fv * f(i0 + 1, j0 + 1)
        };

        let run = |plane: &Array2<f64>, coords: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut g = Graph::new();
            let pv = g.leaf(plane.clone());
            let cv = g.constant(coords.clone());
            let out = g.plane_interp(pv, cv, nu, nv);
            let sq = g.square(out);
            let l = g.sum_all(sq);
            g.backward(l);
            (g.scalar(l), g.grad(pv).unwrap().clone())
        };

        {
            let mut g = Graph::new();
            let pv = g.constant(plane0.clone());
            let cv = g.constant(coords0.clone());
            let out = g.plane_interp(pv, cv, nu, nv);
            for r in 0..coords0.nrows() {
                for ch in 0..3 {
                    let expect = oracle(&plane0, coords0[[r, 0]], coords0[[r, 1]], ch);
                    assert!((g.value(out)[[r, ch]] - expect).abs() < 1e-12);
                }
            }
        }

        let (_, gp) = run(&plane0, &coords0);
        let fp = fd_grad(&mut |p| run(p, &coords0).0, &plane0, 1e-6);
        assert!(rel_err(&gp, &fp) < 1e-6);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(ndarray::arr2(&[[2.0]]));
        let d = g.detach(x);
        let y = g.square(d);
        let l = g.sum_all(y);
        g.backward(l);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn log_softmax_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, 3, 6);
        let w0 = randn(&mut rng, 3, 6);
        let run = |x: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.constant(w0.clone());
            let ls = g.log_softmax_rows(xv);
            let p = g.mul(ls, wv);
            let l = g.sum_all(p);
            g.backward(l);
            (g.scalar(l), g.grad(xv).unwrap().clone())
        };
        let (_, gx) = run(&x0);
        let fx = fd_grad(&mut |x| run(x).0, &x0, 1e-6);
        assert!(rel_err(&gx, &fx) < 1e-6);
    }
}
