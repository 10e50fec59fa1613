//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs. Nodes only carry gradients when at least one input is tracked, so
//! frozen parts of a computation (the teacher, data) cost nothing on the way
//! back.
//!
//! ```
//! use grace_core::numkit::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_scalar(), Some(6.0));
//! ```

use std::fmt;

use super::matrix::{log_softmax_unchecked, Matrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive whose backward rule lives outside this module.
///
/// `backward` receives the input values, the cached output and the upstream
/// gradient, and returns one gradient per input (`None` for inputs it does not
/// differentiate).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, upstream: &Matrix)
        -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransposed(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sum(Var),
    LogSoftmaxRows(Var, f64),
    RowNormalize(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    PickCols(Var, Vec<usize>),
    Center(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulTransposed(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Sum(..) => "sum",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::RowNormalize(..) => "row_normalize",
            Op::SelectRows(..) => "select_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::PickCols(..) => "pick_cols",
            Op::Center(..) => "center",
            Op::Custom(_, op) => op.name(),
        };
        f.write_str(name)
    }
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Append-only operation record.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it does not depend on any tracked
    /// leaf (or the output does not depend on it).
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Moves the gradient out; absent gradients become zeros of `shape`.
    pub fn take_or_zeros(&mut self, var: Var, shape: (usize, usize)) -> Matrix {
        self.grads
            .get_mut(var.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
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

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked(v)
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)
            .as_scalar()
            .expect("scalar() called on a non-scalar node")
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ`, the shape of a linear layer `x Wᵀ`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(Error::Shape(format!(
                "matmul_transposed {:?} by {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self.value(a).matmul_transposed(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMulTransposed(a, b), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let tracked = self.tracked(a);
        self.push(value, Op::Transpose(a), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// Elementwise quotient; a zero divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Div(a, b), tracked))
    }

    /// Adds a `1 × cols` row to every row of `a` (bias).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape(format!(
                "add_row: {:?} plus {:?}",
                (r, c),
                self.shape(row)
            )));
        }
        let bias = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(c.max(1)) {
            for (v, b) in chunk.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let tracked = self.tracked(a) || self.tracked(row);
        Ok(self.push(value, Op::AddRow(a, row), tracked))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, c), tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let tracked = self.tracked(a);
        self.push(value, Op::Tanh(a), tracked)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let tracked = self.tracked(a);
        self.push(value, Op::Exp(a), tracked)
    }

    /// Elementwise natural log; non-positive entries are a domain error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("ln of a non-positive entry".into()));
        }
        let value = self.value(a).map(f64::ln);
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Ln(a), tracked))
    }

    /// Elementwise square root; entries must be strictly positive so the
    /// derivative exists.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("sqrt of a non-positive entry".into()));
        }
        let value = self.value(a).map(f64::sqrt);
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Sqrt(a), tracked))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(value, Op::Sum(a), tracked)
    }

    /// Row-wise log-softmax of `a / temperature`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(Error::Shape("log_softmax of an empty row".into()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Domain(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(log_softmax_unchecked(src.row(i), temperature));
        }
        let tracked = self.tracked(a);
        Ok(self.push(
            Matrix::from_raw(r, c, data),
            Op::LogSoftmaxRows(a, temperature),
            tracked,
        ))
    }

    /// Scales every row to unit L2 norm. A zero row is a domain error naming
    /// the row.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let value = row_normalized(self.value(a))?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::RowNormalize(a), tracked))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let value = self.value(a).select_rows(&indices)?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::SelectRows(a, indices), tracked))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: {} columns vs {cols}",
                    m.cols()
                )));
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Matrix::from_raw(rows, cols, data), Op::ConcatRows(parts), tracked))
    }

    /// Picks entry `cols[r]` from each row `r`, giving an `rows × 1` column.
    pub fn pick_cols(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if cols.len() != r {
            return Err(Error::Shape(format!(
                "pick_cols: {} indices for {r} rows",
                cols.len()
            )));
        }
        if let Some(bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Shape(format!("pick_cols: column {bad} of {c}")));
        }
        let src = self.value(a);
        let data = cols.iter().enumerate().map(|(i, &j)| src.get(i, j)).collect();
        let tracked = self.tracked(a);
        Ok(self.push(Matrix::from_raw(r, 1, data), Op::PickCols(a, cols), tracked))
    }

    /// Double centering `H A H` of a square matrix.
    pub fn center(&mut self, a: Var) -> Result<Var> {
        let value = double_center(self.value(a))?;
        let tracked = self.tracked(a);
        Ok(self.push(value, Op::Center(a), tracked))
    }

    /// Records an externally defined primitive whose value the caller has
    /// already computed.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Matrix, op: Box<dyn CustomOp>) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.push(value, Op::Custom(inputs, op), tracked)
    }

    /// Gradients of the scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        if !self.tracked(output) {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut send = |v: Var, d: Matrix| {
            if !self.tracked(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot => *slot = Some(d),
            }
        };
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    send(*a, g.matmul_transposed(val(*b)));
                }
                if self.tracked(*b) {
                    send(*b, val(*a).transposed_matmul(g));
                }
            }
            Op::MatMulTransposed(a, b) => {
                // C = A Bᵀ: dA = G B, dB = Gᵀ A
                if self.tracked(*a) {
                    send(*a, g.matmul_unchecked(val(*b)));
                }
                if self.tracked(*b) {
                    send(*b, g.transposed_matmul(val(*a)));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.tracked(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.tracked(*a) {
                    send(*a, g.zip_map(bv, |x, y| x / y));
                }
                if self.tracked(*b) {
                    let q = g.zip_map(&node.value, |x, y| x * y);
                    send(*b, q.zip_map(bv, |x, y| -x / y));
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                if self.tracked(*row) {
                    let c = g.cols();
                    let mut sums = vec![0.0; c];
                    for r in 0..g.rows() {
                        for (s, v) in sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    send(*row, Matrix::from_raw(1, c, sums));
                }
            }
            Op::Scale(a, c) => send(*a, g.scale(*c)),
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Ln(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Sqrt(a) => send(*a, g.zip_map(&node.value, |x, y| x / (2.0 * y))),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::LogSoftmaxRows(a, t) => {
                let (r, c) = node.value.shape();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gi = g.row(i);
                    let yi = node.value.row(i);
                    let total: f64 = gi.iter().sum();
                    out.extend(gi.iter().zip(yi).map(|(gv, yv)| (gv - yv.exp() * total) / t));
                }
                send(*a, Matrix::from_raw(r, c, out));
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let (r, c) = x.shape();
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yi = node.value.row(i);
                    let gi = g.row(i);
                    let proj: f64 = yi.iter().zip(gi).map(|(y, g)| y * g).sum();
                    out.extend(gi.iter().zip(yi).map(|(gv, yv)| (gv - yv * proj) / norm));
                }
                send(*a, Matrix::from_raw(r, c, out));
            }
            Op::SelectRows(a, indices) => {
                let (r, c) = self.shape(*a);
                let mut out = Matrix::zeros(r, c);
                let data = out.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for (d, v) in data[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                send(*a, out);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    let chunk = g.data()[start * c..(start + rows) * c].to_vec();
                    send(p, Matrix::from_raw(rows, c, chunk));
                    start += rows;
                }
            }
            Op::PickCols(a, cols) => {
                let (r, c) = self.shape(*a);
                let mut out = Matrix::zeros(r, c);
                let data = out.data_mut();
                for (i, &j) in cols.iter().enumerate() {
                    data[i * c + j] = g.data()[i];
                }
                send(*a, out);
            }
            Op::Center(a) => {
                // H is symmetric, so the adjoint of A ↦ HAH is itself.
                send(*a, double_center(g).expect("square by construction"));
            }
            Op::Custom(inputs, op) => {
                let input_values: Vec<&Matrix> = inputs.iter().map(|&v| val(v)).collect();
                let outs = op.backward(&input_values, &node.value, g);
                for (&v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        send(v, d);
                    }
                }
            }
        }
    }
}

/// Row-wise L2 normalization; a zero row is rejected with its index.
pub fn row_normalized(m: &Matrix) -> Result<Matrix> {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = m.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Domain(format!("row {i} has zero norm")));
        }
        data.extend(row.iter().map(|v| v / norm));
    }
    Ok(Matrix::from_raw(r, c, data))
}

/// `H A H` with `H = I − 11ᵀ/n`, computed in O(n²) by subtracting row and
/// column means and adding back the grand mean.
pub fn double_center(m: &Matrix) -> Result<Matrix> {
    let (r, c) = m.shape();
    if r != c {
        return Err(Error::Shape(format!("centering needs a square matrix, got {r}x{c}")));
    }
    let n = r;
    if n == 0 {
        return Ok(m.clone());
    }
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| m.row(i).iter().sum::<f64>() / nf).collect();
    let mut col_means = vec![0.0; n];
    for i in 0..n {
        for (cm, v) in col_means.iter_mut().zip(m.row(i)) {
            *cm += v;
        }
    }
    col_means.iter_mut().for_each(|v| *v /= nf);
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        data.extend(
            m.row(i)
                .iter()
                .zip(&col_means)
                .map(|(v, cm)| v - row_means[i] - cm + grand),
        );
    }
    Ok(Matrix::from_raw(n, n, data))
}
