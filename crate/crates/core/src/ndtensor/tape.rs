//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly and appends one record to the [`Tape`].
//! [`Tape::backward`] then walks the records in exact reverse order,
//! propagating adjoints. Parameters bound with [`Tape::param`] remember their
//! position in the originating [`ParamSet`], so
//! [`Tape::backward_into`] can add their gradients into its slots.

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{ParamSet, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Silu(Var),
    Square(Var),
    Sigmoid(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Concat(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Silu(_) => "silu",
            Op::Square(_) => "square",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::Concat(_) => "concat",
        }
    }
}

#[derive(Debug, Clone)]
struct Record {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive evaluations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    records: Vec<Record>,
}

/// Adjoints produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.records[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, TensorError> {
        let position = self.records.len();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op.name(),
                position,
            });
        }
        self.records.push(Record { op, value });
        Ok(Var(position))
    }

    /// Records a value that receives no gradient bookkeeping beyond its adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let position = self.records.len();
        self.records.push(Record {
            op: Op::Constant,
            value,
        });
        Var(position)
    }

    /// Binds the current value of a named parameter.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var, TensorError> {
        let pos = params
            .position(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))?;
        self.push(Op::Param(pos), params.entry(pos).value.clone())
    }

    fn broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
        a.shape() == b.shape() || (a.rank() == b.rank() + 1 && &a.shape()[1..] == b.shape())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !Self::broadcast_ok(av, bv) {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let bl = bv.len().max(1);
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bl]))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(op, out)
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`'s leading axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let out = self.value(a).scale(k);
        self.push(Op::Scale(a, k), out)
    }

    fn expect_matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.expect_matrix(a, "matmul")?;
        let (k2, n) = self.expect_matrix(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?)
    }

    /// `x w + bias` with `x: [b, in]`, `w: [in, out]`, `bias: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, k) = self.expect_matrix(x, "affine")?;
        let (k2, n) = self.expect_matrix(w, "affine")?;
        let bshape = self.value(bias).shape().to_vec();
        if k != k2 || bshape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let bias_data = self.value(bias).data();
        let mut out: Vec<f64> = (0..m).flat_map(|_| bias_data.iter().copied()).collect();
        matmul_into(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        self.push(Op::Affine(x, w, bias), Tensor::new(vec![m, n], out)?)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(Op::Silu(a), out)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    /// Natural logarithm; non-positive inputs fail as non-finite.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.value(a).map(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "mean",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), out)
    }

    /// Sums each row of a matrix: `[b, n] -> [b]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, _) = self.expect_matrix(a, "row_sum")?;
        let t = self.value(a);
        let out = Tensor::from_vec((0..m).map(|i| t.row(i).iter().sum()).collect());
        self.push(Op::RowSum(a), out)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: vec![],
                rhs: vec![],
            });
        };
        let (m, _) = self.expect_matrix(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rows, w) = self.expect_matrix(p, "concat")?;
            if rows != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![m],
                    rhs: vec![rows, w],
                });
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::new(vec![m, total], data)?)
    }

    /// Propagates adjoints from `root`, which must be a single-element value.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: root_value.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        for pos in (0..=root.0).rev() {
            let Some(g) = adj[pos].take() else {
                continue;
            };
            if !g.is_finite() {
                return Err(TensorError::NonFinite {
                    op: self.records[pos].op.name(),
                    position: pos,
                });
            }
            self.propagate(pos, &g, &mut adj)?;
            adj[pos] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Runs [`Tape::backward`] and adds every bound parameter's gradient into
    /// `params`. Returns the root value.
    pub fn backward_into(&self, root: Var, params: &mut ParamSet) -> Result<f64, TensorError> {
        let grads = self.backward(root)?;
        for (pos, rec) in self.records.iter().enumerate() {
            if let Op::Param(p) = rec.op {
                if let Some(g) = grads.adjoints[pos].as_ref() {
                    if p >= params.len() {
                        return Err(TensorError::LayoutMismatch);
                    }
                    params.entry_mut(p).grad.axpy(1.0, g)?;
                }
            }
        }
        Ok(self.value(root).item())
    }

    fn propagate(
        &self,
        pos: usize,
        g: &Tensor,
        adj: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let accumulate = |adj: &mut [Option<Tensor>], v: Var, delta: Tensor| -> Result<(), TensorError> {
            match &mut adj[v.0] {
                Some(existing) => existing.axpy(1.0, &delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        // Reduces a broadcast adjoint back to the shape of the smaller operand.
        let unbroadcast = |g: Tensor, target: &Tensor| -> Tensor {
            if g.shape() == target.shape() {
                return g;
            }
            let w = target.len().max(1);
            let mut out = Tensor::zeros(target.shape());
            for (i, v) in g.data().iter().enumerate() {
                out.data_mut()[i % w] += v;
            }
            out
        };
        let out = &self.records[pos].value;
        match &self.records[pos].op {
            Op::Constant | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone())?;
                accumulate(adj, *b, unbroadcast(g.clone(), self.value(*b)))?;
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone())?;
                accumulate(adj, *b, unbroadcast(g.scale(-1.0), self.value(*b)))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bl = bv.len().max(1);
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * bv.data()[i % bl])
                    .collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(&gi, &x)| gi * x)
                    .collect();
                accumulate(adj, *a, Tensor::new(av.shape().to_vec(), ga)?)?;
                let gb = Tensor::new(av.shape().to_vec(), gb)?;
                accumulate(adj, *b, unbroadcast(gb, bv))?;
            }
            Op::Scale(a, k) => accumulate(adj, *a, g.scale(*k))?,
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut ga = vec![0.0; m * k];
                matmul_nt_into(g.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_tn_into(av.data(), g.data(), &mut gb, m, k, n);
                accumulate(adj, *a, Tensor::new(vec![m, k], ga)?)?;
                accumulate(adj, *b, Tensor::new(vec![k, n], gb)?)?;
            }
            Op::Affine(x, w, bias) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k) = (xv.shape()[0], xv.shape()[1]);
                let n = wv.shape()[1];
                let mut gx = vec![0.0; m * k];
                matmul_nt_into(g.data(), wv.data(), &mut gx, m, n, k);
                let mut gw = vec![0.0; k * n];
                matmul_tn_into(xv.data(), g.data(), &mut gw, m, k, n);
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                accumulate(adj, *x, Tensor::new(vec![m, k], gx)?)?;
                accumulate(adj, *w, Tensor::new(vec![k, n], gw)?)?;
                accumulate(adj, *bias, Tensor::from_vec(gb))?;
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                let d = g.zip_with(av, "silu", |gi, x| {
                    let s = sigmoid(x);
                    gi * (s + x * s * (1.0 - s))
                })?;
                accumulate(adj, *a, d)?;
            }
            Op::Square(a) => {
                let d = g.zip_with(self.value(*a), "square", |gi, x| 2.0 * x * gi)?;
                accumulate(adj, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = g.zip_with(out, "sigmoid", |gi, s| gi * s * (1.0 - s))?;
                accumulate(adj, *a, d)?;
            }
            Op::Log(a) => {
                let d = g.zip_with(self.value(*a), "log", |gi, x| gi / x)?;
                accumulate(adj, *a, d)?;
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(adj, *a, Tensor::full(av.shape(), g.item()))?;
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                accumulate(adj, *a, Tensor::full(av.shape(), g.item() / av.len() as f64))?;
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let w = av.cols();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi, w))
                    .collect();
                accumulate(adj, *a, Tensor::new(av.shape().to_vec(), data)?)?;
            }
            Op::Concat(parts) => {
                let m = out.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut data = Vec::with_capacity(m * w);
                    for i in 0..m {
                        data.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    accumulate(adj, p, Tensor::new(vec![m, w], data)?)?;
                    offset += w;
                }
            }
        }
        Ok(())
    }
}

/// Evaluates `f` on a fresh tape and accumulates `d loss / d param` into the
/// gradient slots of `params`. Slots are not zeroed first.
pub fn forward_backward<F>(params: &mut ParamSet, f: F) -> Result<f64, TensorError>
where
    F: FnOnce(&mut Tape, &ParamSet) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, params)?;
    tape.backward_into(root, params)
}
