use super::nn::{ParamId, ParamStore};
use super::{matmul_nt_into, matmul_tn_into, split_axis, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Abs(Var),
    Powf(Var, f64),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

static NO_PARAMS: ParamStore = ParamStore::new();

/// Define-by-run gradient tape. Nodes are appended in evaluation order, so
/// every node's parents precede it and a single reverse sweep suffices.
#[derive(Debug)]
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: &'p ParamStore,
    param_vars: Vec<Option<Var>>,
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape<'static> {
    /// A tape with no parameter store; inputs enter through [`Tape::leaf`].
    pub fn new() -> Self {
        Self::with_params(&NO_PARAMS)
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// The node for a stored parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("shape checked");
        self.push(t, op)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(f);
        self.push(t, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose on the value path.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast_check(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let width = *self.shape(x).last().unwrap_or(&1);
        if self.value(row).len() != width || self.value(x).rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok(width)
    }

    /// Adds a row vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let w = self.row_broadcast_check("add_row", x, row)?;
        let r = self.value(row).data();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += r[i % w];
        }
        Ok(self.push(t, Op::AddRow(x, row)))
    }

    /// Multiplies every row (last axis) of `x` elementwise by a row vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let w = self.row_broadcast_check("mul_row", x, row)?;
        let r = self.value(row).data();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= r[i % w];
        }
        Ok(self.push(t, Op::MulRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `ln σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::LogSigmoid(x), log_sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, Op::Powf(x, p), |v| v.powf(p))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x).softmax(axis)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(TensorError::Rank {
                op: "layer_norm",
                expected: 1,
                shape: v.shape().to_vec(),
            });
        }
        let w = *v.shape().last().unwrap();
        let rows = v.len() / w.max(1);
        let mut out = v.clone();
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out.data_mut()[r * w..(r + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / w as f64;
            let s = 1.0 / (var + eps).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * s;
            }
            rstd.push(s);
        }
        Ok(self.push(out, Op::LayerNorm { x, rstd }))
    }

    /// Concatenates rank-2 tensors along `axis` (0: rows, 1: columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Rank {
            op: "concat",
            expected: 2,
            shape: vec![],
        })?;
        let (r0, c0) = self.value(first).dims2("concat")?;
        if axis > 1 {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: vec![r0, c0],
            });
        }
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat")?;
            let fixed_ok = if axis == 0 { c == c0 } else { r == r0 };
            if !fixed_ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: vec![r0, c0],
                    rhs: vec![r, c],
                });
            }
            total += if axis == 0 { r } else { c };
        }
        let t = if axis == 0 {
            let mut data = Vec::with_capacity(total * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new([total, c0], data)?
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new([r0, total], data)?
        };
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start + len)` of a rank-2 tensor along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2("narrow")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                shape: vec![r, c],
            });
        }
        if start + len > extent {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                extent,
            });
        }
        let t = if axis == 0 {
            Tensor::new([len, c], v.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&v.row(i)[start..start + len]);
            }
            Tensor::new([r, len], data)?
        };
        Ok(self.push(t, Op::Narrow { x, axis, start }))
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(v.row(i));
        }
        let t = Tensor::new([rows.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let mut ga = vec![0.0; m * k];
                matmul_nt_into(gd, vb.data(), &mut ga, m, n, k);
                accumulate(grads, *a, va.shape(), ga);
                let mut gb = vec![0.0; k * n];
                matmul_tn_into(va.data(), gd, &mut gb, m, k, n);
                accumulate(grads, *b, vb.shape(), gb);
            }
            Op::Transpose(x) => {
                let gt = g.transpose().expect("rank 2");
                accumulate(grads, *x, self.shape(*x), gt.into_data());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, out.shape(), gd.to_vec());
                accumulate(grads, *b, out.shape(), gd.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, out.shape(), gd.to_vec());
                accumulate(grads, *b, out.shape(), gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                accumulate(grads, *a, out.shape(), zip(gd, vb, |g, y| g * y));
                accumulate(grads, *b, out.shape(), zip(gd, va, |g, x| g * x));
            }
            Op::AddRow(x, row) => {
                accumulate(grads, *x, out.shape(), gd.to_vec());
                let w = self.value(*row).len();
                let mut gr = vec![0.0; w];
                for (j, v) in gd.iter().enumerate() {
                    gr[j % w] += v;
                }
                accumulate(grads, *row, self.shape(*row), gr);
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row).data();
                let xv = self.value(*x).data();
                let w = r.len();
                let gx = gd.iter().enumerate().map(|(j, v)| v * r[j % w]).collect();
                accumulate(grads, *x, out.shape(), gx);
                let mut gr = vec![0.0; w];
                for (j, v) in gd.iter().enumerate() {
                    gr[j % w] += v * xv[j];
                }
                accumulate(grads, *row, self.shape(*row), gr);
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, out.shape(), gd.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(x) => accumulate(grads, *x, out.shape(), gd.to_vec()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = zip(gd, xv, |g, x| if x > 0.0 { g } else { 0.0 });
                accumulate(grads, *x, out.shape(), gx);
            }
            Op::Sigmoid(x) => {
                let gx = zip(gd, out.data(), |g, s| g * s * (1.0 - s));
                accumulate(grads, *x, out.shape(), gx);
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x).data();
                let gx = zip(gd, xv, |g, x| g * sigmoid(-x));
                accumulate(grads, *x, out.shape(), gx);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let gx = zip(gd, xv, |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *x, out.shape(), gx);
            }
            Op::Powf(x, p) => {
                let xv = self.value(*x).data();
                let p = *p;
                let gx = zip(gd, xv, |g, x| if p == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) });
                accumulate(grads, *x, out.shape(), gx);
            }
            Op::Exp(x) => {
                let gx = zip(gd, out.data(), |g, e| g * e);
                accumulate(grads, *x, out.shape(), gx);
            }
            Op::Softmax { x, axis } => {
                let y = out.data();
                let (outer, extent, inner) = split_axis(out.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let dot: f64 = (0..extent).map(|j| gd[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..extent {
                            let k = base + j * inner;
                            gx[k] = y[k] * (gd[k] - dot);
                        }
                    }
                }
                accumulate(grads, *x, out.shape(), gx);
            }
            Op::LayerNorm { x, rstd } => {
                let y = out.data();
                let w = *out.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for (r, s) in rstd.iter().enumerate() {
                    let span = r * w..(r + 1) * w;
                    let gr = &gd[span.clone()];
                    let yr = &y[span.clone()];
                    let mean_g = gr.iter().sum::<f64>() / w as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for (k, o) in span.enumerate() {
                        gx[o] = s * (gr[k] - mean_g - yr[k] * mean_gy);
                    }
                }
                accumulate(grads, *x, out.shape(), gx);
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = (self.shape(p)[0], self.shape(p)[1]);
                    let gp = if *axis == 0 {
                        gd[offset * cols..(offset + r) * cols].to_vec()
                    } else {
                        let mut v = Vec::with_capacity(r * c);
                        for i in 0..rows {
                            v.extend_from_slice(&gd[i * cols + offset..i * cols + offset + c]);
                        }
                        v
                    };
                    accumulate(grads, p, &[r, c], gp);
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Narrow { x, axis, start } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (or, oc) = (out.shape()[0], out.shape()[1]);
                let mut gx = vec![0.0; r * c];
                if *axis == 0 {
                    gx[start * c..(start + or) * c].copy_from_slice(gd);
                } else {
                    for i in 0..r {
                        gx[i * c + start..i * c + start + oc].copy_from_slice(&gd[i * oc..(i + 1) * oc]);
                    }
                }
                accumulate(grads, *x, &[r, c], gx);
            }
            Op::GatherRows { x, rows } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut gx = vec![0.0; r * c];
                for (k, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += gd[k * c + j];
                    }
                }
                accumulate(grads, *x, &[r, c], gx);
            }
            Op::Sum(x) => {
                let shape = self.shape(*x);
                let n = self.value(*x).len();
                accumulate(grads, *x, shape, vec![gd[0]; n]);
            }
            Op::Reshape(x) => accumulate(grads, *x, self.shape(*x), gd.to_vec()),
        }
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Gradients from one [`Tape::backward`] sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// `None` when `v` is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars[id.index()].and_then(|v| self.get(v))
    }

    /// Per-parameter gradients aligned with the store, zero where unused.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_x_squared() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(Tensor::scalar(2.0));
        let y = tape.scale(x, 4.0);
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get(x).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn gradients_match_value_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full([2, 3], 0.5));
        let b = tape.leaf(Tensor::full([3, 4], -0.25));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax(c, 1).unwrap();
        let n = tape.layer_norm(s, 1e-5).unwrap();
        let l = tape.sum(n);
        let g = tape.backward(l).unwrap();
        for v in [a, b, c, s, n] {
            assert_eq!(g.get(v).unwrap().shape(), tape.shape(v));
        }
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(a), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let b = tape.leaf(Tensor::from_rows(&[[5.0], [6.0]]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.narrow(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(a));
        let rows = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(rows), &[4, 2]);
    }
}
