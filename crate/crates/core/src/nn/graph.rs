//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every op evaluates eagerly, appends a node holding
//! its value, and remembers its operands. [`Graph::backward`] walks the tape
//! in reverse and returns gradients for every parameter bound into the graph.

use std::collections::HashMap;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn};
use super::{Gradients, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    LogSigmoid(Var),
    Square(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ScaleCols(Var, Var),
    RowScale(Var, Var),
    SegmentSoftmax(Var, usize),
    SegmentSum(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// A constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Bind parameter `name` from `params`. Binding the same name twice yields
    /// the same node, so unrolled recurrences share one gradient.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not in set")))?
            .clone();
        let v = self.push(t, Op::Param);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m},{k}] · [{k2},{n}]"),
            ));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `x[m,n] + b[n]`, the only broadcast the graph supports.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if self.value(b).len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} for width {n}", self.value(b).len()),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddBias(x, b)))
    }

    fn same_shape(&self, node: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                node,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(x, slope))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x))
    }

    /// `log σ(x)`, evaluated without overflow for large |x|.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(log_sigmoid);
        self.push(t, Op::LogSigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x))
    }

    /// Concatenate along columns; all parts need the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no operands"));
        };
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::shape(
                    "concat",
                    format!("row counts {} vs {m}", self.value(p).rows()),
                ));
            }
            widths.push(self.value(p).cols());
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start+len` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of width {n}", start + len),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src.row_slice(i)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::Slice { x, start, len }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} → {shape:?}", self.value(x).shape()),
            ));
        }
        let t = self.value(x).with_shape(shape.to_vec());
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Row sums, `[m,n] → [m,1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.rows();
        let out = (0..m).map(|i| t.row_slice(i).iter().sum()).collect();
        let t = Tensor::matrix(m, 1, out).expect("row count positive");
        self.push(t, Op::SumCols(x))
    }

    /// Multiply every row of `x[m,n]` elementwise by `r[n]`.
    pub fn scale_cols(&mut self, x: Var, r: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if self.value(r).len() != n {
            return Err(Error::shape("scale_cols", format!("factor of {} for width {n}", self.value(r).len())));
        }
        let f = self.value(r).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, fv) in out[i * n..(i + 1) * n].iter_mut().zip(&f) {
                *o *= fv;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(t, Op::ScaleCols(x, r)))
    }

    /// Multiply row `i` of `x[m,n]` by `s[i]`, with `s` shaped `[m,1]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if self.value(s).len() != m {
            return Err(Error::shape("row_scale", format!("{} factors for {m} rows", self.value(s).len())));
        }
        let f = self.value(s).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n].iter_mut().for_each(|o| *o *= f[i]);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(t, Op::RowScale(x, s)))
    }

    /// Softmax over consecutive groups of `group` entries of a column `[m,1]`.
    pub fn segment_softmax(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        if t.cols() != 1 || group == 0 || !t.rows().is_multiple_of(group) {
            return Err(Error::shape(
                "segment_softmax",
                format!("{:?} in groups of {group}", t.shape()),
            ));
        }
        let mut out = t.data().to_vec();
        for seg in out.chunks_mut(group) {
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in seg.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            seg.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(t, Op::SegmentSoftmax(x, group)))
    }

    /// Sum consecutive groups of `group` rows: `[b·group, n] → [b, n]`.
    pub fn segment_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(x));
        if group == 0 || m % group != 0 {
            return Err(Error::shape("segment_sum", format!("{m} rows in groups of {group}")));
        }
        let b = m / group;
        let src = self.value(x).data();
        let mut out = vec![0.0; b * n];
        for r in 0..m {
            let o = &mut out[(r / group) * n..(r / group + 1) * n];
            for (ov, sv) in o.iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *ov += sv;
            }
        }
        Ok(self.push(Tensor::matrix(b, n, out)?, Op::SegmentSum(x, group)))
    }

    /// Gradients of scalar `loss` with respect to every bound parameter.
    /// Parameters the loss does not reach get explicit zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims2(self.value(*a));
                    let n = self.value(*b).cols();
                    let ga = matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                    let gb = matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                    acc(&mut grads, *a, self.value(*a), ga);
                    acc(&mut grads, *b, self.value(*b), gb);
                }
                Op::AddBias(x, b) => {
                    let (m, n) = dims2(y);
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for (s, v) in gb.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *b, self.value(*b), gb);
                    acc(&mut grads, *x, self.value(*x), g.into_data());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, self.value(*a), g.data().to_vec());
                    acc(&mut grads, *b, self.value(*b), g.into_data());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, self.value(*a), g.data().to_vec());
                    let neg = g.data().iter().map(|v| -v).collect();
                    acc(&mut grads, *b, self.value(*b), neg);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(self.value(*b), |gv, bv| gv * bv).into_data();
                    let gb = g.zip(self.value(*a), |gv, av| gv * av).into_data();
                    acc(&mut grads, *a, self.value(*a), ga);
                    acc(&mut grads, *b, self.value(*b), gb);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(&mut grads, *x, self.value(*x), g.map(|v| v * c).into_data());
                }
                Op::AddScalar(x) => acc(&mut grads, *x, self.value(*x), g.into_data()),
                Op::Tanh(x) => {
                    let gx = g.zip(y, |gv, yv| gv * (1.0 - yv * yv)).into_data();
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip(y, |gv, yv| gv * yv * (1.0 - yv)).into_data();
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::Relu(x) => {
                    let gx = g
                        .zip(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                        .into_data();
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let gx = g
                        .zip(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { s * gv })
                        .into_data();
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::Exp(x) => {
                    let gx = g.zip(y, |gv, yv| gv * yv).into_data();
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::LogSigmoid(x) => {
                    let gx = g
                        .zip(self.value(*x), |gv, xv| gv * sigmoid(-xv))
                        .into_data();
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::Square(x) => {
                    let gx = g
                        .zip(self.value(*x), |gv, xv| 2.0 * gv * xv)
                        .into_data();
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::Concat(parts) => {
                    let (m, n) = dims2(y);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g.data()[i * n + offset..i * n + offset + w]);
                        }
                        acc(&mut grads, p, self.value(p), gp);
                        offset += w;
                    }
                }
                Op::Slice { x, start, len } => {
                    let (m, n) = dims2(self.value(*x));
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        gx[i * n + start..i * n + start + len]
                            .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                    }
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::Reshape(x) => acc(&mut grads, *x, self.value(*x), g.into_data()),
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, self.value(*x), vec![gv; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let gv = g.data()[0] / n as f64;
                    acc(&mut grads, *x, self.value(*x), vec![gv; n]);
                }
                Op::SumCols(x) => {
                    let (m, n) = dims2(self.value(*x));
                    let mut gx = Vec::with_capacity(m * n);
                    for i in 0..m {
                        gx.extend(std::iter::repeat_n(g.data()[i], n));
                    }
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::ScaleCols(x, r) => {
                    let (m, n) = dims2(self.value(*x));
                    let f = self.value(*r).data();
                    let xv = self.value(*x).data();
                    let mut gx = g.data().to_vec();
                    let mut gr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += g.data()[i * n + j] * xv[i * n + j];
                            gx[i * n + j] *= f[j];
                        }
                    }
                    acc(&mut grads, *x, self.value(*x), gx);
                    acc(&mut grads, *r, self.value(*r), gr);
                }
                Op::RowScale(x, s) => {
                    let (m, n) = dims2(self.value(*x));
                    let f = self.value(*s).data();
                    let xv = self.value(*x).data();
                    let mut gx = g.data().to_vec();
                    let mut gs = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..n {
                            gs[i] += g.data()[i * n + j] * xv[i * n + j];
                            gx[i * n + j] *= f[i];
                        }
                    }
                    acc(&mut grads, *x, self.value(*x), gx);
                    acc(&mut grads, *s, self.value(*s), gs);
                }
                Op::SegmentSoftmax(x, group) => {
                    let mut gx = vec![0.0; y.len()];
                    for (s, (ys, gs)) in y
                        .data()
                        .chunks(*group)
                        .zip(g.data().chunks(*group))
                        .enumerate()
                    {
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..*group {
                            gx[s * group + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, self.value(*x), gx);
                }
                Op::SegmentSum(x, group) => {
                    let (m, n) = dims2(self.value(*x));
                    let mut gx = Vec::with_capacity(m * n);
                    for r in 0..m {
                        let b = r / group;
                        gx.extend_from_slice(&g.data()[b * n..(b + 1) * n]);
                    }
                    acc(&mut grads, *x, self.value(*x), gx);
                }
            }
        }

        let mut out = Gradients::default();
        for (name, &v) in &self.bound {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            out.by_name.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Backward and accumulate straight into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let g = self.backward(loss)?;
        params.accumulate(&g);
        Ok(())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(like.shape().to_vec(), g).expect("gradient matches operand"));
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

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
