//! Primitive operations. Every method computes its value eagerly and records
//! itself on the tape; shape violations are reported with the primitive's name.

use std::rc::Rc;

use ndarray::{ArrayD, Ix2, IxDyn};

use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvDims};
use crate::tape::{Array, Op, Var};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(op, format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `src` read as if broadcast to `shape`; 0 on broadcast axes.
fn broadcast_strides(src: &[usize], shape: &[usize]) -> Vec<usize> {
    let lead = shape.len() - src.len();
    let mut strides = vec![0; shape.len()];
    let mut step = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[lead + i] = step;
        }
        step *= src[i];
    }
    strides
}

/// Visits `shape` in row-major order one innermost row at a time, calling
/// `f(a_offset, b_offset, row_len)` with offsets advanced by the given
/// per-axis strides.
fn for_each_row(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    if shape.contains(&0) {
        return;
    }
    let n = shape.len();
    if n == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0; n - 1];
    let (mut oa, mut ob) = (0, 0);
    loop {
        f(oa, ob);
        let mut d = n - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn zip_map(a: &Array, b: &Array, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Array {
    let (a, b) = (a.as_standard_layout(), b.as_standard_layout());
    let (da, db) = (a.as_slice().unwrap(), b.as_slice().unwrap());
    if a.shape() == shape && b.shape() == shape {
        let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
        return ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
    }
    let sa = broadcast_strides(a.shape(), shape);
    let sb = broadcast_strides(b.shape(), shape);
    let inner = shape.last().copied().unwrap_or(1);
    let (ia, ib) = (sa.last().copied().unwrap_or(0), sb.last().copied().unwrap_or(0));
    let mut data = Vec::with_capacity(shape.iter().product());
    for_each_row(shape, &sa, &sb, |oa, ob| {
        match (ia, ib) {
            (1, 1) => data.extend(da[oa..oa + inner].iter().zip(&db[ob..ob + inner]).map(|(&x, &y)| f(x, y))),
            (1, 0) => data.extend(da[oa..oa + inner].iter().map(|&x| f(x, db[ob]))),
            (0, 1) => data.extend(db[ob..ob + inner].iter().map(|&y| f(da[oa], y))),
            _ => data.extend((0..inner).map(|t| f(da[oa + t * ia], db[ob + t * ib]))),
        }
    });
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Sums `a` down to `shape`, which must be a valid broadcast source of it.
fn reduce_to(a: &Array, shape: &[usize]) -> Array {
    let a = a.as_standard_layout();
    let src = a.as_slice().unwrap();
    let so = broadcast_strides(shape, a.shape());
    let inner = a.shape().last().copied().unwrap_or(1);
    let io = so.last().copied().unwrap_or(0);
    let mut out = vec![0.0; shape.iter().product()];
    let mut pos = 0;
    for_each_row(a.shape(), &so, &so, |o, _| {
        let row = &src[pos..pos + inner];
        if io == 0 {
            out[o] += row.iter().sum::<f64>();
        } else {
            for (t, &v) in row.iter().enumerate() {
                out[o + t] += v;
            }
        }
        pos += inner;
    });
    ArrayD::from_shape_vec(IxDyn(shape), out).unwrap()
}

fn standard(a: Array) -> Array {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Var {
    fn check_tape(&self, other: &Var) {
        assert!(
            self.tape.same(&other.tape),
            "operands belong to different tapes"
        );
    }

    fn binary(&self, other: &Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.check_tape(other);
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let value = zip_map(&a, &b, &shape, f);
        Ok(self.tape.push_op(value, op))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value().mapv(f);
        self.tape.push_op(value, op)
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "subtract", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "multiply", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, "divide", Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    /// `c * self`
    pub fn scale(&self, c: f64) -> Var {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    /// `self + c`
    pub fn offset(&self, c: f64) -> Var {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid(self.id), stable_sigmoid)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn softplus(&self) -> Var {
        self.unary(Op::Softplus(self.id), stable_softplus)
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn square(&self) -> Var {
        // x * x keeps the second derivative exact without a dedicated primitive
        self.mul(self).expect("same shape")
    }

    /// Sums over broadcast axes so the result has `shape`; the inverse of
    /// [`Var::broadcast_to`].
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value();
        let src = v.shape();
        if src == shape {
            return Ok(self.clone());
        }
        if shape.len() > src.len() {
            return shape_err("sum", format!("cannot reduce {src:?} to {shape:?}"));
        }
        let lead = src.len() - shape.len();
        for (i, &d) in shape.iter().enumerate() {
            if d != 1 && d != src[lead + i] {
                return shape_err("sum", format!("cannot reduce {src:?} to {shape:?}"));
            }
        }
        Ok(self.tape.push_op(reduce_to(&v, shape), Op::SumTo(self.id)))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self.clone());
        }
        if v.broadcast(IxDyn(shape)).is_none() {
            return shape_err("broadcast", format!("cannot broadcast {:?} to {shape:?}", v.shape()));
        }
        let value = zip_map(&v, &v, shape, |x, _| x);
        Ok(self.tape.push_op(value, Op::BroadcastTo(self.id)))
    }

    pub fn sum(&self) -> Var {
        self.sum_to(&[]).expect("full reduction always valid")
    }

    pub fn mean(&self) -> Var {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value();
        if shape.iter().product::<usize>() != v.len() {
            return shape_err("reshape", format!("cannot reshape {:?} to {shape:?}", v.shape()));
        }
        if v.shape() == shape {
            return Ok(self.clone());
        }
        let data = v.as_slice().expect("standard layout").to_vec();
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        Ok(self.tape.push_op(value, Op::Reshape(self.id)))
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Var> {
        let v = self.value();
        if v.ndim() != 2 {
            return shape_err("transpose", format!("expected a matrix, got {:?}", v.shape()));
        }
        let value = v.t().as_standard_layout().into_owned();
        Ok(self.tape.push_op(value, Op::Transpose(self.id)))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return shape_err(
                "matmul",
                format!("incompatible operands {:?} and {:?}", a.shape(), b.shape()),
            );
        }
        let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
        let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
        let value = a2.dot(&b2).into_dyn();
        Ok(self.tape.push_op(standard(value), Op::MatMul(self.id, other.id)))
    }

    /// 1-D cross-correlation of a `(batch, c_in, len)` input with a
    /// `(c_out, c_in, kernel)` weight, stride 1, zero padding.
    pub fn conv1d(&self, w: &Var, pad_left: usize, pad_right: usize) -> Result<Var> {
        let (x, wv) = (self.value(), w.value());
        if x.ndim() != 3 || wv.ndim() != 3 {
            return shape_err("conv1d", format!("expected 3-d operands, got {:?} and {:?}", x.shape(), wv.shape()));
        }
        let padded = x.shape()[2] + pad_left + pad_right;
        if padded < wv.shape()[2] {
            return shape_err(
                "conv1d",
                format!("kernel {} longer than padded input {}", wv.shape()[2], padded),
            );
        }
        self.conv1d_with_len(w, pad_left, padded + 1 - wv.shape()[2])
    }

    pub(crate) fn conv1d_with_len(&self, w: &Var, pad_left: usize, len_out: usize) -> Result<Var> {
        self.check_tape(w);
        let (x, wv) = (self.value(), w.value());
        if x.ndim() != 3 || wv.ndim() != 3 || x.shape()[1] != wv.shape()[1] {
            return shape_err(
                "conv1d",
                format!("input {:?} does not match weight {:?}", x.shape(), wv.shape()),
            );
        }
        let d = ConvDims {
            batch: x.shape()[0],
            c_in: x.shape()[1],
            c_out: wv.shape()[0],
            kernel: wv.shape()[2],
            len_in: x.shape()[2],
            len_out,
            pad_left,
        };
        let data = kernels::conv1d_forward(x.as_slice().unwrap(), wv.as_slice().unwrap(), &d);
        let value = ArrayD::from_shape_vec(IxDyn(&[d.batch, d.c_out, d.len_out]), data).unwrap();
        Ok(self.tape.push_op(
            value,
            Op::Conv1d {
                x: self.id,
                w: w.id,
                pad_left,
            },
        ))
    }

    /// Adjoint of `conv1d` with respect to its input; `self` is output-shaped.
    pub fn conv1d_input_grad(&self, w: &Var, pad_left: usize, len_in: usize) -> Result<Var> {
        self.check_tape(w);
        let (g, wv) = (self.value(), w.value());
        if g.ndim() != 3 || wv.ndim() != 3 || g.shape()[1] != wv.shape()[0] {
            return shape_err(
                "conv1d_input_grad",
                format!("gradient {:?} does not match weight {:?}", g.shape(), wv.shape()),
            );
        }
        let d = ConvDims {
            batch: g.shape()[0],
            c_in: wv.shape()[1],
            c_out: wv.shape()[0],
            kernel: wv.shape()[2],
            len_in,
            len_out: g.shape()[2],
            pad_left,
        };
        let data = kernels::conv1d_input_grad(g.as_slice().unwrap(), wv.as_slice().unwrap(), &d);
        let value = ArrayD::from_shape_vec(IxDyn(&[d.batch, d.c_in, d.len_in]), data).unwrap();
        Ok(self.tape.push_op(
            value,
            Op::Conv1dInputGrad {
                g: self.id,
                w: w.id,
                pad_left,
            },
        ))
    }

    /// Adjoint of `conv1d` with respect to its weight; `self` is the input and
    /// `g` is output-shaped.
    pub fn conv1d_weight_grad(&self, g: &Var, pad_left: usize, kernel: usize) -> Result<Var> {
        self.check_tape(g);
        let (x, gv) = (self.value(), g.value());
        if x.ndim() != 3 || gv.ndim() != 3 || x.shape()[0] != gv.shape()[0] {
            return shape_err(
                "conv1d_weight_grad",
                format!("input {:?} does not match gradient {:?}", x.shape(), gv.shape()),
            );
        }
        let d = ConvDims {
            batch: x.shape()[0],
            c_in: x.shape()[1],
            c_out: gv.shape()[1],
            kernel,
            len_in: x.shape()[2],
            len_out: gv.shape()[2],
            pad_left,
        };
        let data = kernels::conv1d_weight_grad(x.as_slice().unwrap(), gv.as_slice().unwrap(), &d);
        let value = ArrayD::from_shape_vec(IxDyn(&[d.c_out, d.c_in, d.kernel]), data).unwrap();
        Ok(self.tape.push_op(
            value,
            Op::Conv1dWeightGrad {
                x: self.id,
                g: g.id,
                pad_left,
            },
        ))
    }

    /// `out.flat[j] = self.flat[index[j]]`, reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let v = self.value();
        if index.len() != shape.iter().product::<usize>() {
            return shape_err("gather", format!("{} indices for output shape {shape:?}", index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return shape_err("gather", format!("index {bad} out of range for {} entries", v.len()));
        }
        let data = kernels::gather(v.as_slice().unwrap(), &index);
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        Ok(self.tape.push_op(value, Op::Gather { x: self.id, index }))
    }

    /// `out.flat[index[j]] += self.flat[j]` into zeros of `shape`.
    pub fn scatter_add(&self, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let v = self.value();
        let out_len: usize = shape.iter().product();
        if index.len() != v.len() {
            return shape_err("scatter_add", format!("{} indices for {} values", index.len(), v.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= out_len) {
            return shape_err("scatter_add", format!("index {bad} out of range for shape {shape:?}"));
        }
        let data = kernels::scatter_add(v.as_slice().unwrap(), &index, out_len);
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).unwrap();
        Ok(self.tape.push_op(value, Op::ScatterAdd { g: self.id, index }))
    }

    /// Concatenation of `(b, c_i, l)` operands along the channel axis.
    pub fn concat_channels(parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "nothing to concatenate");
        };
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let (b, l) = match values[0].shape() {
            &[b, _, l] => (b, l),
            s => return shape_err("concat", format!("expected (batch, channels, length), got {s:?}")),
        };
        for (p, v) in parts.iter().zip(&values) {
            first.check_tape(p);
            if v.ndim() != 3 || v.shape()[0] != b || v.shape()[2] != l {
                return shape_err("concat", format!("part {:?} does not match ({b}, _, {l})", v.shape()));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(b * total * l);
        for bi in 0..b {
            for v in &values {
                let row = v.shape()[1] * l;
                data.extend_from_slice(&v.as_standard_layout().as_slice().unwrap()[bi * row..(bi + 1) * row]);
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[b, total, l]), data).unwrap();
        let ids: Rc<[usize]> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push_op(value, Op::ConcatChannels { parts: ids }))
    }
}
