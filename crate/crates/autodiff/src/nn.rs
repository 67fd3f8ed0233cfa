//! Layers and losses composed from the primitives in [`crate::ops`].
//!
//! Nothing here introduces a new backward rule, so everything stays twice
//! differentiable wherever the underlying function is.

use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tape::Var;

const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Selu,
    Elu,
    Mish,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Relu,
        Activation::Selu,
        Activation::Elu,
        Activation::Mish,
    ];

    pub fn apply(self, x: &Var) -> Var {
        match self {
            Activation::Relu => x.relu(),
            Activation::Selu => selu(x),
            Activation::Elu => elu(x, 1.0),
            Activation::Mish => mish(x),
        }
    }
}

/// `x` for positive entries, `alpha * (exp(x) - 1)` otherwise.
pub fn elu(x: &Var, alpha: f64) -> Var {
    let negative_part = x.neg().relu().neg();
    let tail = negative_part.exp().offset(-1.0).scale(alpha);
    x.relu().add(&tail).expect("same shape")
}

pub fn selu(x: &Var) -> Var {
    elu(x, SELU_ALPHA).scale(SELU_SCALE)
}

pub fn mish(x: &Var) -> Var {
    x.mul(&x.softplus().tanh()).expect("same shape")
}

/// `x @ weight + bias` for `x: (n, in)`, `weight: (in, out)`, `bias: (out)`.
pub fn linear(x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    x.matmul(weight)?.add(bias)
}

/// Stride-1 convolution whose output length equals the input length, plus a
/// per-channel bias. Even kernels put the extra padding on the right.
pub fn conv1d_same(x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    let k = weight.shape().get(2).copied().unwrap_or(0);
    if k == 0 {
        return shape_err("conv1d", "weight must be (c_out, c_in, kernel)");
    }
    let pad_left = (k - 1) / 2;
    let y = x.conv1d(weight, pad_left, k - 1 - pad_left)?;
    let c = bias.len();
    y.add(&bias.reshape(&[1, c, 1])?)
}

fn dims3(x: &Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [b, c, l] => Ok((b, c, l)),
        ref s => shape_err(op, format!("expected (batch, channels, length), got {s:?}")),
    }
}

/// Max pooling over the last axis. Padded positions never win a window.
pub fn max_pool1d(x: &Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
    let (b, c, l) = dims3(x, "max_pool1d")?;
    if kernel == 0 || stride == 0 || l + 2 * padding < kernel || padding >= kernel {
        return shape_err(
            "max_pool1d",
            format!("kernel {kernel}, stride {stride}, padding {padding} invalid for length {l}"),
        );
    }
    let l_out = (l + 2 * padding - kernel) / stride + 1;
    let value = x.value();
    let data = value.as_slice().expect("standard layout");
    let mut index = Vec::with_capacity(b * c * l_out);
    for row in 0..b * c {
        let base = row * l;
        for t in 0..l_out {
            let start = (t * stride) as isize - padding as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + kernel as isize) as usize).min(l);
            let mut best = lo;
            for i in lo + 1..hi {
                if data[base + i] > data[base + best] {
                    best = i;
                }
            }
            index.push(base + best);
        }
    }
    x.gather(Rc::from(index), &[b, c, l_out])
}

/// Non-overlapping average pooling (stride = kernel); a trailing remainder
/// shorter than `kernel` is dropped.
pub fn avg_pool1d(x: &Var, kernel: usize) -> Result<Var> {
    let (b, c, l) = dims3(x, "avg_pool1d")?;
    if kernel == 0 || kernel > l {
        return shape_err("avg_pool1d", format!("kernel {kernel} invalid for length {l}"));
    }
    let l_out = l / kernel;
    let trimmed = if l_out * kernel == l {
        x.clone()
    } else {
        let index: Vec<usize> = (0..b * c)
            .flat_map(|row| (0..l_out * kernel).map(move |i| row * l + i))
            .collect();
        x.gather(Rc::from(index), &[b, c, l_out * kernel])?
    };
    let windows = trimmed.reshape(&[b, c, l_out, kernel])?;
    windows
        .sum_to(&[b, c, l_out, 1])?
        .scale(1.0 / kernel as f64)
        .reshape(&[b, c, l_out])
}

/// Mean over the time axis: `(b, c, l) -> (b, c)`.
pub fn global_avg_pool1d(x: &Var) -> Result<Var> {
    let (b, c, l) = dims3(x, "global_avg_pool1d")?;
    x.sum_to(&[b, c, 1])?.scale(1.0 / l as f64).reshape(&[b, c])
}

/// Batch normalization with statistics of the current batch, over every axis
/// except the channel axis 1. Accepts `(b, c)` or `(b, c, l)`.
pub fn batch_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    let shape = x.shape();
    if shape.len() < 2 || gamma.len() != shape[1] || beta.len() != shape[1] {
        return shape_err(
            "batch_norm",
            format!("input {shape:?} with scale of {} and shift of {}", gamma.len(), beta.len()),
        );
    }
    let c = shape[1];
    let mut stat_shape = vec![1; shape.len()];
    stat_shape[1] = c;
    let count = (x.len() / c) as f64;
    let mean = x.sum_to(&stat_shape)?.scale(1.0 / count);
    let centered = x.sub(&mean)?;
    let var = centered.square().sum_to(&stat_shape)?.scale(1.0 / count);
    let normalized = centered.div(&var.offset(eps).sqrt())?;
    normalized
        .mul(&gamma.reshape(&stat_shape)?)?
        .add(&beta.reshape(&stat_shape)?)
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
pub fn dropout<R: Rng + ?Sized>(x: &Var, p: f64, rng: &mut R) -> Var {
    if p <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - p;
    let mask = x
        .value()
        .mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    x.mul(&x.tape().constant(mask)).expect("same shape")
}

pub fn flatten(x: &Var) -> Result<Var> {
    let shape = x.shape();
    if shape.is_empty() {
        return shape_err("flatten", "cannot flatten a scalar");
    }
    let rest: usize = shape[1..].iter().product();
    x.reshape(&[shape[0], rest])
}

/// Concatenates `(b, c_i, l)` tensors along the channel axis.
pub fn concat_channels(parts: &[Var]) -> Result<Var> {
    Var::concat_channels(parts)
}

fn dims2(x: &Var, op: &'static str) -> Result<(usize, usize)> {
    match x.shape()[..] {
        [n, d] => Ok((n, d)),
        ref s => shape_err(op, format!("expected a matrix, got {s:?}")),
    }
}

/// Row-wise log-softmax of an `(n, c)` matrix.
pub fn log_softmax(x: &Var) -> Result<Var> {
    let (n, c) = dims2(x, "log_softmax")?;
    // The row maximum only shifts the computation; it is treated as a constant.
    let value = x.value();
    let maxes: Vec<f64> = value
        .as_slice()
        .unwrap()
        .chunks(c)
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = x
        .tape()
        .constant(ArrayD::from_shape_vec(IxDyn(&[n, 1]), maxes).unwrap());
    let z = x.sub(&shift)?;
    let lse = z.exp().sum_to(&[n, 1])?.log();
    z.sub(&lse)
}

pub fn softmax(x: &Var) -> Result<Var> {
    Ok(log_softmax(x)?.exp())
}

/// Mean categorical cross-entropy of `(n, c)` logits against class indices.
pub fn cross_entropy_with_logits(logits: &Var, targets: &[usize]) -> Result<Var> {
    let (n, c) = dims2(logits, "cross_entropy")?;
    if targets.len() != n || targets.iter().any(|&t| t >= c) {
        return shape_err(
            "cross_entropy",
            format!("{} targets for {n} rows of {c} classes", targets.len()),
        );
    }
    let mut onehot = ArrayD::zeros(IxDyn(&[n, c]));
    for (i, &t) in targets.iter().enumerate() {
        onehot[[i, t]] = 1.0;
    }
    let onehot = logits.tape().constant(onehot);
    Ok(log_softmax(logits)?
        .mul(&onehot)?
        .sum()
        .scale(-1.0 / n as f64))
}

/// Mean binary cross-entropy of logits against 0/1 targets of the same shape.
pub fn binary_cross_entropy_with_logits(logits: &Var, targets: &ArrayD<f64>) -> Result<Var> {
    if logits.shape() != targets.shape() {
        return shape_err(
            "binary_cross_entropy",
            format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape()),
        );
    }
    let y = logits.tape().constant(targets.clone());
    Ok(logits.softplus().sub(&logits.mul(&y)?)?.mean())
}

/// Row-wise L2 normalization. Rows that are exactly zero are first shifted by
/// `eps` in every coordinate so the direction is defined.
pub fn l2_normalize(x: &Var, eps: f64) -> Result<Var> {
    let (n, d) = dims2(x, "l2_normalize")?;
    let value = x.value();
    let mut shift = vec![0.0; n * d];
    let mut any = false;
    for (i, row) in value.as_slice().unwrap().chunks(d).enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            shift[i * d..(i + 1) * d].iter_mut().for_each(|s| *s = eps);
            any = true;
        }
    }
    let x = if any {
        let shift = x
            .tape()
            .constant(ArrayD::from_shape_vec(IxDyn(&[n, d]), shift).unwrap());
        x.add(&shift)?
    } else {
        x.clone()
    };
    let norm = x.square().sum_to(&[n, 1])?.sqrt();
    x.div(&norm)
}

/// Pairwise squared Euclidean distances between rows: `(n, d), (m, d) -> (n, m)`.
pub fn squared_euclidean(a: &Var, b: &Var) -> Result<Var> {
    let (n, d) = dims2(a, "squared_euclidean")?;
    let (m, d2) = dims2(b, "squared_euclidean")?;
    if d != d2 {
        return shape_err("squared_euclidean", format!("row widths {d} and {d2} differ"));
    }
    let diff = a.reshape(&[n, 1, d])?.sub(&b.reshape(&[1, m, d])?)?;
    diff.square().sum_to(&[n, m, 1])?.reshape(&[n, m])
}

/// Pairwise cosine similarity between rows: `(n, d), (m, d) -> (n, m)`.
pub fn cosine_similarity(a: &Var, b: &Var, eps: f64) -> Result<Var> {
    let (_, d) = dims2(a, "cosine_similarity")?;
    let (_, d2) = dims2(b, "cosine_similarity")?;
    if d != d2 {
        return shape_err("cosine_similarity", format!("row widths {d} and {d2} differ"));
    }
    l2_normalize(a, eps)?.matmul(&l2_normalize(b, eps)?.transpose()?)
}
