//! Embedding networks mapping `(batch, 1, length)` series to
//! `(batch, repr_dim)` representations.

use fewshot_autodiff::nn::{self, Activation};
use fewshot_autodiff::{Array, BoundParams, ParamSet, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{CoreError, Result};
use crate::rng::Rng;

pub const INPUT_LENGTH: usize = 920;
pub const INCEPTION_KERNELS: [usize; 3] = [39, 19, 9];
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel_size: usize,
    pub pooling: Pooling,
    pub pool_kernel: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseBlock {
    pub features: usize,
    pub activation: Activation,
}

fn default_length() -> usize {
    INPUT_LENGTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnSpec {
    pub conv_blocks: Vec<ConvBlock>,
    pub dense_blocks: Vec<DenseBlock>,
    pub repr_dim: usize,
    #[serde(default = "default_length")]
    pub input_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InceptionSpec {
    pub module_count: usize,
    pub filters: usize,
    pub activation: Activation,
    pub dense_blocks: Vec<DenseBlock>,
    pub repr_dim: usize,
    #[serde(default = "default_length")]
    pub input_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    Cnn(CnnSpec),
    Inception(InceptionSpec),
}

fn in_range<T: PartialOrd + std::fmt::Display>(field: String, v: T, lo: T, hi: T) -> Result<()> {
    if v < lo || v > hi {
        return Err(CoreError::config(field, format!("{v} outside [{lo}, {hi}]")));
    }
    Ok(())
}

fn validate_dense(prefix: &str, blocks: &[DenseBlock]) -> Result<()> {
    in_range(format!("{prefix}.dense_blocks (count)"), blocks.len(), 1, 3)?;
    for (i, d) in blocks.iter().enumerate() {
        in_range(format!("{prefix}.dense_blocks[{i}].features"), d.features, 64, 256)?;
    }
    Ok(())
}

impl CnnSpec {
    /// Series length after each conv block.
    pub fn lengths(&self) -> Vec<usize> {
        let mut l = self.input_length;
        self.conv_blocks
            .iter()
            .map(|b| {
                l /= b.pool_kernel;
                l
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        in_range("cnn.conv_blocks (count)".into(), self.conv_blocks.len(), 2, 6)?;
        let mut l = self.input_length;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            in_range(format!("cnn.conv_blocks[{i}].channels"), b.channels, 16, 64)?;
            in_range(format!("cnn.conv_blocks[{i}].kernel_size"), b.kernel_size, 2, 11)?;
            in_range(format!("cnn.conv_blocks[{i}].pool_kernel"), b.pool_kernel, 2, 4)?;
            if !(0.0..1.0).contains(&b.dropout) {
                return Err(CoreError::config(
                    format!("cnn.conv_blocks[{i}].dropout"),
                    format!("{} outside [0, 1)", b.dropout),
                ));
            }
            if l < b.pool_kernel {
                return Err(CoreError::config(
                    format!("cnn.conv_blocks[{i}]"),
                    format!("pooling by {} needs length {} but only {l} remains", b.pool_kernel, b.pool_kernel),
                ));
            }
            l /= b.pool_kernel;
        }
        validate_dense("cnn", &self.dense_blocks)?;
        if self.repr_dim == 0 {
            return Err(CoreError::config("cnn.repr_dim", "must be positive"));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        self.conv_blocks.last().map_or(0, |b| b.channels) * self.lengths().last().copied().unwrap_or(0)
    }
}

impl InceptionSpec {
    pub fn validate(&self) -> Result<()> {
        in_range("inception.module_count".into(), self.module_count, 2, 5)?;
        in_range("inception.filters".into(), self.filters, 4, 16)?;
        in_range("inception.repr_dim".into(), self.repr_dim, 64, 256)?;
        validate_dense("inception", &self.dense_blocks)?;
        if self.input_length == 0 {
            return Err(CoreError::config("inception.input_length", "must be positive"));
        }
        Ok(())
    }

    /// Channels leaving each module: three convolution branches plus the
    /// pooling branch.
    pub fn module_channels(&self) -> usize {
        4 * self.filters
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneSpec::Cnn(s) => s.validate(),
            BackboneSpec::Inception(s) => s.validate(),
        }
    }

    pub fn repr_dim(&self) -> usize {
        match self {
            BackboneSpec::Cnn(s) => s.repr_dim,
            BackboneSpec::Inception(s) => s.repr_dim,
        }
    }

    pub fn input_length(&self) -> usize {
        match self {
            BackboneSpec::Cnn(s) => s.input_length,
            BackboneSpec::Inception(s) => s.input_length,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackboneSpec::Cnn(_) => "cnn",
            BackboneSpec::Inception(_) => "inception",
        }
    }

    /// A compact three-block CNN.
    pub fn default_cnn(input_length: usize) -> Self {
        let block = |channels, kernel_size, pool_kernel| ConvBlock {
            channels,
            kernel_size,
            pooling: Pooling::Avg,
            pool_kernel,
            activation: Activation::Elu,
            dropout: 0.0,
        };
        BackboneSpec::Cnn(CnnSpec {
            conv_blocks: vec![block(16, 7, 4), block(32, 5, 4), block(32, 3, 2)],
            dense_blocks: vec![DenseBlock {
                features: 64,
                activation: Activation::Elu,
            }],
            repr_dim: 64,
            input_length,
        })
    }

    /// The smallest InceptionTime network in the search ranges.
    pub fn default_inception(input_length: usize) -> Self {
        BackboneSpec::Inception(InceptionSpec {
            module_count: 2,
            filters: 4,
            activation: Activation::Relu,
            dense_blocks: vec![DenseBlock {
                features: 64,
                activation: Activation::Relu,
            }],
            repr_dim: 64,
            input_length,
        })
    }

    /// Parameter names and shapes, in construction order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: String, c_out, c_in, k| {
            out.push((format!("{name}.w"), vec![c_out, c_in, k]));
            out.push((format!("{name}.b"), vec![c_out]));
        };
        let bn = |out: &mut Vec<(String, Vec<usize>)>, name: String, c| {
            out.push((format!("{name}.gamma"), vec![c]));
            out.push((format!("{name}.beta"), vec![c]));
        };
        let dense = |out: &mut Vec<(String, Vec<usize>)>, blocks: &[DenseBlock], mut d: usize, repr| {
            for (i, b) in blocks.iter().enumerate() {
                out.push((format!("dense{i}.w"), vec![d, b.features]));
                out.push((format!("dense{i}.b"), vec![b.features]));
                d = b.features;
            }
            out.push(("proj.w".into(), vec![d, repr]));
            out.push(("proj.b".into(), vec![repr]));
        };
        match self {
            BackboneSpec::Cnn(s) => {
                let mut c_in = 1;
                for (i, b) in s.conv_blocks.iter().enumerate() {
                    conv(&mut out, format!("block{i}.conv"), b.channels, c_in, b.kernel_size);
                    bn(&mut out, format!("block{i}.bn"), b.channels);
                    c_in = b.channels;
                }
                dense(&mut out, &s.dense_blocks, s.flat_dim(), s.repr_dim);
            }
            BackboneSpec::Inception(s) => {
                let f = s.filters;
                let mut c_in = 1;
                for m in 0..s.module_count {
                    conv(&mut out, format!("module{m}.bottleneck"), f, c_in, 1);
                    for k in INCEPTION_KERNELS {
                        conv(&mut out, format!("module{m}.conv{k}"), f, f, k);
                    }
                    conv(&mut out, format!("module{m}.pool_conv"), f, c_in, 1);
                    bn(&mut out, format!("module{m}.bn"), 4 * f);
                    c_in = 4 * f;
                }
                dense(&mut out, &s.dense_blocks, c_in, s.repr_dim);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Fan-in scaled uniform weights, zero biases and shifts, unit scales.
    pub fn init(&self, rng: &mut Rng) -> Result<ParamSet> {
        self.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in self.layout() {
            let value = if name.ends_with(".w") {
                let fan_in: usize = if shape.len() == 3 { shape[1] * shape[2] } else { shape[0] };
                let bound = (3.0 / fan_in as f64).sqrt();
                ArrayD::from_shape_simple_fn(IxDyn(&shape), || rng.random_range(-bound..bound))
            } else if name.ends_with(".gamma") {
                ArrayD::ones(IxDyn(&shape))
            } else {
                ArrayD::zeros(IxDyn(&shape))
            };
            params.insert(name, value);
        }
        Ok(params)
    }

    /// Representations of a `(batch, 1, length)` input. Dropout is active
    /// only when `train` is set; batch normalization always uses the
    /// statistics of the current batch.
    pub fn forward(&self, p: &BoundParams, x: &Var, train: bool, rng: &mut Rng) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != 1 || shape[2] != self.input_length() {
            return Err(CoreError::Contract(format!(
                "backbone expects (batch, 1, {}), got {shape:?}",
                self.input_length()
            )));
        }
        let h = match self {
            BackboneSpec::Cnn(s) => cnn_forward(s, p, x, train, rng)?,
            BackboneSpec::Inception(s) => inception_forward(s, p, x)?,
        };
        let dense_blocks = match self {
            BackboneSpec::Cnn(s) => &s.dense_blocks,
            BackboneSpec::Inception(s) => &s.dense_blocks,
        };
        let mut h = h;
        for (i, b) in dense_blocks.iter().enumerate() {
            h = b.activation.apply(&nn::linear(&h, p.get(&format!("dense{i}.w"))?, p.get(&format!("dense{i}.b"))?)?);
            finite(&h, || format!("dense block {i}"))?;
        }
        let out = nn::linear(&h, p.get("proj.w")?, p.get("proj.b")?)?;
        finite(&out, || "projection".into())?;
        Ok(out)
    }
}

fn finite(v: &Var, layer: impl FnOnce() -> String) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::Numeric(format!("non-finite activations after {}", layer())))
    }
}

fn conv(p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
    Ok(nn::conv1d_same(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?)?)
}

fn bn(p: &BoundParams, name: &str, x: &Var) -> Result<Var> {
    Ok(nn::batch_norm(x, p.get(&format!("{name}.gamma"))?, p.get(&format!("{name}.beta"))?, BN_EPS)?)
}

fn cnn_forward(s: &CnnSpec, p: &BoundParams, x: &Var, train: bool, rng: &mut Rng) -> Result<Var> {
    let mut h = x.clone();
    for (i, b) in s.conv_blocks.iter().enumerate() {
        h = b.activation.apply(&conv(p, &format!("block{i}.conv"), &h)?);
        h = match b.pooling {
            Pooling::Max => nn::max_pool1d(&h, b.pool_kernel, b.pool_kernel, 0)?,
            Pooling::Avg => nn::avg_pool1d(&h, b.pool_kernel)?,
        };
        h = bn(p, &format!("block{i}.bn"), &h)?;
        if train {
            h = nn::dropout(&h, b.dropout, rng);
        }
        finite(&h, || format!("conv block {i}"))?;
    }
    Ok(nn::flatten(&h)?)
}

fn inception_forward(s: &InceptionSpec, p: &BoundParams, x: &Var) -> Result<Var> {
    let mut h = x.clone();
    for m in 0..s.module_count {
        let bottleneck = conv(p, &format!("module{m}.bottleneck"), &h)?;
        let mut branches = INCEPTION_KERNELS
            .iter()
            .map(|k| conv(p, &format!("module{m}.conv{k}"), &bottleneck))
            .collect::<Result<Vec<_>>>()?;
        let pooled = nn::max_pool1d(&h, 3, 1, 1)?;
        branches.push(conv(p, &format!("module{m}.pool_conv"), &pooled)?);
        let joined = nn::concat_channels(&branches)?;
        h = s.activation.apply(&bn(p, &format!("module{m}.bn"), &joined)?);
        finite(&h, || format!("inception module {m}"))?;
    }
    Ok(nn::global_avg_pool1d(&h)?)
}

/// Stacks the series of `indices` into a `(batch, 1, length)` constant.
pub fn batch_input(tape: &Tape, ds: &Dataset, indices: &[usize]) -> Result<Var> {
    let len = ds
        .series_len()
        .ok_or_else(|| CoreError::Contract("empty dataset".into()))?;
    let mut data = Vec::with_capacity(indices.len() * len);
    for &j in indices {
        data.extend_from_slice(ds.sample(j).series.values());
    }
    let arr: Array = ArrayD::from_shape_vec(IxDyn(&[indices.len(), 1, len]), data)
        .map_err(|e| CoreError::Contract(e.to_string()))?;
    Ok(tape.constant(arr))
}
