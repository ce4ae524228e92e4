//! Minimal differentiable layer engine.
//!
//! Tensors are f64 and row-major. Image-like activations are
//! (batch, channels, height = electrodes, width = time).

mod adam;
mod conv;
mod gradcheck;
mod layers;
mod tensor;
pub(crate) use tensor::gemm;

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, DepthwiseConv2d, Padding, SeparableConv2d};
pub use gradcheck::{grad_check, numeric_gradient, relative_error, GradCheckReport, GRAD_FLOOR};
pub use layers::{
    elu, softmax_rows, Act, Activation, BatchNorm, Dense, Dropout, Flatten, L2Normalize, Pool2d,
    PoolKind, Softmax, BN_EPS, BN_MOMENTUM, NORM_EPS,
};
pub use tensor::Tensor;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: &'static str,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: &'static str, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { name, value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Serializable layer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        padding: Padding,
        bias: bool,
    },
    DepthwiseConv2d {
        channels: usize,
        multiplier: usize,
        kernel: (usize, usize),
        padding: Padding,
        bias: bool,
    },
    SeparableConv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        padding: Padding,
        bias: bool,
    },
    BatchNorm {
        features: usize,
    },
    Elu,
    Relu,
    AvgPool {
        pool: (usize, usize),
    },
    MaxPool {
        pool: (usize, usize),
    },
    Dropout {
        p: f64,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    L2Normalize,
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::DepthwiseConv2d { .. } => "depthwise_conv2d",
            LayerSpec::SeparableConv2d { .. } => "separable_conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Elu => "elu",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::L2Normalize => "l2_normalize",
            LayerSpec::Softmax => "softmax",
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d { out_ch, kernel, .. } | LayerSpec::SeparableConv2d { out_ch, kernel, .. } => {
                write!(f, "{} {}x({}x{})", self.kind_name(), out_ch, kernel.0, kernel.1)
            }
            LayerSpec::DepthwiseConv2d { multiplier, kernel, .. } => {
                write!(f, "depthwise_conv2d ({}x{}) D={}", kernel.0, kernel.1, multiplier)
            }
            LayerSpec::AvgPool { pool } | LayerSpec::MaxPool { pool } => {
                write!(f, "{} ({}x{})", self.kind_name(), pool.0, pool.1)
            }
            LayerSpec::Dropout { p } => write!(f, "dropout {p}"),
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense {inputs}->{outputs}"),
            other => f.write_str(other.kind_name()),
        }
    }
}

/// Glorot-uniform samples for the given fans.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_vec(shape, data).expect("glorot shape")
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    DepthwiseConv2d(DepthwiseConv2d),
    SeparableConv2d(SeparableConv2d),
    BatchNorm(BatchNorm),
    Act(Act),
    Pool(Pool2d),
    Dropout(Dropout),
    Flatten(Flatten),
    Dense(Dense),
    L2Normalize(L2Normalize),
    Softmax(Softmax),
}

impl Layer {
    /// Builds a freshly initialized layer.
    pub fn from_spec(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Layer {
        match *spec {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, padding, bias } => {
                let area = kernel.0 * kernel.1;
                let w = glorot_uniform(&[out_ch, in_ch, kernel.0, kernel.1], in_ch * area, out_ch * area, rng);
                Layer::Conv2d(Conv2d::new(in_ch, out_ch, kernel, padding, bias, w))
            }
            LayerSpec::DepthwiseConv2d { channels, multiplier, kernel, padding, bias } => {
                let area = kernel.0 * kernel.1;
                let w = glorot_uniform(&[channels * multiplier, kernel.0, kernel.1], area, area * multiplier, rng);
                Layer::DepthwiseConv2d(DepthwiseConv2d::new(channels, multiplier, kernel, padding, bias, w))
            }
            LayerSpec::SeparableConv2d { in_ch, out_ch, kernel, padding, bias } => {
                let area = kernel.0 * kernel.1;
                let dw = glorot_uniform(&[in_ch, kernel.0, kernel.1], area, area, rng);
                let pw = glorot_uniform(&[out_ch, in_ch, 1, 1], in_ch, out_ch, rng);
                Layer::SeparableConv2d(SeparableConv2d::new(
                    DepthwiseConv2d::new(in_ch, 1, kernel, padding, false, dw),
                    Conv2d::new(in_ch, out_ch, (1, 1), Padding::Valid, bias, pw),
                ))
            }
            LayerSpec::BatchNorm { features } => Layer::BatchNorm(BatchNorm::new(features)),
            LayerSpec::Elu => Layer::Act(Act::new(Activation::Elu)),
            LayerSpec::Relu => Layer::Act(Act::new(Activation::Relu)),
            LayerSpec::AvgPool { pool } => Layer::Pool(Pool2d::new(PoolKind::Avg, pool)),
            LayerSpec::MaxPool { pool } => Layer::Pool(Pool2d::new(PoolKind::Max, pool)),
            LayerSpec::Dropout { p } => Layer::Dropout(Dropout::new(p, rng.gen())),
            LayerSpec::Flatten => Layer::Flatten(Flatten::default()),
            LayerSpec::Dense { inputs, outputs } => {
                let w = glorot_uniform(&[outputs, inputs], inputs, outputs, rng);
                Layer::Dense(Dense::new(inputs, outputs, w))
            }
            LayerSpec::L2Normalize => Layer::L2Normalize(L2Normalize::default()),
            LayerSpec::Softmax => Layer::Softmax(Softmax::default()),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                kernel: c.kernel,
                padding: c.padding,
                bias: c.bias.is_some(),
            },
            Layer::DepthwiseConv2d(c) => LayerSpec::DepthwiseConv2d {
                channels: c.channels,
                multiplier: c.multiplier,
                kernel: c.kernel,
                padding: c.padding,
                bias: c.bias.is_some(),
            },
            Layer::SeparableConv2d(s) => LayerSpec::SeparableConv2d {
                in_ch: s.depthwise.channels,
                out_ch: s.pointwise.out_ch,
                kernel: s.depthwise.kernel,
                padding: s.depthwise.padding,
                bias: s.pointwise.bias.is_some(),
            },
            Layer::BatchNorm(b) => LayerSpec::BatchNorm { features: b.features },
            Layer::Act(a) => match a.kind {
                Activation::Elu => LayerSpec::Elu,
                Activation::Relu => LayerSpec::Relu,
            },
            Layer::Pool(p) => match p.kind {
                PoolKind::Avg => LayerSpec::AvgPool { pool: p.pool },
                PoolKind::Max => LayerSpec::MaxPool { pool: p.pool },
            },
            Layer::Dropout(d) => LayerSpec::Dropout { p: d.p },
            Layer::Flatten(_) => LayerSpec::Flatten,
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs,
                outputs: d.outputs,
            },
            Layer::L2Normalize(_) => LayerSpec::L2Normalize,
            Layer::Softmax(_) => LayerSpec::Softmax,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = match self {
            Layer::Conv2d(l) => l.forward(x, mode),
            Layer::DepthwiseConv2d(l) => l.forward(x, mode),
            Layer::SeparableConv2d(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Act(l) => l.forward(x, mode),
            Layer::Pool(l) => l.forward(x, mode),
            Layer::Dropout(l) => l.forward(x, mode),
            Layer::Flatten(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x, mode),
            Layer::L2Normalize(l) => l.forward(x),
            Layer::Softmax(l) => l.forward(x),
        }?;
        debug_assert!(y.is_finite(), "non-finite output from {}", self.spec());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.backward(dy),
            Layer::DepthwiseConv2d(l) => l.backward(dy),
            Layer::SeparableConv2d(l) => l.backward(dy),
            Layer::BatchNorm(l) => l.backward(dy),
            Layer::Act(l) => l.backward(dy),
            Layer::Pool(l) => l.backward(dy),
            Layer::Dropout(l) => l.backward(dy),
            Layer::Flatten(l) => l.backward(dy),
            Layer::Dense(l) => l.backward(dy),
            Layer::L2Normalize(l) => l.backward(dy),
            Layer::Softmax(l) => l.backward(dy),
        }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        use crate::error::Error;
        match self {
            Layer::Conv2d(l) => l.output_shape(input),
            Layer::DepthwiseConv2d(l) => l.output_shape(input),
            Layer::SeparableConv2d(l) => l.output_shape(input),
            Layer::Pool(l) => l.output_shape(input),
            Layer::Flatten(_) => Ok(vec![input[0], input[1..].iter().product()]),
            Layer::Dense(d) => {
                if input.len() == 2 && input[1] == d.inputs {
                    Ok(vec![input[0], d.outputs])
                } else {
                    Err(Error::ShapeMismatch {
                        context: "dense".into(),
                        expected: vec![input[0], d.inputs],
                        actual: input.to_vec(),
                    })
                }
            }
            Layer::BatchNorm(b) => {
                if input.len() >= 2 && input[1] == b.features {
                    Ok(input.to_vec())
                } else {
                    Err(Error::ShapeMismatch {
                        context: "batch_norm".into(),
                        expected: vec![input[0], b.features],
                        actual: input.to_vec(),
                    })
                }
            }
            _ => Ok(input.to_vec()),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv2d(l) => l.params(),
            Layer::DepthwiseConv2d(l) => l.params(),
            Layer::SeparableConv2d(l) => l.params(),
            Layer::BatchNorm(l) => l.params(),
            Layer::Dense(l) => l.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv2d(l) => l.params_mut(),
            Layer::DepthwiseConv2d(l) => l.params_mut(),
            Layer::SeparableConv2d(l) => l.params_mut(),
            Layer::BatchNorm(l) => l.params_mut(),
            Layer::Dense(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    /// Parameters followed by non-trainable state (batch-norm running stats).
    pub fn state(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.params().into_iter().map(|p| &p.value).collect();
        if let Layer::BatchNorm(b) = self {
            v.push(&b.running_mean);
            v.push(&b.running_var);
        }
        v
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm(b) => vec![
                &mut b.gamma.value,
                &mut b.beta.value,
                &mut b.running_mean,
                &mut b.running_var,
            ],
            other => other.params_mut().into_iter().map(|p| &mut p.value).collect(),
        }
    }

    /// Drops cached activations.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.clear_cache(),
            Layer::DepthwiseConv2d(l) => l.clear_cache(),
            Layer::SeparableConv2d(l) => l.clear_cache(),
            Layer::BatchNorm(l) => l.clear_cache(),
            Layer::Act(l) => l.clear_cache(),
            Layer::Pool(l) => l.clear_cache(),
            Layer::Dropout(l) => l.clear_cache(),
            Layer::Dense(l) => l.clear_cache(),
            Layer::Flatten(_) | Layer::L2Normalize(_) | Layer::Softmax(_) => {}
        }
    }
}

/// An ordered layer stack.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn from_specs(specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Self {
        Sequential::new(specs.iter().map(|s| Layer::from_spec(s, rng)).collect())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mut cur = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    /// Output shape after every layer.
    pub fn shape_trace(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shape = input.to_vec();
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            trace.push(shape.clone());
        }
        Ok(trace)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn set_dropout_frozen(&mut self, frozen: bool) {
        for layer in &mut self.layers {
            if let Layer::Dropout(d) = layer {
                d.freeze_mask = frozen;
            }
        }
    }
}
