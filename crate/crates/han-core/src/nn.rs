//! Layer building blocks: Conv-BatchNorm-Activation blocks, parameter
//! initialization and the named parameter registry used for checkpoints.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{BatchNormMode, Result, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Elu,
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Elu => x.elu(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::None => x.clone(),
        }
    }
}

/// Gaussian-initialized tensor, bit-reproducible for a given rng state.
pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], mean: f64, std: f64) -> Tensor {
    let dist = Normal::new(mean, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::param(shape, data).expect("consistent length")
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        BatchNorm2d {
            gamma: normal_tensor(rng, &[channels], 1.0, 0.02),
            beta: Tensor::param(&[channels], vec![0.0; channels]).unwrap(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        x.batchnorm2d(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            mode,
        )
    }
}

/// Convolution (or transposed convolution) followed by optional batch norm and
/// an activation, in that fixed order.
pub struct ConvBlock {
    pub name: String,
    pub kernel: Tensor,
    pub bias: Tensor,
    pub norm: Option<BatchNorm2d>,
    pub activation: Activation,
    pub stride: usize,
    pub padding: usize,
    pub transpose: bool,
}

pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transpose: bool,
    pub norm: bool,
    pub activation: Activation,
}

impl ConvBlock {
    pub fn new(name: impl Into<String>, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let kshape = if spec.transpose {
            // adjoint layout: [in, out, kh, kw]
            [spec.in_channels, spec.out_channels, spec.kernel, spec.kernel]
        } else {
            [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel]
        };
        ConvBlock {
            name: name.into(),
            kernel: normal_tensor(rng, &kshape, 0.0, 0.02),
            bias: Tensor::param(&[spec.out_channels, 1, 1], vec![0.0; spec.out_channels]).unwrap(),
            norm: if spec.norm { Some(BatchNorm2d::new(spec.out_channels, rng)) } else { None },
            activation: spec.activation,
            stride: spec.stride,
            padding: spec.padding,
            transpose: spec.transpose,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        let conv = if self.transpose {
            x.conv2d_transpose(&self.kernel, self.stride, self.padding)?
        } else {
            x.conv2d(&self.kernel, self.stride, self.padding)?
        };
        let biased = conv.add(&self.bias)?;
        let normed = match &self.norm {
            Some(bn) => bn.forward(&biased, mode)?,
            None => biased,
        };
        Ok(self.activation.apply(&normed))
    }

    pub fn register(&self, params: &mut ParameterSet) {
        params.push(format!("{}.kernel", self.name), self.kernel.clone());
        params.push(format!("{}.bias", self.name), self.bias.clone());
        if let Some(bn) = &self.norm {
            params.push(format!("{}.bn.gamma", self.name), bn.gamma.clone());
            params.push(format!("{}.bn.beta", self.name), bn.beta.clone());
            params.push(format!("{}.bn.running_mean", self.name), bn.running_mean.clone());
            params.push(format!("{}.bn.running_var", self.name), bn.running_var.clone());
        }
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = self.kernel.numel() + self.bias.numel();
        if let Some(bn) = &self.norm {
            n += bn.gamma.numel() + bn.beta.numel();
        }
        n
    }
}

/// Ordered name -> tensor registry. Whether an entry is trainable is recorded
/// at registration time, so parameters can be frozen and unfrozen without
/// losing track of which tensors are plain buffers (running statistics).
#[derive(Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor, bool)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, tensor: Tensor) {
        assert!(
            !self.entries.iter().any(|(n, _, _)| *n == name),
            "duplicate parameter name {name}"
        );
        let trainable = tensor.requires_grad();
        self.entries.push((name, tensor, trainable));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t, _)| (n.as_str(), t))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().filter(|(_, _, tr)| *tr).map(|(n, t, _)| (n.as_str(), t))
    }

    /// Enable or disable gradients on the trainable entries (phase freezing).
    pub fn set_trainable_enabled(&self, enabled: bool) {
        for (_, t, tr) in &self.entries {
            if *tr {
                t.set_requires_grad(enabled);
            }
        }
    }

    pub fn zero_grads(&self) {
        for (_, t, _) in &self.entries {
            t.zero_grad();
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _, _)| n == name).map(|(_, t, _)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t, _)| t.numel()).sum()
    }

    pub fn trainable_values(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// Concatenated little-endian bytes of every entry, in registry order.
    pub fn byte_image(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t, _) in &self.entries {
            for v in t.data().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Bytes of the trainable entries only, excluding running-stat buffers.
    pub fn trainable_byte_image(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in self.trainable() {
            out.extend_from_slice(name.as_bytes());
            for v in t.data().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}
