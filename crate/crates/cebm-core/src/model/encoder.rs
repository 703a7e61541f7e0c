//! Encoder configuration, initialization, and tape-level forward pass.
//!
//! An encoder is a conv/dense trunk that maps a [N,C,H,W] batch to a flat
//! feature matrix [N,F]. The statistic heads that turn features into
//! (t1, t2) belong to the models, not the trunk, so the unconditional
//! baseline can share the exact same trunk definition.

use crate::autodiff::{ConvDims, NodeId, Tape, TensorValue};
use crate::error::{Error, Result};
use crate::rng::Stream;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Highest latent dimension the desk-scale configuration accepts.
pub const MAX_LATENT_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Swish,
    Relu,
    LeakyRelu,
    Softplus,
    Linear,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Swish => tape.swish(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, 0.01),
            Activation::Softplus => tape.softplus(x),
            Activation::Linear => Ok(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        act: Activation,
    },
    Dense {
        out: usize,
        act: Activation,
    },
}

/// Trunk architecture plus the latent dimension K the statistic heads use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub layers: Vec<LayerSpec>,
    pub latent_dim: usize,
}

impl EncoderConfig {
    /// Three-conv trunk with a dense feature layer: one 3x3 stride-1 layer,
    /// then two 4x4 stride-2 downsamples.
    pub fn conv_small(in_channels: usize, height: usize, width: usize, k: usize) -> Self {
        Self {
            in_channels,
            in_height: height,
            in_width: width,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    act: Activation::Swish,
                },
                LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                    act: Activation::Swish,
                },
                LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                    act: Activation::Swish,
                },
                LayerSpec::Dense {
                    out: 128,
                    act: Activation::Swish,
                },
            ],
            latent_dim: k,
        }
    }

    /// Two-conv trunk for fast desk runs on small images.
    pub fn conv_tiny(in_channels: usize, height: usize, width: usize, k: usize) -> Self {
        Self {
            in_channels,
            in_height: height,
            in_width: width,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    act: Activation::Swish,
                },
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 4,
                    stride: 2,
                    padding: 1,
                    act: Activation::Swish,
                },
                LayerSpec::Dense {
                    out: 64,
                    act: Activation::Swish,
                },
            ],
            latent_dim: k,
        }
    }

    /// Dense-only trunk over a flat input of length `d`.
    pub fn mlp(d: usize, widths: &[usize], k: usize) -> Self {
        Self {
            in_channels: 1,
            in_height: 1,
            in_width: d,
            layers: widths
                .iter()
                .map(|&w| LayerSpec::Dense {
                    out: w,
                    act: Activation::Swish,
                })
                .collect(),
            latent_dim: k,
        }
    }

    pub fn input_numel(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.in_height, self.in_width]
    }

    /// Validate the layer stack and return the flat feature length the trunk
    /// produces. Conv layers may not follow dense layers.
    pub fn feature_len(&self) -> Result<usize> {
        if self.latent_dim == 0 || self.latent_dim > MAX_LATENT_DIM {
            return Err(Error::invalid(
                "latent_dim",
                format!("must be in 1..={MAX_LATENT_DIM}, got {}", self.latent_dim),
            ));
        }
        if self.in_channels == 0 || self.in_height == 0 || self.in_width == 0 {
            return Err(Error::invalid("input", "extents must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("layers", "trunk needs at least one layer"));
        }
        let (mut c, mut h, mut w) = (self.in_channels, self.in_height, self.in_width);
        let mut flat: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if flat.is_some() {
                        return Err(Error::invalid(
                            "layers",
                            format!("conv layer {i} after a dense layer"),
                        ));
                    }
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::invalid(
                            "layers",
                            format!("layer {i}: extents and stride must be positive"),
                        ));
                    }
                    let oh = ConvDims::output_extent(h, kernel, stride, padding);
                    let ow = ConvDims::output_extent(w, kernel, stride, padding);
                    match (oh, ow) {
                        (Some(a), Some(b)) => {
                            c = out_channels;
                            h = a;
                            w = b;
                        }
                        _ => {
                            return Err(Error::invalid(
                                "layers",
                                format!("layer {i}: kernel {kernel} exceeds padded input {h}x{w}"),
                            ))
                        }
                    }
                }
                LayerSpec::Dense { out, .. } => {
                    if out == 0 {
                        return Err(Error::invalid("layers", format!("layer {i}: zero width")));
                    }
                    flat = Some(out);
                }
            }
        }
        Ok(flat.unwrap_or(c * h * w))
    }

    /// Initialize trunk parameters: fan-in-scaled uniform weights
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases. Returns (name, value)
    /// pairs in forward order.
    pub fn init_params(&self, rng: &mut Stream) -> Result<Vec<(String, TensorValue)>> {
        self.feature_len()?;
        let mut out = Vec::new();
        let (mut c, mut h, mut w) = (self.in_channels, self.in_height, self.in_width);
        let mut flat: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let fan_in = c * kernel * kernel;
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let data: Vec<f64> = (0..out_channels * c * kernel * kernel)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    out.push((
                        format!("enc{i}_w"),
                        TensorValue::new(vec![out_channels, c, kernel, kernel], data)?,
                    ));
                    out.push((format!("enc{i}_b"), TensorValue::zeros(vec![out_channels])));
                    h = ConvDims::output_extent(h, kernel, stride, padding).unwrap();
                    w = ConvDims::output_extent(w, kernel, stride, padding).unwrap();
                    c = out_channels;
                }
                LayerSpec::Dense { out: width, .. } => {
                    let fan_in = flat.unwrap_or(c * h * w);
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let data: Vec<f64> = (0..fan_in * width)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    out.push((
                        format!("enc{i}_w"),
                        TensorValue::new(vec![fan_in, width], data)?,
                    ));
                    out.push((format!("enc{i}_b"), TensorValue::zeros(vec![width])));
                    flat = Some(width);
                }
            }
        }
        Ok(out)
    }

    /// Number of (name, tensor) pairs `init_params` produces.
    pub fn param_count(&self) -> usize {
        self.layers.len() * 2
    }

    /// Forward the trunk on the tape. `params` must hold the trunk parameter
    /// nodes in `init_params` order. Returns the [N,F] feature node.
    pub fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4
            || shape[1] != self.in_channels
            || shape[2] != self.in_height
            || shape[3] != self.in_width
        {
            return Err(Error::shape(
                "encoder forward",
                format!(
                    "[N,{},{},{}]",
                    self.in_channels, self.in_height, self.in_width
                ),
                format!("{shape:?}"),
            ));
        }
        if params.len() != self.param_count() {
            return Err(Error::shape(
                "encoder forward",
                format!("{} parameter nodes", self.param_count()),
                format!("{}", params.len()),
            ));
        }
        let n = shape[0];
        let mut cur = x;
        let mut is_flat = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = params[2 * i];
            let b = params[2 * i + 1];
            match *layer {
                LayerSpec::Conv { stride, padding, act, .. } => {
                    cur = tape.conv2d(cur, w, stride, padding)?;
                    cur = tape.add(cur, b)?;
                    cur = act.apply(tape, cur)?;
                }
                LayerSpec::Dense { act, .. } => {
                    if !is_flat {
                        let numel = tape.value(cur).numel() / n;
                        cur = tape.reshape(cur, vec![n, numel])?;
                        is_flat = true;
                    }
                    cur = tape.matmul(cur, w)?;
                    cur = tape.add(cur, b)?;
                    cur = act.apply(tape, cur)?;
                }
            }
        }
        if !is_flat {
            let numel = tape.value(cur).numel() / n;
            cur = tape.reshape(cur, vec![n, numel])?;
        }
        Ok(cur)
    }
}
