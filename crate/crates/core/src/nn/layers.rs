//! Composite layers: conv blocks, 3D packing / unpacking, residual blocks.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::nn::graph::{Graph, Var};
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Instance,
    Batch,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub norm: Norm,
    pub activation: Activation,
    pub pack_factor: usize,
    /// Output filters of the 3D convolution inside packing layers.
    pub pack_filters: usize,
}

impl LayerConfig {
    pub fn new(kernel_size: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel_size,
            in_channels,
            out_channels,
            norm: Norm::Instance,
            activation: Activation::Relu,
            pack_factor: 2,
            pack_filters: 1,
        }
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn same_padding(&self) -> usize {
        (self.kernel_size - 1) / 2
    }

    fn pack_area(&self) -> usize {
        self.pack_factor * self.pack_factor
    }

    /// Kernel of the 3D conv: depth spans one pack block, spatial extent is the
    /// layer kernel.
    pub fn conv3d_shape(&self) -> Vec<usize> {
        vec![
            self.pack_filters,
            1,
            self.pack_area(),
            self.kernel_size,
            self.kernel_size,
        ]
    }

    /// Input channels of the 2D conv that follows packing.
    pub fn packed_channels(&self) -> usize {
        self.in_channels * self.pack_area() * self.pack_filters
    }

    /// Output channels of the 2D conv that precedes unpacking.
    pub fn unpack_conv_channels(&self) -> Result<usize> {
        let total = self.out_channels * self.pack_area();
        if total % self.pack_filters != 0 {
            return dim_err(format!(
                "unpack: {} channels not divisible by {} 3D filters",
                total, self.pack_filters
            ));
        }
        Ok(total / self.pack_filters)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Option<Var>,
}

/// Affine parameters for batch norm; ignored by instance norm.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PackParams {
    pub conv3d: ConvParams,
    pub conv: ConvParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

impl<T: Scalar> Graph<T> {
    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(x),
            Activation::LeakyRelu => self.leaky_relu(x, T::from_f64_lossy(LEAKY_SLOPE)),
            Activation::Tanh => self.tanh(x),
            Activation::None => x,
        }
    }

    pub fn normalize(&mut self, x: Var, norm: Norm, affine: Option<NormParams>) -> Result<Var> {
        match norm {
            Norm::Instance => self.instance_norm(x),
            Norm::Batch => {
                let Some(p) = affine else {
                    return dim_err("batch norm requires affine parameters");
                };
                self.batch_norm(x, p.gamma, p.beta)
            }
            Norm::None => Ok(x),
        }
    }

    /// Same-padded conv → norm → activation.
    pub fn conv_block(
        &mut self,
        x: Var,
        conv: ConvParams,
        affine: Option<NormParams>,
        cfg: &LayerConfig,
    ) -> Result<Var> {
        check_channels(self, x, cfg.in_channels, "conv block")?;
        let y = self.conv2d(x, conv.weight, conv.bias, cfg.same_padding())?;
        let y = self.normalize(y, cfg.norm, affine)?;
        Ok(self.activate(y, cfg.activation))
    }

    /// Space2Depth → 3D conv over the folded channel axis → reshape → 2D conv
    /// → norm → activation. Halves H and W for `pack_factor = 2`.
    pub fn pack_layer(&mut self, x: Var, p: PackParams, cfg: &LayerConfig) -> Result<Var> {
        check_channels(self, x, cfg.in_channels, "pack layer")?;
        let s = self.space2depth(x, cfg.pack_factor)?;
        let (n, c, h, w) = self.value(s).dims4()?;
        let vol = self.reshape(s, vec![n, 1, c, h, w])?;
        let vol = self.conv3d(vol, p.conv3d.weight, p.conv3d.bias)?;
        let flat = self.reshape(vol, vec![n, cfg.packed_channels(), h, w])?;
        let y = self.conv2d(flat, p.conv.weight, p.conv.bias, cfg.same_padding())?;
        let y = self.normalize(y, cfg.norm, None)?;
        Ok(self.activate(y, cfg.activation))
    }

    /// 2D conv → norm → activation → 3D conv → reshape → Depth2Space. Doubles
    /// H and W for `pack_factor = 2`.
    pub fn unpack_layer(&mut self, x: Var, p: PackParams, cfg: &LayerConfig) -> Result<Var> {
        check_channels(self, x, cfg.in_channels, "unpack layer")?;
        let y = self.conv2d(x, p.conv.weight, p.conv.bias, cfg.same_padding())?;
        let y = self.normalize(y, cfg.norm, None)?;
        let y = self.activate(y, cfg.activation);
        let (n, c, h, w) = self.value(y).dims4()?;
        let vol = self.reshape(y, vec![n, 1, c, h, w])?;
        let vol = self.conv3d(vol, p.conv3d.weight, p.conv3d.bias)?;
        let flat = self.reshape(vol, vec![n, c * cfg.pack_filters, h, w])?;
        self.depth2space(flat, cfg.pack_factor)
    }

    /// `x + norm(conv(act(norm(conv(x)))))`, or the plain two-conv stack when
    /// `skip` is false.
    pub fn residual_block(
        &mut self,
        x: Var,
        p: ResidualParams,
        cfg: &LayerConfig,
        skip: bool,
    ) -> Result<Var> {
        check_channels(self, x, cfg.in_channels, "residual block")?;
        let y = self.conv_block(x, p.conv1, None, cfg)?;
        let y = self.conv2d(y, p.conv2.weight, p.conv2.bias, cfg.same_padding())?;
        let y = self.normalize(y, cfg.norm, None)?;
        if skip {
            self.add(x, y)
        } else {
            Ok(self.activate(y, cfg.activation))
        }
    }
}

fn check_channels<T: Scalar>(g: &Graph<T>, x: Var, expected: usize, what: &str) -> Result<()> {
    let (_, c, _, _) = g.value(x).dims4()?;
    if c != expected {
        return dim_err(format!("{what}: input has {c} channels, configured for {expected}"));
    }
    Ok(())
}

/// Whether a conv followed by `norm` carries a bias. A per-channel constant
/// is removed exactly by instance and batch norm, so those convs have none.
pub fn conv_has_bias(norm: Norm) -> bool {
    norm == Norm::None
}

fn push_conv(
    out: &mut Vec<(&'static str, Vec<usize>)>,
    names: (&'static str, &'static str),
    shape: Vec<usize>,
    bias: bool,
) {
    let channels = shape[0];
    out.push((names.0, shape));
    if bias {
        out.push((names.1, vec![channels]));
    }
}

/// Parameter shapes of a packing layer, keyed by suffix, in forward order.
pub fn pack_param_shapes(cfg: &LayerConfig) -> Vec<(&'static str, Vec<usize>)> {
    let k = cfg.kernel_size;
    let mut out = Vec::new();
    push_conv(&mut out, ("conv3d.weight", "conv3d.bias"), cfg.conv3d_shape(), true);
    push_conv(
        &mut out,
        ("conv.weight", "conv.bias"),
        vec![cfg.out_channels, cfg.packed_channels(), k, k],
        conv_has_bias(cfg.norm),
    );
    out
}

pub fn unpack_param_shapes(cfg: &LayerConfig) -> Result<Vec<(&'static str, Vec<usize>)>> {
    let k = cfg.kernel_size;
    let mid = cfg.unpack_conv_channels()?;
    let mut out = Vec::new();
    push_conv(
        &mut out,
        ("conv.weight", "conv.bias"),
        vec![mid, cfg.in_channels, k, k],
        conv_has_bias(cfg.norm),
    );
    push_conv(&mut out, ("conv3d.weight", "conv3d.bias"), cfg.conv3d_shape(), true);
    Ok(out)
}

pub fn residual_param_shapes(cfg: &LayerConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (k, c) = (cfg.kernel_size, cfg.in_channels);
    let bias = conv_has_bias(cfg.norm);
    let mut out = Vec::new();
    push_conv(&mut out, ("conv1.weight", "conv1.bias"), vec![c, c, k, k], bias);
    push_conv(&mut out, ("conv2.weight", "conv2.bias"), vec![c, c, k, k], bias);
    out
}
