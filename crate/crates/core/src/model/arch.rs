//! Architecture description and named presets.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, LayerConfig, Norm};

/// One stage of a domain encoder or decoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSpec {
    /// Packing layer to the given channel count; halves H and W.
    Pack(usize),
    /// Unpacking layer to the given channel count; doubles H and W.
    Unpack(usize),
    /// Two same-shape conv + norm pairs.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub image_size: usize,
    pub image_channels: usize,
    pub depth_channels: usize,
    /// Output channels of the segmentation head.
    pub seg_classes: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_activation: Activation,
    pub encoder: Vec<BlockSpec>,
    pub latent_channels: usize,
    /// Channels produced by the first decoder block from the latent grid.
    pub decoder_entry_channels: usize,
    pub decoder: Vec<BlockSpec>,
    pub kernel_size: usize,
    pub head_kernel: usize,
    pub block_norm: Norm,
    pub latent_norm: Norm,
    pub activation: Activation,
    /// Tanh on the RGB and depth heads. The segmentation head never has one.
    pub output_tanh: bool,
    pub pack_factor: usize,
    pub pack_filters: usize,
    /// Additive skip in residual stages.
    pub residual: bool,
    /// Blocks shared between the two domain encoders (counted back from the
    /// latent block) and between the two domain decoders (counted forward
    /// from the entry block). At least 1.
    pub share_blocks: usize,
    pub logvar_clamp: f64,
    pub init_std: f64,
}

impl ArchConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-256" => Ok(Self::paper_256()),
            "paper-256-share3" => Ok(Self {
                name: "paper-256-share3".into(),
                ..Self::paper_256().with_share_blocks(3)
            }),
            "desk-32" => Ok(Self::desk(32)),
            "desk-64" => Ok(Self::desk(64)),
            "identity-toy" => Ok(Self::identity_toy()),
            other => Err(Error::Usage(format!(
                "unknown preset `{other}` (valid: {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    pub const PRESETS: [&'static str; 5] =
        ["paper-256", "paper-256-share3", "desk-32", "desk-64", "identity-toy"];

    pub fn paper_256() -> Self {
        use BlockSpec::*;
        Self {
            name: "paper-256".into(),
            image_size: 256,
            image_channels: 3,
            depth_channels: 1,
            seg_classes: 15,
            stem_channels: 64,
            stem_kernel: 7,
            stem_activation: Activation::LeakyRelu,
            encoder: vec![
                Pack(76),
                Pack(88),
                Pack(100),
                Pack(128),
                Pack(200),
                Residual,
                Residual,
                Pack(250),
            ],
            latent_channels: 300,
            decoder_entry_channels: 250,
            decoder: vec![
                Unpack(200),
                Residual,
                Residual,
                Unpack(128),
                Unpack(100),
                Unpack(88),
                Unpack(76),
                Unpack(64),
            ],
            kernel_size: 3,
            head_kernel: 7,
            block_norm: Norm::Instance,
            latent_norm: Norm::Batch,
            activation: Activation::Relu,
            output_tanh: true,
            pack_factor: 2,
            pack_filters: 1,
            residual: true,
            share_blocks: 1,
            logvar_clamp: 10.0,
            init_std: 0.02,
        }
    }

    /// Same layer types as `paper-256` with four packing stages and narrow
    /// channels, for `size`×`size` images.
    pub fn desk(size: usize) -> Self {
        use BlockSpec::*;
        Self {
            name: format!("desk-{size}"),
            image_size: size,
            seg_classes: 6,
            stem_channels: 8,
            encoder: vec![Pack(12), Pack(16), Pack(24), Residual, Pack(32)],
            latent_channels: 48,
            decoder_entry_channels: 32,
            decoder: vec![Unpack(24), Residual, Unpack(16), Unpack(12), Unpack(8)],
            ..Self::paper_256()
        }
    }

    /// Pointwise, norm-free, activation-free network on 3 channels. With
    /// identity weights every path reproduces its input.
    pub fn identity_toy() -> Self {
        Self {
            name: "identity-toy".into(),
            image_size: 4,
            image_channels: 3,
            depth_channels: 3,
            seg_classes: 3,
            stem_channels: 3,
            stem_kernel: 1,
            stem_activation: Activation::None,
            encoder: Vec::new(),
            latent_channels: 3,
            decoder_entry_channels: 3,
            decoder: Vec::new(),
            kernel_size: 1,
            head_kernel: 1,
            block_norm: Norm::None,
            latent_norm: Norm::None,
            activation: Activation::None,
            output_tanh: false,
            pack_factor: 2,
            pack_filters: 1,
            residual: true,
            share_blocks: 1,
            logvar_clamp: 10.0,
            init_std: 0.02,
        }
    }

    pub fn with_share_blocks(mut self, n: usize) -> Self {
        self.share_blocks = n;
        self
    }

    /// Total spatial reduction between the image and the latent grid.
    pub fn downsample(&self) -> usize {
        self.encoder
            .iter()
            .filter(|b| matches!(b, BlockSpec::Pack(_)))
            .fold(1, |acc, _| acc * self.pack_factor)
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_size();
        [self.latent_channels, s, s]
    }

    /// Flattened latent vector length.
    pub fn latent_dim(&self) -> usize {
        let [c, h, w] = self.latent_shape();
        c * h * w
    }

    pub fn encoder_out_channels(&self) -> usize {
        self.encoder.iter().fold(self.stem_channels, |c, b| match b {
            BlockSpec::Pack(o) | BlockSpec::Unpack(o) => *o,
            BlockSpec::Residual => c,
        })
    }

    pub fn decoder_out_channels(&self) -> usize {
        self.decoder.iter().fold(self.decoder_entry_channels, |c, b| match b {
            BlockSpec::Pack(o) | BlockSpec::Unpack(o) => *o,
            BlockSpec::Residual => c,
        })
    }

    pub fn layer(&self, in_channels: usize, out_channels: usize) -> LayerConfig {
        LayerConfig {
            kernel_size: self.kernel_size,
            in_channels,
            out_channels,
            norm: self.block_norm,
            activation: self.activation,
            pack_factor: self.pack_factor,
            pack_filters: self.pack_filters,
        }
    }

    /// Rejects image sizes the encoder cannot reduce to an integral grid.
    pub fn check_image_size(&self, size: usize) -> Result<()> {
        let d = self.downsample();
        if size == 0 || size % d != 0 {
            let lower = size / d * d;
            return Err(Error::Dimension(format!(
                "image size {size} is not divisible by the total downsample factor {d} of preset \
                 `{}`; use a multiple of {d} such as {} or {}",
                self.name,
                lower.max(d),
                lower + d
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(format!("architecture `{}`: {m}", self.name)));
        if self.kernel_size % 2 == 0 || self.head_kernel % 2 == 0 || self.stem_kernel % 2 == 0 {
            return bad("kernel sizes must be odd".into());
        }
        if self.share_blocks == 0 {
            return bad("share_blocks must be at least 1".into());
        }
        if self.share_blocks > self.encoder.len() + 1 || self.share_blocks > self.decoder.len() + 1 {
            return bad(format!(
                "share_blocks {} exceeds the available encoder/decoder blocks",
                self.share_blocks
            ));
        }
        if self.encoder.iter().any(|b| matches!(b, BlockSpec::Unpack(_)))
            || self.decoder.iter().any(|b| matches!(b, BlockSpec::Pack(_)))
        {
            return bad("packing belongs to the encoder and unpacking to the decoder".into());
        }
        let ups = self
            .decoder
            .iter()
            .filter(|b| matches!(b, BlockSpec::Unpack(_)))
            .count();
        let downs = self
            .encoder
            .iter()
            .filter(|b| matches!(b, BlockSpec::Pack(_)))
            .count();
        if ups != downs {
            return bad(format!("{downs} packing stages but {ups} unpacking stages"));
        }
        if !(self.logvar_clamp > 0.0) || !(self.init_std > 0.0) {
            return bad("logvar_clamp and init_std must be positive".into());
        }
        for b in &self.decoder {
            if let BlockSpec::Unpack(o) = b {
                self.layer(1, *o).unpack_conv_channels()?;
            }
        }
        self.check_image_size(self.image_size)
    }
}

impl FromStr for ArchConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::preset(s)
    }
}
