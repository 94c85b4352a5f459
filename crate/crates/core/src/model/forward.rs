//! Encoder and decoder forward passes on a [`Graph`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::arch::BlockSpec;
use crate::model::bundle::{Group, ModelBundle};
use crate::nn::{Activation, ConvParams, Graph, Norm, NormParams, PackParams, ResidualParams, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Real,
    Sim,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::Real => Domain::Sim,
            Domain::Sim => Domain::Real,
        }
    }

    pub fn encoder(self) -> Group {
        match self {
            Domain::Real => Group::EncR,
            Domain::Sim => Group::EncS,
        }
    }

    pub fn head(self) -> Head {
        match self {
            Domain::Real => Head::Real,
            Domain::Sim => Head::Sim,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Real => "real",
            Domain::Sim => "sim",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Real,
    Sim,
    Depth,
    Seg,
}

impl Head {
    pub fn group(self) -> Group {
        match self {
            Head::Real => Group::DecR,
            Head::Sim => Group::DecS,
            Head::Depth => Group::DecDepth,
            Head::Seg => Group::DecSeg,
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Head::Real),
            "sim" => Ok(Head::Sim),
            "depth" => Ok(Head::Depth),
            "seg" => Ok(Head::Seg),
            other => Err(Error::Usage(format!(
                "unknown decoder head `{other}` (valid: real, sim, depth, seg)"
            ))),
        }
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Domain::Real),
            "sim" => Ok(Domain::Sim),
            other => Err(Error::Usage(format!("unknown domain `{other}` (valid: real, sim)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    /// `z = mu + exp(logvar / 2) · eps`, `eps ~ N(0, 1)`.
    Sample,
    /// `z = mu`.
    Mean,
}

/// Latent nodes on a graph. In mean mode `z` is `mu`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

#[derive(Clone, Debug)]
pub struct LatentCode<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub z: Tensor<T>,
}

/// Binds model parameters to graph leaves on first use. Parameters in
/// trainable groups become gradient leaves; all others are constants.
/// Aliased names bind to one node, so gradients through every alias sum.
pub struct Binder<'m, T> {
    model: &'m ModelBundle<T>,
    trainable: BTreeSet<Group>,
    vars: BTreeMap<String, Var>,
    trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'m, T: Scalar> Binder<'m, T> {
    pub fn new(model: &'m ModelBundle<T>, trainable: &[Group]) -> Self {
        Self {
            model,
            trainable: trainable.iter().copied().collect(),
            vars: BTreeMap::new(),
            trace: None,
        }
    }

    /// Every parameter is a constant.
    pub fn frozen(model: &'m ModelBundle<T>) -> Self {
        Self::new(model, &[])
    }

    /// Every parameter is a gradient leaf.
    pub fn all_trainable(model: &'m ModelBundle<T>) -> Self {
        Self::new(model, &Group::ALL)
    }

    pub fn model(&self) -> &'m ModelBundle<T> {
        self.model
    }

    /// Records the output shape of every layer from now on.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<(String, Vec<usize>)> {
        self.trace.take().unwrap_or_default()
    }

    /// Canonical name → bound node, for every parameter used so far.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn param(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        let canonical = self.model.canonical(name);
        if let Some(&v) = self.vars.get(canonical) {
            return Ok(v);
        }
        let t = self.model.param(canonical)?.clone();
        let trainable = Group::of(canonical).is_some_and(|gr| self.trainable.contains(&gr));
        let v = if trainable { g.leaf(t) } else { g.constant(t) };
        self.vars.insert(canonical.to_string(), v);
        Ok(v)
    }

    fn optional(&mut self, g: &mut Graph<T>, name: &str) -> Result<Option<Var>> {
        if self.model.get(name).is_some() {
            self.param(g, name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn conv(&mut self, g: &mut Graph<T>, prefix: &str) -> Result<ConvParams> {
        Ok(ConvParams {
            weight: self.param(g, &format!("{prefix}.weight"))?,
            bias: self.optional(g, &format!("{prefix}.bias"))?,
        })
    }

    fn affine(&mut self, g: &mut Graph<T>, prefix: &str, norm: Norm) -> Result<Option<NormParams>> {
        if norm != Norm::Batch {
            return Ok(None);
        }
        Ok(Some(NormParams {
            gamma: self.param(g, &format!("{prefix}.bn.gamma"))?,
            beta: self.param(g, &format!("{prefix}.bn.beta"))?,
        }))
    }

    fn record(&mut self, g: &Graph<T>, label: String, v: Var) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push((label, g.shape(v).to_vec()));
        }
    }

    fn block(&mut self, g: &mut Graph<T>, x: Var, prefix: &str, spec: BlockSpec) -> Result<Var> {
        let arch = self.model.arch();
        let c_in = g.shape(x)[1];
        match spec {
            BlockSpec::Pack(o) | BlockSpec::Unpack(o) => {
                let cfg = arch.layer(c_in, o);
                let p = PackParams {
                    conv3d: self.conv(g, &format!("{prefix}.conv3d"))?,
                    conv: self.conv(g, &format!("{prefix}.conv"))?,
                };
                if matches!(spec, BlockSpec::Pack(_)) {
                    g.pack_layer(x, p, &cfg)
                } else {
                    g.unpack_layer(x, p, &cfg)
                }
            }
            BlockSpec::Residual => {
                let cfg = arch.layer(c_in, c_in);
                let p = ResidualParams {
                    conv1: self.conv(g, &format!("{prefix}.conv1"))?,
                    conv2: self.conv(g, &format!("{prefix}.conv2"))?,
                };
                g.residual_block(x, p, &cfg, arch.residual)
            }
        }
    }

    /// Encoder stack of `domain`, the shared latent block and the mu/logvar
    /// heads. `eps` selects sample mode; `None` is mean mode.
    pub fn encode(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        domain: Domain,
        eps: Option<&Tensor<T>>,
    ) -> Result<LatentVars> {
        let arch = self.model.arch().clone();
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != arch.image_channels || h != arch.image_size || w != arch.image_size {
            return dim_err(format!(
                "encoder input {:?} does not match {}x{}x{} images of preset `{}`",
                [n, c, h, w],
                arch.image_channels,
                arch.image_size,
                arch.image_size,
                arch.name
            ));
        }
        let p = domain.encoder().prefix();
        let stem = self.conv(g, &format!("{p}.stem"))?;
        let pad = (arch.stem_kernel - 1) / 2;
        let y = g.conv2d(x, stem.weight, stem.bias, pad)?;
        let mut y = g.activate(y, arch.stem_activation);
        self.record(g, format!("{p}.stem"), y);
        for (i, &b) in arch.encoder.iter().enumerate() {
            let name = format!("{p}.b{i}");
            y = self.block(g, y, &name, b)?;
            self.record(g, name, y);
        }
        let lat = self.conv(g, &format!("{p}.latent"))?;
        let affine = self.affine(g, &format!("{p}.latent"), arch.latent_norm)?;
        let y = g.conv2d(y, lat.weight, lat.bias, arch.kernel_size / 2)?;
        let y = g.normalize(y, arch.latent_norm, affine)?;
        let y = g.activate(y, arch.activation);
        self.record(g, format!("{p}.latent"), y);
        let mu_p = self.conv(g, &format!("{p}.mu"))?;
        let lv_p = self.conv(g, &format!("{p}.logvar"))?;
        let mu = g.conv2d(y, mu_p.weight, mu_p.bias, 0)?;
        let lv = g.conv2d(y, lv_p.weight, lv_p.bias, 0)?;
        let bound = T::from_f64_lossy(arch.logvar_clamp);
        let logvar = g.clamp(lv, -bound, bound);
        let z = match eps {
            Some(e) => g.reparameterize(mu, logvar, e)?,
            None => mu,
        };
        Ok(LatentVars { mu, logvar, z })
    }

    /// Decoder for `head`. RGB and depth heads end in tanh when the
    /// architecture enables it; the segmentation head emits raw logits.
    pub fn decode(&mut self, g: &mut Graph<T>, z: Var, head: Head) -> Result<Var> {
        let arch = self.model.arch().clone();
        let (_, c, h, w) = g.value(z).dims4()?;
        let [lc, lh, lw] = arch.latent_shape();
        if (c, h, w) != (lc, lh, lw) {
            return dim_err(format!(
                "decoder input {:?} does not match latent grid {:?}",
                g.shape(z),
                [lc, lh, lw]
            ));
        }
        let p = head.group().prefix();
        let entry = self.conv(g, &format!("{p}.entry"))?;
        let affine = self.affine(g, &format!("{p}.entry"), arch.latent_norm)?;
        let y = g.conv_transpose2d(z, entry.weight, entry.bias, arch.kernel_size / 2)?;
        let y = g.normalize(y, arch.latent_norm, affine)?;
        let mut y = g.activate(y, arch.activation);
        self.record(g, format!("{p}.entry"), y);
        for (i, &b) in arch.decoder.iter().enumerate() {
            let name = format!("{p}.b{i}");
            y = self.block(g, y, &name, b)?;
            self.record(g, name, y);
        }
        let out = self.conv(g, &format!("{p}.out"))?;
        // Same-size transposed conv: H + K − 1 − 2p = H.
        let y = g.conv_transpose2d(y, out.weight, out.bias, (arch.head_kernel - 1) / 2)?;
        let act = if head != Head::Seg && arch.output_tanh {
            Activation::Tanh
        } else {
            Activation::None
        };
        let y = g.activate(y, act);
        self.record(g, format!("{p}.out"), y);
        Ok(y)
    }
}

/// Standard-normal noise shaped like the latent grid for a batch of `n`.
pub fn latent_noise<T: Scalar, R: Rng + ?Sized>(
    model: &ModelBundle<T>,
    n: usize,
    rng: &mut R,
) -> Tensor<T> {
    let [c, h, w] = model.arch().latent_shape();
    Tensor::randn(&[n, c, h, w], 1.0, rng)
}

/// Inference-mode encode.
pub fn encode<T: Scalar, R: Rng + ?Sized>(
    model: &ModelBundle<T>,
    x: &Tensor<T>,
    domain: Domain,
    mode: EncodeMode,
    rng: &mut R,
) -> Result<LatentCode<T>> {
    let mut g = Graph::inference();
    let mut b = Binder::frozen(model);
    let xv = g.constant(x.clone());
    let eps = match mode {
        EncodeMode::Sample => Some(latent_noise(model, x.shape()[0], rng)),
        EncodeMode::Mean => None,
    };
    let l = b.encode(&mut g, xv, domain, eps.as_ref())?;
    Ok(LatentCode {
        mu: g.value(l.mu).clone(),
        logvar: g.value(l.logvar).clone(),
        z: g.value(l.z).clone(),
    })
}

/// Inference-mode decode.
pub fn decode<T: Scalar>(model: &ModelBundle<T>, z: &Tensor<T>, head: Head) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let mut b = Binder::frozen(model);
    let zv = g.constant(z.clone());
    let y = b.decode(&mut g, zv, head)?;
    Ok(g.value(y).clone())
}

/// `decode(encode(x, from), to)` for image heads.
pub fn cross_domain<T: Scalar, R: Rng + ?Sized>(
    model: &ModelBundle<T>,
    x: &Tensor<T>,
    from: Domain,
    to: Domain,
    mode: EncodeMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let code = encode(model, x, from, mode, rng)?;
    decode(model, &code.z, to.head())
}

/// Mean-mode prediction of an auxiliary or image head from `domain` input.
pub fn predict<T: Scalar>(
    model: &ModelBundle<T>,
    x: &Tensor<T>,
    domain: Domain,
    head: Head,
) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let mut b = Binder::frozen(model);
    let xv = g.constant(x.clone());
    let l = b.encode(&mut g, xv, domain, None)?;
    let y = b.decode(&mut g, l.z, head)?;
    Ok(g.value(y).clone())
}

/// Output shape of every layer for one encode (mean mode) followed by one
/// decode through `head`, labelled by parameter block.
pub fn shape_trace<T: Scalar>(
    model: &ModelBundle<T>,
    x: &Tensor<T>,
    domain: Domain,
    head: Head,
) -> Result<Vec<(String, Vec<usize>)>> {
    let mut g = Graph::inference();
    let mut b = Binder::frozen(model);
    b.enable_trace();
    let xv = g.constant(x.clone());
    let l = b.encode(&mut g, xv, domain, None)?;
    b.decode(&mut g, l.z, head)?;
    Ok(b.take_trace())
}
