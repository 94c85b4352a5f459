//! Parameter storage with shared-block aliasing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::arch::{ArchConfig, BlockSpec};
use crate::nn::layers::{conv_has_bias, pack_param_shapes, residual_param_shapes, unpack_param_shapes};
use crate::nn::Norm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameter groups, one per top-level name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    EncR,
    EncS,
    DecR,
    DecS,
    SharedEnc,
    SharedDec,
    DecDepth,
    DecSeg,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::EncR,
        Group::EncS,
        Group::DecR,
        Group::DecS,
        Group::SharedEnc,
        Group::SharedDec,
        Group::DecDepth,
        Group::DecSeg,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::EncR => "enc_r",
            Group::EncS => "enc_s",
            Group::DecR => "dec_r",
            Group::DecS => "dec_s",
            Group::SharedEnc => "shared_enc",
            Group::SharedDec => "shared_dec",
            Group::DecDepth => "dec_depth",
            Group::DecSeg => "dec_seg",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        let prefix = name.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.prefix() == prefix)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.prefix() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Group::ALL.iter().map(|g| g.prefix()).collect();
                Error::Usage(format!("unknown parameter group `{s}` (valid: {})", valid.join(", ")))
            })
    }
}

/// One named parameter of one network, before sharing is resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Name of the storage this parameter resolves to.
    pub canonical: String,
}

fn push_block(
    out: &mut Vec<ParamSpec>,
    prefix: &str,
    block: &str,
    shared: Option<&str>,
    items: Vec<(String, Vec<usize>)>,
) {
    for (suffix, shape) in items {
        let name = format!("{prefix}.{block}.{suffix}");
        let canonical = match shared {
            Some(s) => format!("{s}.{block}.{suffix}"),
            None => name.clone(),
        };
        out.push(ParamSpec {
            name,
            shape,
            canonical,
        });
    }
}

fn conv_items(shape: Vec<usize>, bias: bool) -> Vec<(String, Vec<usize>)> {
    let channels = shape[0];
    let mut v = vec![("weight".to_string(), shape)];
    if bias {
        v.push(("bias".into(), vec![channels]));
    }
    v
}

fn owned(items: Vec<(&'static str, Vec<usize>)>) -> Vec<(String, Vec<usize>)> {
    items.into_iter().map(|(n, s)| (n.to_string(), s)).collect()
}

fn block_items(arch: &ArchConfig, block: BlockSpec, c_in: usize) -> Result<(Vec<(String, Vec<usize>)>, usize)> {
    Ok(match block {
        BlockSpec::Pack(o) => (owned(pack_param_shapes(&arch.layer(c_in, o))), o),
        BlockSpec::Unpack(o) => (owned(unpack_param_shapes(&arch.layer(c_in, o))?), o),
        BlockSpec::Residual => (owned(residual_param_shapes(&arch.layer(c_in, c_in))), c_in),
    })
}

fn latent_norm_items(norm: Norm, channels: usize) -> Vec<(String, Vec<usize>)> {
    if norm == Norm::Batch {
        vec![
            ("bn.gamma".into(), vec![channels]),
            ("bn.beta".into(), vec![channels]),
        ]
    } else {
        Vec::new()
    }
}

/// Parameters of one domain encoder, in forward order.
pub fn encoder_specs(arch: &ArchConfig, prefix: &str) -> Result<Vec<ParamSpec>> {
    let mut out = Vec::new();
    let n = arch.encoder.len();
    // Encoder blocks with index >= first_shared live in `shared_enc`.
    let first_shared = n + 1 - arch.share_blocks;
    let shared = |i: usize| (i >= first_shared).then_some(Group::SharedEnc.prefix());
    let (k, hk) = (arch.kernel_size, arch.stem_kernel);
    push_block(
        &mut out,
        prefix,
        "stem",
        None,
        conv_items(vec![arch.stem_channels, arch.image_channels, hk, hk], true),
    );
    let mut c = arch.stem_channels;
    for (i, &b) in arch.encoder.iter().enumerate() {
        let (items, next) = block_items(arch, b, c)?;
        push_block(&mut out, prefix, &format!("b{i}"), shared(i), items);
        c = next;
    }
    let lat = arch.latent_channels;
    let mut items = conv_items(vec![lat, c, k, k], conv_has_bias(arch.latent_norm));
    items.extend(latent_norm_items(arch.latent_norm, lat));
    push_block(&mut out, prefix, "latent", shared(n), items);
    push_block(&mut out, prefix, "mu", shared(n), conv_items(vec![lat, lat, 1, 1], true));
    push_block(&mut out, prefix, "logvar", shared(n), conv_items(vec![lat, lat, 1, 1], true));
    Ok(out)
}

/// Parameters of one decoder, in forward order. `shared` is true for the two
/// domain decoders, whose leading blocks alias `shared_dec`.
pub fn decoder_specs(
    arch: &ArchConfig,
    prefix: &str,
    out_channels: usize,
    shared: bool,
) -> Result<Vec<ParamSpec>> {
    let mut out = Vec::new();
    // Entry block is index 0; decoder block i is index i + 1.
    let share = |i: usize| (shared && i < arch.share_blocks).then_some(Group::SharedDec.prefix());
    let k = arch.kernel_size;
    let entry = arch.decoder_entry_channels;
    // Transposed-conv weights are (C_in, C_out, K, K); the bias follows C_out.
    let mut items = vec![("weight".to_string(), vec![arch.latent_channels, entry, k, k])];
    if conv_has_bias(arch.latent_norm) {
        items.push(("bias".into(), vec![entry]));
    }
    items.extend(latent_norm_items(arch.latent_norm, entry));
    push_block(&mut out, prefix, "entry", share(0), items);
    let mut c = entry;
    for (i, &b) in arch.decoder.iter().enumerate() {
        let (items, next) = block_items(arch, b, c)?;
        push_block(&mut out, prefix, &format!("b{i}"), share(i + 1), items);
        c = next;
    }
    let hk = arch.head_kernel;
    push_block(
        &mut out,
        prefix,
        "out",
        None,
        vec![
            ("weight".into(), vec![c, out_channels, hk, hk]),
            ("bias".into(), vec![out_channels]),
        ],
    );
    Ok(out)
}

/// Every parameter name of the model (aliases included), in forward order
/// per network.
pub fn all_specs(arch: &ArchConfig) -> Result<Vec<ParamSpec>> {
    let mut v = encoder_specs(arch, Group::EncR.prefix())?;
    v.extend(encoder_specs(arch, Group::EncS.prefix())?);
    v.extend(decoder_specs(arch, Group::DecR.prefix(), arch.image_channels, true)?);
    v.extend(decoder_specs(arch, Group::DecS.prefix(), arch.image_channels, true)?);
    v.extend(decoder_specs(arch, Group::DecDepth.prefix(), arch.depth_channels, false)?);
    v.extend(decoder_specs(arch, Group::DecSeg.prefix(), arch.seg_classes, false)?);
    Ok(v)
}

/// All model parameters. Storage is keyed by canonical name; names inside
/// shared blocks resolve through `aliases` to the single shared tensor.
#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    arch: ArchConfig,
    params: BTreeMap<String, Tensor<T>>,
    aliases: BTreeMap<String, String>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Weights `~ N(0, init_std²)` drawn in canonical-name order from a
    /// seeded generator; biases and BN shifts zero, BN scales one.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = arch.init_std;
        for (name, t) in m.params.iter_mut() {
            if name.ends_with(".weight") {
                *t = Tensor::randn(t.shape(), std, &mut rng);
            } else if name.ends_with(".gamma") {
                *t = Tensor::full(t.shape(), T::one());
            }
        }
        Ok(m)
    }

    /// All-zero parameters with the layout of `arch`.
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut params = BTreeMap::new();
        let mut aliases = BTreeMap::new();
        for spec in all_specs(arch)? {
            if spec.canonical != spec.name {
                aliases.insert(spec.name.clone(), spec.canonical.clone());
            }
            match params.get(&spec.canonical) {
                Some(t) => {
                    let t: &Tensor<T> = t;
                    if t.shape() != spec.shape.as_slice() {
                        return Err(Error::Dimension(format!(
                            "shared parameter {} has inconsistent shapes",
                            spec.canonical
                        )));
                    }
                }
                None => {
                    params.insert(spec.canonical, Tensor::zeros(&spec.shape));
                }
            }
        }
        Ok(Self {
            arch: arch.clone(),
            params,
            aliases,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Canonical storage name for `name`.
    pub fn canonical<'a>(&'a self, name: &'a str) -> &'a str {
        self.aliases.get(name).map(String::as_str).unwrap_or(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(self.canonical(name))
    }

    /// Mutable access through any name; writes through an alias land in the
    /// shared storage.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let key = self.aliases.get(name).cloned().unwrap_or_else(|| name.to_string());
        self.params.get_mut(&key)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    /// Canonical parameters in name order.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    /// `(alias, canonical)` pairs.
    pub fn sharing_map(&self) -> Vec<(String, String)> {
        self.aliases
            .iter()
            .map(|(a, c)| (a.clone(), c.clone()))
            .collect()
    }

    /// Whether two names resolve to the same storage.
    pub fn same_storage(&self, a: &str, b: &str) -> bool {
        match (self.get(a), self.get(b)) {
            (Some(x), Some(y)) => std::ptr::eq(x, y),
            _ => false,
        }
    }

    /// Number of scalar parameters in distinct storage.
    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn group_parameters(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| Group::of(n) == Some(group))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// The same model with the real and sim networks exchanged.
    pub fn with_domains_swapped(&self) -> Self {
        let swap = |name: &str| -> String {
            for (a, b) in [("enc_r.", "enc_s."), ("dec_r.", "dec_s.")] {
                if let Some(rest) = name.strip_prefix(a) {
                    return format!("{b}{rest}");
                }
                if let Some(rest) = name.strip_prefix(b) {
                    return format!("{a}{rest}");
                }
            }
            name.to_string()
        };
        Self {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| (swap(n), t.clone()))
                .collect(),
            aliases: self.aliases.clone(),
        }
    }

    /// Sets every `(C, C, 1, 1)` weight to the identity and every bias to
    /// zero. Fails if any weight is not square pointwise.
    pub fn set_identity(&mut self) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            if name.ends_with(".weight") {
                let s = t.shape().to_vec();
                if s.len() != 4 || s[0] != s[1] || s[2] != 1 || s[3] != 1 {
                    return Err(Error::Usage(format!(
                        "identity weights need square pointwise kernels, `{name}` is {s:?}"
                    )));
                }
                let mut d = vec![T::zero(); t.len()];
                for c in 0..s[0] {
                    d[c * s[0] + c] = T::one();
                }
                *t = Tensor::new(s, d)?;
            } else if name.ends_with(".gamma") {
                *t = Tensor::full(t.shape(), T::one());
            } else {
                *t = Tensor::zeros(t.shape());
            }
        }
        Ok(())
    }

    /// Copies every canonical parameter of `other` after checking layouts.
    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        if self.aliases != other.aliases {
            return Err(Error::Usage(format!(
                "sharing layouts differ between `{}` and `{}`",
                self.arch.name, other.arch.name
            )));
        }
        for (name, t) in &self.params {
            let o = other.params.get(name).ok_or_else(|| Error::ShapeMismatch {
                name: name.clone(),
                found: Vec::new(),
                expected: t.shape().to_vec(),
            })?;
            if o.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    found: o.shape().to_vec(),
                    expected: t.shape().to_vec(),
                });
            }
        }
        for (name, t) in self.params.iter_mut() {
            *t = other.params[name].clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            arch: self.arch.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            aliases: self.aliases.clone(),
        }
    }

    /// True when every parameter is bitwise equal to the one in `other`.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .all(|(n, t)| other.params.get(n).is_some_and(|o| t.bitwise_eq(o)))
    }

    pub(crate) fn from_parts(
        arch: ArchConfig,
        params: BTreeMap<String, Tensor<T>>,
        aliases: BTreeMap<String, String>,
    ) -> Self {
        Self {
            arch,
            params,
            aliases,
        }
    }
}
