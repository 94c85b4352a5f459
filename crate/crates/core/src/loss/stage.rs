//! Stage totals: the stage-1 twin-VAE objective and the two stage-2
//! auxiliary-task objectives.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::loss::terms::MmdKernel;
use crate::model::{latent_noise, Binder, Domain, EncodeMode, Head, LatentVars, ModelBundle};
use crate::nn::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    One,
    TwoDepth,
    TwoSeg,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::TwoDepth, Stage::TwoSeg];

    pub fn name(self) -> &'static str {
        match self {
            Stage::One => "stage1",
            Stage::TwoDepth => "stage2-depth",
            Stage::TwoSeg => "stage2-seg",
        }
    }

    /// Loss term names in report order, without `total`.
    pub fn term_names(self) -> &'static [&'static str] {
        match self {
            Stage::One => &["kl_r", "kl_s", "mse_r", "mse_s", "mmd_r", "mmd_s", "cc_r", "cc_s"],
            Stage::TwoDepth => &["kl_rd", "kl_sd", "mmd_sr", "mmd_rs", "mse_r_depth", "mse_s_depth"],
            Stage::TwoSeg => &["kl_rd", "kl_sd", "mmd_sr", "mmd_rs", "ce_s", "ce_r"],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown stage `{s}` (valid: stage1, stage2-depth, stage2-seg)"
                ))
            })
    }
}

impl Serialize for Stage {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Stage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    /// Latent sampling for every encoder pass.
    pub mode: EncodeMode,
    /// MMD compares sampled `z` instead of `mu`.
    pub mmd_on_sample: bool,
    /// Stage 2 treats the cross-domain images `x_R′`, `x_S′` as data.
    pub stop_grad: bool,
    /// Kernel bandwidth; `None` means `√(d / 2)` for latent length `d`.
    pub sigma: Option<f64>,
    /// Per-term weights; absent terms weigh 1.
    pub weights: BTreeMap<String, f64>,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            mode: EncodeMode::Sample,
            mmd_on_sample: false,
            stop_grad: true,
            sigma: None,
            weights: BTreeMap::new(),
        }
    }
}

impl LossOptions {
    pub fn mean_mode() -> Self {
        Self {
            mode: EncodeMode::Mean,
            ..Self::default()
        }
    }

    pub fn kernel(&self, latent_dim: usize) -> Result<MmdKernel> {
        match self.sigma {
            Some(s) => MmdKernel::new(s),
            None => Ok(MmdKernel::for_dim(latent_dim)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in &self.weights {
            let known = Stage::ALL.iter().any(|s| s.term_names().contains(&name.as_str()));
            if !known {
                return Err(Error::Usage(format!("unknown loss term `{name}` in weights")));
            }
            if !w.is_finite() || *w < 0.0 {
                return Err(Error::Usage(format!("weight of `{name}` must be finite and >= 0")));
            }
        }
        if let Some(s) = self.sigma {
            MmdKernel::new(s)?;
        }
        Ok(())
    }

    fn weight(&self, name: &str) -> f64 {
        self.weights.get(name).copied().unwrap_or(1.0)
    }
}

/// Loss term values of one step, in stage order, and their weighted total.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub stage: Stage,
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        if name == "total" {
            return Some(self.total);
        }
        self.terms.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    /// First term, or `total`, holding NaN/Inf.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|&(n, _)| n)
            .or((!self.total.is_finite()).then_some("total"))
    }
}

impl Serialize for LossReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.terms.len() + 2))?;
        m.serialize_entry("stage", self.stage.name())?;
        for (n, v) in &self.terms {
            m.serialize_entry(n, v)?;
        }
        m.serialize_entry("total", &self.total)?;
        m.end()
    }
}

/// Scalar term nodes of one stage objective and their weighted sum.
pub struct StageLoss {
    pub stage: Stage,
    pub terms: Vec<(&'static str, Var)>,
    pub total: Var,
}

impl StageLoss {
    fn assemble<T: Scalar>(g: &mut Graph<T>, stage: Stage, vars: Vec<Var>, opts: &LossOptions) -> Result<Self> {
        let names = stage.term_names();
        debug_assert_eq!(names.len(), vars.len());
        let weighted: Vec<(Var, T)> = names
            .iter()
            .zip(&vars)
            .map(|(n, &v)| (v, T::from_f64_lossy(opts.weight(n))))
            .collect();
        let total = g.weighted_sum(&weighted)?;
        Ok(Self {
            stage,
            terms: names.iter().copied().zip(vars).collect(),
            total,
        })
    }

    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        LossReport {
            stage: self.stage,
            terms: self
                .terms
                .iter()
                .map(|&(n, v)| (n, g.scalar(v).as_f64()))
                .collect(),
            total: g.scalar(self.total).as_f64(),
        }
    }
}

/// Supervision for a stage-2 batch; depth is in the normalized `[−1, 1]`
/// range of the depth head.
#[derive(Clone, Debug)]
pub enum AuxTarget<T> {
    Depth(Tensor<T>),
    Seg(LabelMap),
}

impl<T> AuxTarget<T> {
    pub fn stage(&self) -> Stage {
        match self {
            AuxTarget::Depth(_) => Stage::TwoDepth,
            AuxTarget::Seg(_) => Stage::TwoSeg,
        }
    }
}

/// Produces auxiliary-head outputs from latent codes.
pub trait AuxDecoder<T: Scalar> {
    fn decode(&self, b: &mut Binder<'_, T>, g: &mut Graph<T>, z: Var, head: Head) -> Result<Var>;
}

/// The model's own depth / segmentation decoders.
pub struct ModelAux;

impl<T: Scalar> AuxDecoder<T> for ModelAux {
    fn decode(&self, b: &mut Binder<'_, T>, g: &mut Graph<T>, z: Var, head: Head) -> Result<Var> {
        b.decode(g, z, head)
    }
}

struct Ctx<'a, 'm, T: Scalar, R: Rng + ?Sized> {
    b: &'a mut Binder<'m, T>,
    g: &'a mut Graph<T>,
    rng: &'a mut R,
    opts: &'a LossOptions,
    kernel: MmdKernel,
}

impl<T: Scalar, R: Rng + ?Sized> Ctx<'_, '_, T, R> {
    fn encode(&mut self, x: Var, domain: Domain) -> Result<LatentVars> {
        let eps = match self.opts.mode {
            EncodeMode::Sample => Some(latent_noise(self.b.model(), self.g.shape(x)[0], self.rng)),
            EncodeMode::Mean => None,
        };
        self.b.encode(self.g, x, domain, eps.as_ref())
    }

    fn decode(&mut self, z: Var, head: Head) -> Result<Var> {
        self.b.decode(self.g, z, head)
    }

    /// KL to the prior plus the Gaussian NLL of the reconstruction.
    fn vae_term(&mut self, l: &LatentVars, x: Var, recon: Var) -> Result<Var> {
        let kl = self.g.kl_standard_normal(l.mu, l.logvar)?;
        let nll = self.g.gaussian_nll(recon, x)?;
        self.g.add(kl, nll)
    }

    fn latent_vectors(&self, l: &LatentVars) -> Var {
        if self.opts.mmd_on_sample {
            l.z
        } else {
            l.mu
        }
    }

    fn mmd(&mut self, a: Var, b: Var) -> Result<Var> {
        self.g.mmd(a, b, self.kernel)
    }

    fn pseudo(&mut self, x: Var) -> Var {
        if self.opts.stop_grad {
            self.g.detach(x)
        } else {
            x
        }
    }
}

fn check_images<T: Scalar>(model: &ModelBundle<T>, x: &Tensor<T>, what: &str) -> Result<()> {
    x.ensure_finite(what)?;
    let a = model.arch();
    let want = [a.image_channels, a.image_size, a.image_size];
    if x.ndim() != 4 || x.shape()[1..] != want {
        return Err(Error::Dimension(format!(
            "{what} has shape {:?}, expected (N, {}, {}, {})",
            x.shape(),
            want[0],
            want[1],
            want[2]
        )));
    }
    Ok(())
}

/// Builds the eight stage-1 terms on `g`: per domain, the KL + NLL term, the
/// reconstruction MSE, the MMD against prior samples and the L1 cycle term.
pub fn stage1_loss<T: Scalar, R: Rng + ?Sized>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x_r: &Tensor<T>,
    x_s: &Tensor<T>,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<StageLoss> {
    check_images(b.model(), x_r, "real batch")?;
    check_images(b.model(), x_s, "sim batch")?;
    let kernel = opts.kernel(b.model().arch().latent_dim())?;
    let mut c = Ctx { b, g, rng, opts, kernel };
    let xr = c.g.constant(x_r.clone());
    let xs = c.g.constant(x_s.clone());

    let lr = c.encode(xr, Domain::Real)?;
    let ls = c.encode(xs, Domain::Sim)?;
    let rec_r = c.decode(lr.z, Head::Real)?;
    let rec_s = c.decode(ls.z, Head::Sim)?;
    let kl_r = c.vae_term(&lr, xr, rec_r)?;
    let kl_s = c.vae_term(&ls, xs, rec_s)?;
    let mse_r = c.g.mse(rec_r, xr)?;
    let mse_s = c.g.mse(rec_s, xs)?;

    // x_R → sim → real and x_S → real → sim.
    let r2s = c.decode(lr.z, Head::Sim)?;
    let s2r = c.decode(ls.z, Head::Real)?;
    let l_r2s = c.encode(r2s, Domain::Sim)?;
    let l_s2r = c.encode(s2r, Domain::Real)?;
    let cyc_r = c.decode(l_r2s.z, Head::Real)?;
    let cyc_s = c.decode(l_s2r.z, Head::Sim)?;
    let cc_r = c.g.l1(cyc_r, xr)?;
    let cc_s = c.g.l1(cyc_s, xs)?;

    // One prior batch serves both MMD terms.
    let n = x_r.shape()[0].max(x_s.shape()[0]);
    let prior = Tensor::randn(&[n, c.kernel_dim()], 1.0, c.rng);
    let prior = c.g.constant(prior);
    let vr = c.latent_vectors(&lr);
    let vs = c.latent_vectors(&ls);
    let mmd_r = c.mmd(prior, vr)?;
    let mmd_s = c.mmd(prior, vs)?;

    StageLoss::assemble(
        c.g,
        Stage::One,
        vec![kl_r, kl_s, mse_r, mse_s, mmd_r, mmd_s, cc_r, cc_s],
        opts,
    )
}

impl<T: Scalar, R: Rng + ?Sized> Ctx<'_, '_, T, R> {
    fn kernel_dim(&self) -> usize {
        self.b.model().arch().latent_dim()
    }
}

/// Builds the six stage-2 terms on `g` for the task selected by `target`.
/// `x_s` is paired with `target`; `x_r` is unpaired.
pub fn stage2_loss<T: Scalar, R: Rng + ?Sized>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x_s: &Tensor<T>,
    target: &AuxTarget<T>,
    x_r: &Tensor<T>,
    opts: &LossOptions,
    rng: &mut R,
    aux: &dyn AuxDecoder<T>,
) -> Result<StageLoss> {
    check_images(b.model(), x_s, "sim batch")?;
    check_images(b.model(), x_r, "real batch")?;
    let arch = b.model().arch().clone();
    let n = x_s.shape()[0];
    let (head, stage) = match target {
        AuxTarget::Depth(d) => {
            let want = [n, arch.depth_channels, arch.image_size, arch.image_size];
            if d.shape() != want {
                return Err(Error::Dimension(format!(
                    "depth target {:?} does not pair with sim batch {:?}",
                    d.shape(),
                    x_s.shape()
                )));
            }
            d.ensure_finite("depth target")?;
            (Head::Depth, Stage::TwoDepth)
        }
        AuxTarget::Seg(l) => {
            if l.shape() != [n, arch.image_size, arch.image_size] {
                return Err(Error::Dimension(format!(
                    "segmentation target {:?} does not pair with sim batch {:?}",
                    l.shape(),
                    x_s.shape()
                )));
            }
            (Head::Seg, Stage::TwoSeg)
        }
    };
    let kernel = opts.kernel(arch.latent_dim())?;
    let mut c = Ctx { b, g, rng, opts, kernel };
    let xs = c.g.constant(x_s.clone());
    let xr = c.g.constant(x_r.clone());

    // Sim path and its translation x_R′ = G_R(z_S), z_R′ = E_R(x_R′).
    let ls = c.encode(xs, Domain::Sim)?;
    let xr_p = c.decode(ls.z, Head::Real)?;
    let xr_p = c.pseudo(xr_p);
    let lr_p = c.encode(xr_p, Domain::Real)?;
    let rec_rp = c.decode(lr_p.z, Head::Real)?;
    let kl_rd = c.vae_term(&lr_p, xr_p, rec_rp)?;
    let rec_s = c.decode(ls.z, Head::Sim)?;
    let kl_sd = c.vae_term(&ls, xs, rec_s)?;

    // Real path and its translation x_S′ = G_S(z_R), z_S′ = E_S(x_S′).
    let lr = c.encode(xr, Domain::Real)?;
    let xs_p = c.decode(lr.z, Head::Sim)?;
    let xs_p = c.pseudo(xs_p);
    let ls_p = c.encode(xs_p, Domain::Sim)?;

    let (v_s, v_rp) = (c.latent_vectors(&ls), c.latent_vectors(&lr_p));
    let (v_sp, v_r) = (c.latent_vectors(&ls_p), c.latent_vectors(&lr));
    let mmd_sr = c.mmd(v_s, v_rp)?;
    let mmd_rs = c.mmd(v_sp, v_r)?;

    // Task terms through E_S(x_S) and E_R(x_R′).
    let out_s = aux.decode(c.b, c.g, ls.z, head)?;
    let out_r = aux.decode(c.b, c.g, lr_p.z, head)?;
    let (task_a, task_b) = match target {
        AuxTarget::Depth(d) => {
            let dt = c.g.constant(d.clone());
            // Report order: the E_R(x_R′) path, then the E_S(x_S) path.
            let r = c.g.mse(out_r, dt)?;
            let s = c.g.mse(out_s, dt)?;
            (r, s)
        }
        AuxTarget::Seg(l) => {
            let s = c.g.cross_entropy(out_s, l)?;
            let r = c.g.cross_entropy(out_r, l)?;
            (s, r)
        }
    };
    StageLoss::assemble(
        c.g,
        stage,
        vec![kl_rd, kl_sd, mmd_sr, mmd_rs, task_a, task_b],
        opts,
    )
}

fn inference_report<T: Scalar>(
    model: &ModelBundle<T>,
    build: impl FnOnce(&mut Binder<'_, T>, &mut Graph<T>) -> Result<StageLoss>,
) -> Result<LossReport> {
    let mut g = Graph::inference();
    let mut b = Binder::frozen(model);
    let loss = build(&mut b, &mut g)?;
    Ok(loss.report(&g))
}

/// Stage-1 loss values at the current parameters.
pub fn stage1_total<T: Scalar, R: Rng + ?Sized>(
    model: &ModelBundle<T>,
    x_r: &Tensor<T>,
    x_s: &Tensor<T>,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<LossReport> {
    inference_report(model, |b, g| stage1_loss(b, g, x_r, x_s, opts, rng))
}

/// Stage-2 depth loss values at the current parameters. `depth` is
/// normalized to `[−1, 1]`.
pub fn stage2_depth_total<T: Scalar, R: Rng + ?Sized>(
    model: &ModelBundle<T>,
    x_s: &Tensor<T>,
    depth: &Tensor<T>,
    x_r: &Tensor<T>,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<LossReport> {
    let target = AuxTarget::Depth(depth.clone());
    inference_report(model, |b, g| stage2_loss(b, g, x_s, &target, x_r, opts, rng, &ModelAux))
}

/// Stage-2 segmentation loss values at the current parameters.
pub fn stage2_seg_total<T: Scalar, R: Rng + ?Sized>(
    model: &ModelBundle<T>,
    x_s: &Tensor<T>,
    labels: &LabelMap,
    x_r: &Tensor<T>,
    opts: &LossOptions,
    rng: &mut R,
) -> Result<LossReport> {
    let target = AuxTarget::Seg(labels.clone());
    inference_report(model, |b, g| stage2_loss(b, g, x_s, &target, x_r, opts, rng, &ModelAux))
}
