//! The three model families as graphs over the tensor engine: the 2D-3D
//! U-Net (deterministic, MC dropout, DropBlock), the 2D-3D PhiSeg (with or
//! without image fusion) and PhiSeg with an auxiliary image reconstruction
//! branch for domain adaptation.
//!
//! All networks take a `[B, 1, H, W]` image and produce `[B, 1, D, H, W]`
//! logits.

mod layers;
mod phiseg;
mod unet;

use std::fmt;
use std::path::Path;

use drrseg_tensor::{Graph, ParamStore, RngState, Tensor, Var};
use serde::{Deserialize, Serialize};

use self::layers::{Conv2, Init};
use self::phiseg::{Distill, Encoder2d, Fusion, Gauss, Likelihood};
use self::unet::{Srm, Unet3d};
use crate::error::{Error, Result};
use crate::formats::{self, CkptEntry};

pub use self::unet::{srm_depth_kernel, Regularizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    UnetDet,
    UnetDropout,
    UnetDropblock,
    Phiseg,
    PhisegNofusion,
    PhisegUda,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 6] = [
        ModelFamily::UnetDet,
        ModelFamily::UnetDropout,
        ModelFamily::UnetDropblock,
        ModelFamily::Phiseg,
        ModelFamily::PhisegNofusion,
        ModelFamily::PhisegUda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::UnetDet => "unet-det",
            ModelFamily::UnetDropout => "unet-dropout",
            ModelFamily::UnetDropblock => "unet-dropblock",
            ModelFamily::Phiseg => "phiseg",
            ModelFamily::PhisegNofusion => "phiseg-nofusion",
            ModelFamily::PhisegUda => "phiseg-uda",
        }
    }

    pub fn is_phiseg(self) -> bool {
        matches!(
            self,
            ModelFamily::Phiseg | ModelFamily::PhisegNofusion | ModelFamily::PhisegUda
        )
    }

    pub fn has_fusion(self) -> bool {
        matches!(self, ModelFamily::Phiseg | ModelFamily::PhisegUda)
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelFamily::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown model family `{s}`")))
    }
}

/// Five z-strides multiplying to `depth` (a power of two): 2s from the
/// start, the remainder folded into the last layer.
pub fn default_srm_strides(depth: usize) -> Result<Vec<usize>> {
    if depth == 0 || !depth.is_power_of_two() {
        return Err(Error::config(format!("depth {depth} is not a power of two")));
    }
    let k = depth.trailing_zeros() as usize;
    let mut s = vec![1usize; 5];
    s.iter_mut().take(k).for_each(|v| *v = 2);
    if k > 5 {
        s[4] <<= k - 5;
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    /// In-plane extent of input image and output volume.
    pub size: usize,
    pub depth: usize,
    pub srm_strides: Vec<usize>,
    pub srm_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    /// Layer after the last U-Net decoder block.
    pub regularizer: Regularizer,
    pub latent_levels: usize,
    pub latent_channels: usize,
    pub distill_channels: usize,
    pub fusion_channels: usize,
    /// Scale lifted latents by `1 / sqrt(depth)`.
    pub lift_scaled: bool,
    /// Expected foreground fraction; sets the initial output bias.
    pub foreground_prior: f64,
}

impl ModelConfig {
    /// Defaults for a cubic `n^3` target.
    pub fn new(family: ModelFamily, n: usize) -> Result<Self> {
        let regularizer = match family {
            ModelFamily::UnetDropout => Regularizer::Dropout { p: 0.6 },
            ModelFamily::UnetDropblock => Regularizer::DropBlock {
                block_size: 2,
                drop_rate: 0.1,
            },
            _ => Regularizer::None,
        };
        let c = ModelConfig {
            family,
            size: n,
            depth: n,
            srm_strides: default_srm_strides(n)?,
            srm_channels: 8,
            levels: 4,
            // element dropout at p = 0.6 in front of a 1x1 head leaves
            // about 3 of 8 channels per voxel; 16 keeps MC samples usable
            base_channels: if family.is_phiseg() { 8 } else { 16 },
            regularizer,
            latent_levels: 3,
            latent_channels: 4,
            distill_channels: 8,
            fusion_channels: 4,
            lift_scaled: true,
            foreground_prior: 0.1,
        };
        c.validate()?;
        Ok(c)
    }

    /// Channels per level: base doubling, capped at 64.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|l| (self.base_channels << l).min(64.max(self.base_channels)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize << (self.levels.max(1) - 1);
        if self.levels < 2 || !self.size.is_multiple_of(div) || !self.depth.is_multiple_of(div) || self.size < div {
            return Err(Error::config(format!(
                "{} levels need extents divisible by {div}, got size {} depth {}",
                self.levels, self.size, self.depth
            )));
        }
        let product: usize = self.srm_strides.iter().product();
        if product != self.depth {
            return Err(Error::config(format!(
                "SRM z-strides {:?} multiply to {product}, target depth is {}",
                self.srm_strides, self.depth
            )));
        }
        if self.family.is_phiseg() && (self.latent_levels == 0 || self.latent_levels >= self.levels) {
            return Err(Error::config(format!(
                "latent levels must be in 1..{}, got {}",
                self.levels, self.latent_levels
            )));
        }
        if self.family.is_phiseg() && self.srm_strides.len() < 2 {
            return Err(Error::config("distillation needs at least two strided layers"));
        }
        if !(self.foreground_prior > 0.0 && self.foreground_prior < 1.0) {
            return Err(Error::config(format!(
                "foreground prior must be in (0, 1), got {}",
                self.foreground_prior
            )));
        }
        if self.base_channels == 0 || self.srm_channels == 0 || self.latent_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        Ok(())
    }

    /// Depth of the decoder volume at `level`.
    pub fn level_depth(&self, level: usize) -> usize {
        self.depth >> level
    }
}

/// Per-term breakdown of a training loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub bce: f64,
    /// KL(posterior || prior) per latent level, finest first.
    pub kl: Vec<f64>,
    pub beta: f64,
}

/// Latent parameters, a sample and its lifted form at one level.
#[derive(Clone, Debug)]
pub struct LatentLevel {
    pub level: usize,
    pub mu: Tensor<f32>,
    pub logvar: Tensor<f32>,
    pub z: Tensor<f32>,
    pub lifted: Tensor<f32>,
}

/// Latent levels, finest first.
pub type LatentStack = Vec<LatentLevel>;

struct PhiSegParts {
    distill: Distill,
    prior: Encoder2d,
    posterior: Encoder2d,
    likelihood: Likelihood,
    fusion: Option<Fusion>,
    recon: Option<Conv2>,
}

enum Arch {
    Unet { srm: Srm, unet: Unet3d },
    PhiSeg(Box<PhiSegParts>),
}

/// A model instance: configuration, parameters and layer handles.
pub struct Network {
    config: ModelConfig,
    store: ParamStore<f32>,
    arch: Arch,
}

const CONFIG_PREFIX: &str = "#config:";
const RECON_PREFIX: &str = "recon.";

fn tensor_input(g: &mut Graph<'_, f32>, t: &Tensor<f32>) -> Var {
    g.input(t.clone())
}

impl Network {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: RngState::new(seed).derive("init"),
        };
        let widths = config.widths();
        let arch = if config.family.is_phiseg() {
            let distill = Distill::new(&mut init, &config.srm_strides, config.distill_channels);
            let prior = Encoder2d::new(
                &mut init,
                "prior",
                1,
                &widths,
                config.latent_levels,
                config.latent_channels,
            );
            let posterior = Encoder2d::new(
                &mut init,
                "posterior",
                1 + distill.out_channels,
                &widths,
                config.latent_levels,
                config.latent_channels,
            );
            let likelihood = Likelihood::new(
                &mut init,
                &widths,
                config.latent_levels,
                config.latent_channels,
                config.foreground_prior,
            );
            let fusion = config
                .family
                .has_fusion()
                .then(|| Fusion::new(&mut init, config.fusion_channels));
            let recon = (config.family == ModelFamily::PhisegUda).then(|| init.conv2("recon.head", widths[0], 1, 1));
            Arch::PhiSeg(Box::new(PhiSegParts {
                distill,
                prior,
                posterior,
                likelihood,
                fusion,
                recon,
            }))
        } else {
            let srm = Srm::new(&mut init, &config.srm_strides, config.srm_channels, config.depth)?;
            let unet = Unet3d::new(
                &mut init,
                config.srm_channels,
                &widths,
                config.regularizer,
                config.foreground_prior,
            );
            Arch::Unet { srm, unet }
        };
        Ok(Network { config, store, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> ModelFamily {
        self.config.family
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Whether repeated samples of the same input can differ.
    pub fn is_stochastic(&self) -> bool {
        match &self.arch {
            Arch::Unet { unet, .. } => unet.reg.is_stochastic(),
            Arch::PhiSeg(_) => true,
        }
    }

    /// Voxels of one target volume.
    pub fn target_voxels(&self) -> usize {
        self.config.depth * self.config.size * self.config.size
    }

    fn check_image(&self, x: &Tensor<f32>) -> Result<usize> {
        let n = self.config.size;
        match x.shape() {
            [b, 1, h, w] if *h == n && *w == n && *b > 0 => Ok(*b),
            s => Err(Error::config(format!(
                "expected image batch [B, 1, {n}, {n}], got {s:?}"
            ))),
        }
    }

    fn check_volume(&self, y: &Tensor<f32>, batch: usize) -> Result<()> {
        let (n, d) = (self.config.size, self.config.depth);
        if y.shape() != [batch, 1, d, n, n] {
            return Err(Error::config(format!(
                "expected target batch [{batch}, 1, {d}, {n}, {n}], got {:?}",
                y.shape()
            )));
        }
        Ok(())
    }

    fn phiseg(&self) -> Result<&PhiSegParts> {
        match &self.arch {
            Arch::PhiSeg(p) => Ok(p),
            Arch::Unet { .. } => Err(Error::config(format!("{} has no latent variables", self.family()))),
        }
    }

    fn unet(&self) -> Result<(&Srm, &Unet3d)> {
        match &self.arch {
            Arch::Unet { srm, unet } => Ok((srm, unet)),
            Arch::PhiSeg(_) => Err(Error::config(format!("{} is not a U-Net", self.family()))),
        }
    }

    /// Segmentation loss for one batch, recorded on `g`. Stochastic layers
    /// are active; PhiSeg decodes a posterior sample.
    pub fn seg_loss(
        &self,
        g: &mut Graph<'_, f32>,
        x: &Tensor<f32>,
        y: &Tensor<f32>,
        rng: &mut RngState,
        beta: f64,
    ) -> Result<(Var, LossTerms)> {
        let b = self.check_image(x)?;
        self.check_volume(y, b)?;
        let xv = tensor_input(g, x);
        match &self.arch {
            Arch::Unet { srm, unet } => {
                let f = srm.fwd(g, xv)?;
                let t = unet.trunk(g, f)?;
                let logits = unet.head(g, t, rng, true)?;
                let loss = g.bce_with_logits(logits, y)?;
                let bce = g.value(loss).item() as f64;
                Ok((
                    loss,
                    LossTerms {
                        total: bce,
                        bce,
                        kl: Vec::new(),
                        beta: 0.0,
                    },
                ))
            }
            Arch::PhiSeg(p) => {
                let yv = tensor_input(g, y);
                let prior = p.prior.fwd(g, xv)?;
                let d = p.distill.fwd(g, yv)?;
                let post_in = g.concat_channels(&[xv, d])?;
                let post = p.posterior.fwd(g, post_in)?;
                let z = phiseg::sample(g, &post, rng)?;
                let logits = self.decode(g, p, xv, &z)?;
                let bce_v = g.bce_with_logits(logits, y)?;
                let mut terms = LossTerms {
                    bce: g.value(bce_v).item() as f64,
                    beta,
                    ..LossTerms::default()
                };
                // BCE is a per-voxel mean, so the KL is spread over the
                // same voxels; beta = 1 is then the ELBO.
                let weight = beta / self.target_voxels() as f64;
                let mut total = bce_v;
                for (q, pr) in post.iter().zip(&prior) {
                    let kl = g.kl_diag_gauss(q.mu, q.logvar, pr.mu, pr.logvar)?;
                    terms.kl.push(g.value(kl).item() as f64);
                    if beta != 0.0 {
                        let w = g.scale(kl, weight as f32);
                        total = g.add(total, w)?;
                    }
                }
                terms.total = terms.bce + weight * terms.kl.iter().sum::<f64>();
                Ok((total, terms))
            }
        }
    }

    /// Lifts `z` (finest first), decodes and fuses.
    fn decode(&self, g: &mut Graph<'_, f32>, p: &PhiSegParts, x: Var, z: &[Var]) -> Result<Var> {
        let lifted = self.lift_all(g, z)?;
        let t = p.likelihood.trunk(g, &lifted)?;
        let s = p.likelihood.head(g, t)?;
        match &p.fusion {
            Some(f) => f.fwd(g, x, s),
            None => Ok(s),
        }
    }

    fn lift_all(&self, g: &mut Graph<'_, f32>, z: &[Var]) -> Result<Vec<Var>> {
        let first = self.config.levels - self.config.latent_levels;
        z.iter()
            .enumerate()
            .map(|(i, &zi)| phiseg::lift(g, zi, self.config.level_depth(first + i), self.config.lift_scaled))
            .collect()
    }

    /// Auxiliary loss for domain adaptation: the prior means for the image are
    /// decoded by the shared likelihood trunk, averaged over depth
    /// and mapped back to an image by the reconstruction head.
    pub fn recon_loss(&self, g: &mut Graph<'_, f32>, x: &Tensor<f32>) -> Result<Var> {
        self.check_image(x)?;
        let p = self.phiseg()?;
        let head = p
            .recon
            .as_ref()
            .ok_or_else(|| Error::config(format!("{} has no reconstruction head", self.family())))?;
        let xv = tensor_input(g, x);
        let prior = p.prior.fwd(g, xv)?;
        let z: Vec<Var> = prior.iter().map(|q| q.mu).collect();
        let lifted = self.lift_all(g, &z)?;
        let t = p.likelihood.trunk(g, &lifted)?;
        let m = g.mean_depth(t)?;
        let r = head.fwd(g, m)?;
        Ok(g.mse(r, x)?)
    }

    /// Segmentation and reconstruction losses for one source/target pair,
    /// returned separately.
    pub fn uda_losses(
        &self,
        x_src: &Tensor<f32>,
        y_src: &Tensor<f32>,
        x_tgt: &Tensor<f32>,
        rng: &mut RngState,
        beta: f64,
    ) -> Result<(LossTerms, f64)> {
        let mut g = Graph::with_params(&self.store);
        let (_, terms) = self.seg_loss(&mut g, x_src, y_src, rng, beta)?;
        let mut g = Graph::with_params(&self.store);
        let r = self.recon_loss(&mut g, x_tgt)?;
        Ok((terms, g.value(r).item() as f64))
    }

    /// Single deterministic prediction (probabilities): stochastic layers
    /// off, PhiSeg decodes the prior means.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_image(x)?;
        let mut g = Graph::with_params(&self.store);
        let xv = tensor_input(&mut g, x);
        let logits = match &self.arch {
            Arch::Unet { srm, unet } => {
                let f = srm.fwd(&mut g, xv)?;
                let t = unet.trunk(&mut g, f)?;
                unet.head(&mut g, t, &mut RngState::new(0), false)?
            }
            Arch::PhiSeg(p) => {
                let prior = p.prior.fwd(&mut g, xv)?;
                let z: Vec<Var> = prior.iter().map(|q| q.mu).collect();
                self.decode(&mut g, p, xv, &z)?
            }
        };
        let prob = g.sigmoid(logits);
        Ok(g.value(prob).clone())
    }

    /// `t` stochastic predictions (probabilities), sample `i` drawn from
    /// `rng.split(i)`. U-Nets keep dropout active; PhiSeg samples the prior.
    pub fn sample(&self, x: &Tensor<f32>, t: usize, rng: &RngState) -> Result<Vec<Tensor<f32>>> {
        if t == 0 {
            return Err(Error::config("sample count must be at least 1"));
        }
        self.check_image(x)?;
        match &self.arch {
            Arch::Unet { srm, unet } => {
                let mut g = Graph::with_params(&self.store);
                let xv = tensor_input(&mut g, x);
                let f = srm.fwd(&mut g, xv)?;
                let trunk = unet.trunk(&mut g, f)?;
                let trunk = g.value(trunk).clone();
                (0..t)
                    .map(|i| {
                        let mut g = Graph::with_params(&self.store);
                        let tv = g.input(trunk.clone());
                        let logits = unet.head(&mut g, tv, &mut rng.split(i as u64), true)?;
                        let p = g.sigmoid(logits);
                        Ok(g.value(p).clone())
                    })
                    .collect()
            }
            Arch::PhiSeg(p) => {
                let mut g = Graph::with_params(&self.store);
                let xv = tensor_input(&mut g, x);
                let prior = p.prior.fwd(&mut g, xv)?;
                let params: Vec<(Tensor<f32>, Tensor<f32>)> = prior
                    .iter()
                    .map(|q| (g.value(q.mu).clone(), g.value(q.logvar).clone()))
                    .collect();
                (0..t)
                    .map(|i| {
                        let mut g = Graph::with_params(&self.store);
                        let xv = tensor_input(&mut g, x);
                        let mut r = rng.split(i as u64);
                        let mut z = Vec::with_capacity(params.len());
                        for (mu, lv) in &params {
                            let (m, l) = (g.input(mu.clone()), g.input(lv.clone()));
                            z.push(g.reparam_sample(m, l, &mut r)?);
                        }
                        let logits = self.decode(&mut g, p, xv, &z)?;
                        let prob = g.sigmoid(logits);
                        Ok(g.value(prob).clone())
                    })
                    .collect()
            }
        }
    }

    /// SRM output features `[B, C, D, H, W]`.
    pub fn srm_forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_image(x)?;
        let (srm, _) = self.unet()?;
        let mut g = Graph::with_params(&self.store);
        let xv = tensor_input(&mut g, x);
        let f = srm.fwd(&mut g, xv)?;
        Ok(g.value(f).clone())
    }

    /// U-Net logits from SRM features, stochastic layer on or off.
    pub fn unet_logits(&self, features: &Tensor<f32>, active: bool, rng: &mut RngState) -> Result<Tensor<f32>> {
        let (_, unet) = self.unet()?;
        let mut g = Graph::with_params(&self.store);
        let f = g.input(features.clone());
        let t = unet.trunk(&mut g, f)?;
        let l = unet.head(&mut g, t, rng, active)?;
        Ok(g.value(l).clone())
    }

    /// Distilled 2D features `[B, C, H, W]` of a `[B, 1, D, H, W]` mask.
    pub fn distill(&self, gt: &Tensor<f32>) -> Result<Tensor<f32>> {
        let p = self.phiseg()?;
        self.check_volume(gt, gt.shape().first().copied().unwrap_or(0))?;
        let mut g = Graph::with_params(&self.store);
        let v = g.input(gt.clone());
        let d = p.distill.fwd(&mut g, v)?;
        Ok(g.value(d).clone())
    }

    /// Prior latents (no `gt`) or posterior latents (with `gt`), each with
    /// a reparameterised sample drawn from `rng`.
    pub fn encode(&self, x: &Tensor<f32>, gt: Option<&Tensor<f32>>, rng: &mut RngState) -> Result<LatentStack> {
        let b = self.check_image(x)?;
        let p = self.phiseg()?;
        let mut g = Graph::with_params(&self.store);
        let xv = tensor_input(&mut g, x);
        let gauss: Vec<Gauss> = match gt {
            None => p.prior.fwd(&mut g, xv)?,
            Some(y) => {
                self.check_volume(y, b)?;
                let yv = g.input(y.clone());
                let d = p.distill.fwd(&mut g, yv)?;
                let inp = g.concat_channels(&[xv, d])?;
                p.posterior.fwd(&mut g, inp)?
            }
        };
        let z = phiseg::sample(&mut g, &gauss, rng)?;
        let lifted = self.lift_all(&mut g, &z)?;
        let first = self.config.levels - self.config.latent_levels;
        Ok(gauss
            .iter()
            .enumerate()
            .map(|(i, q)| LatentLevel {
                level: first + i,
                mu: g.value(q.mu).clone(),
                logvar: g.value(q.logvar).clone(),
                z: g.value(z[i]).clone(),
                lifted: g.value(lifted[i]).clone(),
            })
            .collect())
    }

    /// Likelihood logits `s` (before fusion) from 2D latent samples,
    /// finest first.
    pub fn likelihood(&self, z: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let p = self.phiseg()?;
        let mut g = Graph::with_params(&self.store);
        let zv: Vec<Var> = z.iter().map(|t| g.input(t.clone())).collect();
        let lifted = self.lift_all(&mut g, &zv)?;
        let t = p.likelihood.trunk(&mut g, &lifted)?;
        let s = p.likelihood.head(&mut g, t)?;
        Ok(g.value(s).clone())
    }

    /// Fused logits `s'` from image `x` and likelihood logits `s`.
    pub fn fusion(&self, x: &Tensor<f32>, s: &Tensor<f32>) -> Result<Tensor<f32>> {
        let p = self.phiseg()?;
        let f = p
            .fusion
            .as_ref()
            .ok_or_else(|| Error::config(format!("{} has no fusion stage", self.family())))?;
        let mut g = Graph::with_params(&self.store);
        let (xv, sv) = (g.input(x.clone()), g.input(s.clone()));
        let out = f.fwd(&mut g, xv, sv)?;
        Ok(g.value(out).clone())
    }

    pub fn to_entries(&self) -> Vec<CkptEntry> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        std::iter::once(CkptEntry {
            name: format!("{CONFIG_PREFIX}{meta}"),
            dims: vec![0],
            data: Vec::new(),
        })
        .chain(self.store.iter().map(|(name, t)| CkptEntry {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data: t.data().to_vec(),
        }))
        .collect()
    }

    /// Rebuilds a network from checkpoint entries. With `family`, a
    /// PhiSeg-family checkpoint is loaded as that family, dropping the
    /// reconstruction head if the target has none.
    pub fn from_entries(entries: Vec<CkptEntry>, family: Option<ModelFamily>) -> Result<Self> {
        let mut it = entries.into_iter();
        let first = it.next().ok_or_else(|| Error::config("empty checkpoint"))?;
        let meta = first
            .name
            .strip_prefix(CONFIG_PREFIX)
            .ok_or_else(|| Error::config("checkpoint has no configuration entry"))?;
        let mut config: ModelConfig = serde_json::from_str(meta)?;
        if let Some(f) = family {
            if f != config.family {
                let compatible = f.is_phiseg()
                    && config.family.is_phiseg()
                    && f.has_fusion() == config.family.has_fusion()
                    && f != ModelFamily::PhisegUda;
                if !compatible {
                    return Err(Error::config(format!(
                        "cannot load a {} checkpoint as {f}",
                        config.family
                    )));
                }
                config.family = f;
            }
        }
        let mut net = Network::new(config, 0)?;
        let keep_recon = net.family() == ModelFamily::PhisegUda;
        let mut tensors = Vec::new();
        for e in it {
            if !keep_recon && e.name.starts_with(RECON_PREFIX) {
                continue;
            }
            tensors.push((e.name, Tensor::from_vec(&e.dims, e.data)?));
        }
        net.store.load_entries(tensors)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        formats::write_file(path, &formats::encode_ckpt(&self.to_entries()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_as(path, None)
    }

    pub fn load_as(path: &Path, family: Option<ModelFamily>) -> Result<Self> {
        Self::from_entries(formats::decode_ckpt(&formats::read_file(path)?)?, family)
    }
}

/// Parameter-free replication of a `[B, C, h, w]` latent along depth.
pub fn lift_latent(z: &Tensor<f32>, depth: usize, scaled: bool) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let v = g.input(z.clone());
    let l = phiseg::lift(&mut g, v, depth, scaled)?;
    Ok(g.value(l).clone())
}
