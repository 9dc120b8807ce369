//! 2D-3D hierarchical conditional VAE: 2D prior/posterior encoders with
//! latents at the coarse levels, a distillation module that reduces the 3D
//! ground truth to 2D, a 3D likelihood decoder and an image fusion stage.

use drrseg_tensor::{RngState, Var};

use super::layers::{Block2, Conv2, Conv3, Init, G};
use super::unet::{srm_depth_kernel, Decoder};
use crate::error::{Error, Result};

/// Strided 3D convolutions collapsing depth to 1, the mirror of the SRM.
#[derive(Clone, Debug)]
pub(crate) struct Distill {
    layers: Vec<Conv3>,
    pub out_channels: usize,
}

impl Distill {
    /// Channels run `1 -> channels / 2 -> channels -> ... -> channels`.
    pub fn new(init: &mut Init, strides: &[usize], channels: usize) -> Self {
        let half = (channels / 2).max(1);
        let layers = strides
            .iter()
            .rev()
            .enumerate()
            .map(|(i, &s)| {
                let (k, p) = srm_depth_kernel(s);
                let (cin, cout) = match i {
                    0 => (1, half),
                    1 => (half, channels),
                    _ => (channels, channels),
                };
                init.conv3(&format!("distill.{i}"), cin, cout, [k, 3, 3], [s, 1, 1], [p, 1, 1])
            })
            .collect();
        Distill {
            layers,
            out_channels: if strides.len() == 1 { half } else { channels },
        }
    }

    /// `[B, 1, D, H, W]` mask to `[B, C, H, W]` features.
    pub fn fwd(&self, g: &mut G, gt: Var) -> Result<Var> {
        let mut h = gt;
        for layer in &self.layers {
            h = layer.fwd(g, h)?;
            h = g.relu(h);
        }
        let s = g.shape(h).to_vec();
        if s[2] != 1 {
            return Err(Error::config(format!("distillation left depth {}", s[2])));
        }
        Ok(g.reshape(h, &[s[0], s[1], s[3], s[4]])?)
    }
}

/// Latent heads start near `N(0, 1)` so the initial KL is small.
const HEAD_SCALE: f32 = 0.1;

/// Gaussian parameters of one latent level, `[B, C, h, w]` each.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Gauss {
    pub mu: Var,
    pub logvar: Var,
}

/// 2D encoder mirroring the U-Net encoder, emitting `(mu, logvar)` at the
/// `latent_levels` coarsest levels.
#[derive(Clone, Debug)]
pub(crate) struct Encoder2d {
    blocks: Vec<Block2>,
    heads: Vec<(usize, Conv2, Conv2)>,
}

impl Encoder2d {
    pub fn new(init: &mut Init, name: &str, cin: usize, widths: &[usize], latent_levels: usize, latent: usize) -> Self {
        let levels = widths.len();
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                Block2::new(
                    init,
                    &format!("{name}.enc{l}"),
                    if l == 0 { cin } else { widths[l - 1] },
                    w,
                )
            })
            .collect();
        let heads = (levels - latent_levels..levels)
            .map(|l| {
                (
                    l,
                    init.conv2_scaled(&format!("{name}.mu{l}"), widths[l], latent, 1, HEAD_SCALE),
                    init.conv2_scaled(&format!("{name}.logvar{l}"), widths[l], latent, 1, HEAD_SCALE),
                )
            })
            .collect();
        Encoder2d { blocks, heads }
    }

    /// Latent parameters ordered from the finest latent level to the
    /// coarsest.
    pub fn fwd(&self, g: &mut G, x: Var) -> Result<Vec<Gauss>> {
        let mut feats = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for (l, block) in self.blocks.iter().enumerate() {
            if l > 0 {
                h = g.max_pool2d(h, [2, 2])?;
            }
            h = block.fwd(g, h)?;
            feats.push(h);
        }
        self.heads
            .iter()
            .map(|(l, mu, lv)| {
                Ok(Gauss {
                    mu: mu.fwd(g, feats[*l])?,
                    logvar: lv.fwd(g, feats[*l])?,
                })
            })
            .collect()
    }
}

/// Replicates a `[B, C, h, w]` latent along a new depth axis of extent
/// `depth`, scaled by `1 / sqrt(depth)` when `scaled` so the L2 norm is
/// unchanged.
pub(crate) fn lift(g: &mut G, z: Var, depth: usize, scaled: bool) -> Result<Var> {
    let scale = if scaled { 1.0 / (depth as f32).sqrt() } else { 1.0 };
    Ok(g.repeat_depth(z, depth, scale)?)
}

/// 3D decoder fed by lifted latents: the coarsest latent is the bottom
/// input, finer latents are concatenated after each up-convolution.
#[derive(Clone, Debug)]
pub(crate) struct Likelihood {
    bottom: super::layers::Block3,
    dec: Decoder,
    head: Conv3,
    latent_levels: usize,
}

impl Likelihood {
    pub fn new(init: &mut Init, widths: &[usize], latent_levels: usize, latent: usize, prior: f64) -> Self {
        let levels = widths.len();
        let side: Vec<usize> = (0..levels)
            .map(|l| if l >= levels - latent_levels { latent } else { 0 })
            .collect();
        Likelihood {
            bottom: super::layers::Block3::new(init, "likelihood.bottom", latent, widths[levels - 1]),
            dec: Decoder::new(init, "likelihood", widths, &side),
            head: init.logit_head("likelihood.head", widths[0], prior),
            latent_levels,
        }
    }

    /// Features after the last decoder block; `lifted` runs finest latent
    /// level first.
    pub fn trunk(&self, g: &mut G, lifted: &[Var]) -> Result<Var> {
        if lifted.len() != self.latent_levels {
            return Err(Error::config(format!(
                "likelihood expects {} latent levels, got {}",
                self.latent_levels,
                lifted.len()
            )));
        }
        let levels = self.dec_levels();
        let first = levels - self.latent_levels;
        let mut side = vec![None; levels - 1];
        for (i, &z) in lifted[..lifted.len() - 1].iter().enumerate() {
            side[first + i] = Some(z);
        }
        let bottom = self.bottom.fwd(g, *lifted.last().expect("latent levels > 0"))?;
        self.dec.fwd(g, bottom, &side)
    }

    pub fn head(&self, g: &mut G, trunk: Var) -> Result<Var> {
        self.head.fwd(g, trunk)
    }

    fn dec_levels(&self) -> usize {
        self.dec.levels()
    }
}

/// Image features broadcast along depth, concatenated with the likelihood
/// logits and convolved to the final logits. Initialised to pass `s`
/// through unchanged.
#[derive(Clone, Debug)]
pub(crate) struct Fusion {
    feat: Conv2,
    mix: Conv3,
}

impl Fusion {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        Fusion {
            feat: init.conv2("fusion.feat", 1, channels, 3),
            mix: init.conv3_passthrough("fusion.mix", 1 + channels, 0),
        }
    }

    pub fn fwd(&self, g: &mut G, x: Var, s: Var) -> Result<Var> {
        let depth = g.shape(s)[2];
        let f = self.feat.fwd(g, x)?;
        let f = g.relu(f);
        let f = g.repeat_depth(f, depth, 1.0)?;
        let h = g.concat_channels(&[s, f])?;
        self.mix.fwd(g, h)
    }
}

/// Draws `z = mu + exp(logvar / 2) eps` per level.
pub(crate) fn sample(g: &mut G, levels: &[Gauss], rng: &mut RngState) -> Result<Vec<Var>> {
    levels
        .iter()
        .map(|q| Ok(g.reparam_sample(q.mu, q.logvar, rng)?))
        .collect()
}
