//! Structural reconstruction module and the 3D U-Net.

use drrseg_tensor::{RngState, Var};

use super::layers::{Block3, Conv3, ConvT3, Init, G};
use crate::error::{Error, Result};

/// `(kernel, pad)` along depth for a transposed conv that multiplies depth
/// by `stride` exactly: `k = s + 2p`.
pub fn srm_depth_kernel(stride: usize) -> (usize, usize) {
    let pad = stride.div_ceil(2);
    (stride + 2 * pad, pad)
}

/// Stack of transposed 3D convolutions inflating a depth-1 image to the
/// full target depth. In-plane extents are preserved.
#[derive(Clone, Debug)]
pub(crate) struct Srm {
    layers: Vec<ConvT3>,
}

impl Srm {
    pub fn new(init: &mut Init, strides: &[usize], channels: usize, depth: usize) -> Result<Self> {
        let product: usize = strides.iter().product();
        if strides.is_empty() || strides.contains(&0) || product != depth {
            return Err(Error::config(format!(
                "SRM z-strides {strides:?} multiply to {product}, target depth is {depth}"
            )));
        }
        let layers = strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let (k, p) = srm_depth_kernel(s);
                let cin = if i == 0 { 1 } else { channels };
                init.conv_t3(&format!("srm.{i}"), cin, channels, [k, 3, 3], [s, 1, 1], [p, 1, 1])
            })
            .collect();
        Ok(Srm { layers })
    }

    /// `[B, 1, H, W]` image to `[B, C, D, H, W]` features.
    pub fn fwd(&self, g: &mut G, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let mut h = g.reshape(x, &[s[0], 1, 1, s[2], s[3]])?;
        for layer in &self.layers {
            h = layer.fwd(g, h)?;
            h = g.relu(h);
        }
        Ok(h)
    }
}

/// Stochastic layer after the last decoder block.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Regularizer {
    None,
    Dropout { p: f64 },
    DropBlock { block_size: usize, drop_rate: f64 },
}

impl Regularizer {
    pub fn apply(&self, g: &mut G, x: Var, rng: &mut RngState, active: bool) -> Result<Var> {
        Ok(match *self {
            Regularizer::None => x,
            Regularizer::Dropout { p } => g.dropout(x, p, rng, active)?,
            Regularizer::DropBlock { block_size, drop_rate } => g.dropblock3d(x, block_size, drop_rate, rng, active)?,
        })
    }

    pub fn is_stochastic(&self) -> bool {
        match *self {
            Regularizer::None => false,
            Regularizer::Dropout { p } => p > 0.0,
            Regularizer::DropBlock { drop_rate, .. } => drop_rate > 0.0,
        }
    }
}

/// 3D decoder path shared by the U-Net and the likelihood network: at each
/// level an up-convolution, concatenation with a per-level side input, and
/// a conv block.
#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    ups: Vec<ConvT3>,
    blocks: Vec<Block3>,
}

impl Decoder {
    /// `widths[l]` are the channels at level `l` (0 finest); `side[l]` the
    /// channels concatenated at level `l < levels - 1`.
    pub fn new(init: &mut Init, name: &str, widths: &[usize], side: &[usize]) -> Self {
        let levels = widths.len();
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for l in (0..levels - 1).rev() {
            ups.push(init.conv_t3(
                &format!("{name}.up{l}"),
                widths[l + 1],
                widths[l],
                [2; 3],
                [2; 3],
                [0; 3],
            ));
            blocks.push(Block3::new(
                init,
                &format!("{name}.dec{l}"),
                widths[l] + side[l],
                widths[l],
            ));
        }
        Decoder { ups, blocks }
    }

    pub fn levels(&self) -> usize {
        self.ups.len() + 1
    }

    /// `side[l]` is concatenated after upsampling into level `l`; `None`
    /// skips the concatenation.
    pub fn fwd(&self, g: &mut G, bottom: Var, side: &[Option<Var>]) -> Result<Var> {
        let levels = self.ups.len() + 1;
        let mut h = bottom;
        for (i, l) in (0..levels - 1).rev().enumerate() {
            h = self.ups[i].fwd(g, h)?;
            if let Some(s) = side[l] {
                h = g.concat_channels(&[h, s])?;
            }
            h = self.blocks[i].fwd(g, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Unet3d {
    enc: Vec<Block3>,
    dec: Decoder,
    pub reg: Regularizer,
    head: Conv3,
}

impl Unet3d {
    pub fn new(init: &mut Init, cin: usize, widths: &[usize], reg: Regularizer, prior: f64) -> Self {
        let enc = widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                Block3::new(
                    init,
                    &format!("unet.enc{l}"),
                    if l == 0 { cin } else { widths[l - 1] },
                    w,
                )
            })
            .collect();
        let dec = Decoder::new(init, "unet", widths, widths);
        let head = init.logit_head("unet.head", widths[0], prior);
        Unet3d { enc, dec, reg, head }
    }

    /// Features after the last decoder block.
    pub fn trunk(&self, g: &mut G, x: Var) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for (l, block) in self.enc.iter().enumerate() {
            if l > 0 {
                h = g.max_pool3d(h, [2; 3])?;
            }
            h = block.fwd(g, h)?;
            skips.push(Some(h));
        }
        let bottom = skips.pop().flatten().expect("at least one level");
        self.dec.fwd(g, bottom, &skips)
    }

    pub fn head(&self, g: &mut G, trunk: Var, rng: &mut RngState, active: bool) -> Result<Var> {
        let h = self.reg.apply(g, trunk, rng, active)?;
        self.head.fwd(g, h)
    }
}
