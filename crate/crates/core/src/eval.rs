//! Post-processing, overlap metrics and Monte-Carlo uncertainty reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use drrseg_tensor::{RngState, Tensor};

use crate::drr::{project_mask, Mask2d, ProjectionGeometry};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, Network};
use crate::volume::{MaskVolume, Volume};

/// Median filter applied after thresholding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MedianMode {
    /// 3x3 per slice along the leading (depth) axis.
    Slices,
    /// 3x3x3.
    Volume,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostProcess {
    pub threshold: f32,
    pub median: MedianMode,
}

impl Default for PostProcess {
    fn default() -> Self {
        PostProcess {
            threshold: 0.5,
            median: MedianMode::Slices,
        }
    }
}

/// `1` where `prob > threshold`.
pub fn binarize(prob: &Volume<f32>, threshold: f32) -> MaskVolume {
    prob.map(|p| (p > threshold) as u8)
}

/// Binary 3x3 median per depth slice with replicated borders: a pixel is
/// set iff at least 5 of its 9 neighbours are.
pub fn median_slices(mask: &MaskVolume) -> MaskVolume {
    let [d, h, w] = mask.dims();
    let src = mask.data();
    let mut out = vec![0u8; src.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut n = 0;
                for yy in [y.saturating_sub(1), y, (y + 1).min(h - 1)] {
                    for xx in [x.saturating_sub(1), x, (x + 1).min(w - 1)] {
                        n += src[(z * h + yy) * w + xx] as usize;
                    }
                }
                out[(z * h + y) * w + x] = (n >= 5) as u8;
            }
        }
    }
    MaskVolume::new(mask.dims(), mask.spacing(), out).expect("same dims")
}

/// Binary 3x3x3 median with replicated borders (at least 14 of 27).
pub fn median_volume(mask: &MaskVolume) -> MaskVolume {
    let [d, h, w] = mask.dims();
    let src = mask.data();
    let clamp3 = |i: usize, n: usize| [i.saturating_sub(1), i, (i + 1).min(n - 1)];
    let mut out = vec![0u8; src.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut n = 0;
                for zz in clamp3(z, d) {
                    for yy in clamp3(y, h) {
                        for xx in clamp3(x, w) {
                            n += src[(zz * h + yy) * w + xx] as usize;
                        }
                    }
                }
                out[(z * h + y) * w + x] = (n >= 14) as u8;
            }
        }
    }
    MaskVolume::new(mask.dims(), mask.spacing(), out).expect("same dims")
}

pub fn binarize_and_filter(prob: &Volume<f32>, post: &PostProcess) -> MaskVolume {
    let m = binarize(prob, post.threshold);
    match post.median {
        MedianMode::Slices => median_slices(&m),
        MedianMode::Volume => median_volume(&m),
        MedianMode::Off => m,
    }
}

fn overlap(a: &[u8], b: &[u8]) -> (usize, usize, usize) {
    a.iter().zip(b).fold((0, 0, 0), |(i, na, nb), (&x, &y)| {
        let (x, y) = (x != 0, y != 0);
        (i + (x && y) as usize, na + x as usize, nb + y as usize)
    })
}

fn dice_raw(a: &[u8], b: &[u8]) -> f64 {
    let (i, na, nb) = overlap(a, b);
    if na + nb == 0 {
        1.0
    } else {
        2.0 * i as f64 / (na + nb) as f64
    }
}

/// `2 |A n B| / (|A| + |B|)`, 1 for two empty masks.
pub fn dice(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::config(format!("mask dims {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    Ok(dice_raw(pred.data(), gt.data()))
}

/// `|pred| / |gt|`.
pub fn volume_ratio(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::config(format!("mask dims {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let n = gt.count();
    if n == 0 {
        return Err(Error::config("volume ratio undefined for an empty ground truth"));
    }
    Ok(pred.count() as f64 / n as f64)
}

pub fn dice2d(pred: &Mask2d, gt: &Mask2d) -> Result<f64> {
    if (pred.rows, pred.cols) != (gt.rows, gt.cols) {
        return Err(Error::config(format!(
            "2D mask dims {}x{} vs {}x{}",
            pred.rows, pred.cols, gt.rows, gt.cols
        )));
    }
    Ok(dice_raw(&pred.data, &gt.data))
}

/// Mean, population standard deviation and range of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if min == max {
            // summing n copies of x and dividing by n need not give x back
            return Stats {
                mean: min,
                std: 0.0,
                min,
                max,
            };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Stats {
            // keep the bounds ordered despite summation rounding
            mean: mean.clamp(min, max),
            std: var.sqrt(),
            min,
            max,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub dice: Stats,
    pub volume_ratio: Stats,
}

/// Post-processes each sample independently and summarises the per-sample
/// metrics.
pub fn uncertainty_bounds(samples: &[Volume<f32>], gt: &MaskVolume, post: &PostProcess) -> Result<Bounds> {
    if samples.is_empty() {
        return Err(Error::config("no samples"));
    }
    let mut d = Vec::with_capacity(samples.len());
    let mut r = Vec::with_capacity(samples.len());
    for s in samples {
        let m = binarize_and_filter(s, post);
        d.push(dice(&m, gt)?);
        r.push(volume_ratio(&m, gt)?);
    }
    Ok(Bounds {
        dice: Stats::of(&d),
        volume_ratio: Stats::of(&r),
    })
}

/// One test case: network input and target mask.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    /// `[1, 1, H, W]`.
    pub x: Tensor<f32>,
    pub gt: MaskVolume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub samples: usize,
    pub seed: u64,
    pub post: PostProcess,
    /// Also score projected 2D masks under this geometry.
    pub projection: Option<ProjectionGeometry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedMetrics {
    pub dice2d: f64,
    pub mc: Stats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub id: String,
    /// Metrics of the mask from the mean probability over samples.
    pub dice: f64,
    pub volume_ratio: f64,
    /// Per-sample metric summaries.
    pub mc: Bounds,
    pub projected: Option<ProjectedMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl From<Stats> for MeanStd {
    fn from(s: Stats) -> Self {
        MeanStd {
            mean: s.mean,
            std: s.std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: MeanStd,
    pub volume_ratio: MeanStd,
    /// Mean over cases of the across-sample Dice standard deviation.
    pub mc_dice_std: f64,
    pub mc_volume_ratio_std: f64,
    pub dice2d: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: ModelConfig,
    pub options: EvalOptions,
    pub cases: Vec<CaseReport>,
    pub aggregate: Aggregate,
    pub notes: Vec<String>,
}

fn to_volume(t: &Tensor<f32>, like: &MaskVolume) -> Result<Volume<f32>> {
    Volume::new(like.dims(), like.spacing(), t.data().to_vec())
}

fn evaluate_case(net: &Network, case: &EvalCase, index: usize, opts: &EvalOptions) -> Result<CaseReport> {
    let rng = RngState::new(opts.seed).derive("eval").split(index as u64);
    let samples = net.sample(&case.x, opts.samples, &rng)?;
    let vols = samples
        .iter()
        .map(|s| to_volume(s, &case.gt))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0f32; case.gt.len()];
    for v in &vols {
        mean.iter_mut().zip(v.data()).for_each(|(m, &p)| *m += p);
    }
    let inv = 1.0 / vols.len() as f32;
    mean.iter_mut().for_each(|m| *m *= inv);
    let mean = Volume::new(case.gt.dims(), case.gt.spacing(), mean)?;
    let headline = binarize_and_filter(&mean, &opts.post);
    let projected = match &opts.projection {
        None => None,
        Some(geom) => {
            let gt2 = project_mask(&case.gt, geom)?;
            let per_sample = vols
                .iter()
                .map(|v| dice2d(&project_mask(&binarize_and_filter(v, &opts.post), geom)?, &gt2))
                .collect::<Result<Vec<_>>>()?;
            Some(ProjectedMetrics {
                dice2d: dice2d(&project_mask(&headline, geom)?, &gt2)?,
                mc: Stats::of(&per_sample),
            })
        }
    };
    Ok(CaseReport {
        id: case.id.clone(),
        dice: dice(&headline, &case.gt)?,
        volume_ratio: volume_ratio(&headline, &case.gt)?,
        mc: uncertainty_bounds(&vols, &case.gt, &opts.post)?,
        projected,
    })
}

/// Runs the full pipeline on every case; deterministic per seed.
pub fn evaluate(net: &Network, cases: &[EvalCase], opts: &EvalOptions) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::config("no evaluation cases"));
    }
    let reports = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| evaluate_case(net, c, i, opts))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&CaseReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let n = reports.len() as f64;
    let aggregate = Aggregate {
        dice: Stats::of(&col(&|r| r.dice)).into(),
        volume_ratio: Stats::of(&col(&|r| r.volume_ratio)).into(),
        mc_dice_std: col(&|r| r.mc.dice.std).iter().sum::<f64>() / n,
        mc_volume_ratio_std: col(&|r| r.mc.volume_ratio.std).iter().sum::<f64>() / n,
        dice2d: opts
            .projection
            .as_ref()
            .map(|_| Stats::of(&col(&|r| r.projected.as_ref().map_or(0.0, |p| p.dice2d))).into()),
    };
    let mut notes = Vec::new();
    if opts.projection.is_some() {
        notes.push(
            "2D masks are deterministic ray projections (path length > 0.5 voxel), not a learned projection".into(),
        );
    }
    if !net.is_stochastic() && opts.samples > 1 {
        notes.push("model has no stochastic layers; all samples are identical".into());
    }
    Ok(MetricsReport {
        model: net.config().clone(),
        options: opts.clone(),
        cases: reports,
        aggregate,
        notes,
    })
}
