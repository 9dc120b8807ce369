//! Dataset assembly and the optimisation loops.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use drrseg_tensor::{Adam, AdamConfig, Graph, RngState, Tensor};

use crate::drr::{downsample_image, normalize_image, siddon_raytrace, ProjectionGeometry, PIXEL_MM, THORAX_SOURCE_MM};
use crate::error::{Error, Result};
use crate::eval::{binarize_and_filter, dice, EvalCase, PostProcess};
use crate::formats::{self, read_image, read_mask, write_image, write_mask, write_volume};
use crate::models::{LossTerms, ModelConfig, ModelFamily, Network};
use crate::phantom::{apply_domain_shift, DomainShiftSpec, PhantomSpec};
use crate::volume::{center_crop, MaskVolume, Volume};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Everything needed to regenerate a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub phantom: PhantomSpec,
    /// Full-resolution rendering geometry.
    pub geometry: ProjectionGeometry,
    /// Network input extent; the DRR is downsampled to `input x input`.
    pub input: usize,
    /// Target volume dims after centre cropping.
    pub target: [usize; 3],
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub shift: Option<DomainShiftSpec>,
    /// Move the occluder by up to a quarter of its size per item.
    pub jitter_occluder: bool,
}

impl DatasetSpec {
    /// Cubic `n^3` phantoms rendered on a `4n` detector aligned to the
    /// volume, downsampled to `n x n`, with a 50/10 split.
    pub fn standard(phantom: PhantomSpec, seed: u64) -> Result<Self> {
        let n = phantom.dims[1];
        let target = [phantom.dims[0].min(n), n, n];
        let fov = n as f64 * phantom.spacing_mm as f64;
        Ok(DatasetSpec {
            geometry: ProjectionGeometry::cone_aligned(THORAX_SOURCE_MM, 4 * n, PIXEL_MM, fov)?,
            phantom,
            input: n,
            target,
            n_train: 50,
            n_test: 10,
            seed,
            shift: None,
            jitter_occluder: false,
        })
    }

    /// Lungs in `n^3` thorax phantoms.
    pub fn lungs(n: usize, seed: u64) -> Result<Self> {
        Self::standard(PhantomSpec::thorax(n), seed)
    }

    /// Ribs in `n^3` ribcage phantoms.
    pub fn ribs(n: usize, seed: u64) -> Result<Self> {
        Self::standard(PhantomSpec::ribcage(n), seed)
    }

    /// Thorax phantoms behind a gain/offset change, acquisition noise and a
    /// slab artefact over part of one lung field that moves between items.
    pub fn shifted_lungs(n: usize, seed: u64) -> Result<Self> {
        let mut spec = Self::lungs(n, seed)?;
        spec.shift = Some(DomainShiftSpec::exp3_default(spec.phantom.dims));
        spec.jitter_occluder = true;
        Ok(spec)
    }

    /// Parallel projection of target masks onto the input image plane.
    pub fn mask_projection(&self) -> ProjectionGeometry {
        ProjectionGeometry::parallel(self.input, self.phantom.spacing_mm as f64)
    }

    fn validate(&self) -> Result<()> {
        if self.n_train + self.n_test == 0 {
            return Err(Error::config("dataset needs at least one item"));
        }
        if self.input == 0 || self.geometry.rows < self.input || self.geometry.cols < self.input {
            return Err(Error::config(format!(
                "cannot downsample a {}-pixel detector to {}",
                self.geometry.rows, self.input
            )));
        }
        if self.target[1] != self.input || self.target[2] != self.input {
            return Err(Error::config(format!(
                "target in-plane dims {:?} must equal the input extent {}",
                &self.target[1..],
                self.input
            )));
        }
        if (0..3).any(|a| self.target[a] > self.phantom.dims[a]) {
            return Err(Error::config(format!(
                "target {:?} larger than phantom {:?}",
                self.target, self.phantom.dims
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub volume: String,
    pub mask: String,
    pub drr: String,
    pub input: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub items: Vec<ManifestItem>,
}

fn item_seed(root: &RngState, index: usize) -> u64 {
    root.split(index as u64).next_u64()
}

fn build_item(spec: &DatasetSpec, dir: &Path, index: usize) -> Result<ManifestItem> {
    let root = RngState::new(spec.seed).derive("dataset");
    let seed = item_seed(&root, index);
    let (split, k) = if index < spec.n_train {
        (Split::Train, index)
    } else {
        (Split::Test, index - spec.n_train)
    };
    let id = format!("{}-{k:03}", if split == Split::Train { "train" } else { "test" });
    let (mut volume, mask) = spec.phantom.generate(seed)?;
    if let Some(shift) = &spec.shift {
        let mut shift = shift.clone();
        let mut rng = RngState::new(seed).derive("occluder");
        if let (true, Some(o)) = (spec.jitter_occluder, shift.occluder.as_mut()) {
            for a in 1..3 {
                let size = o.hi[a] - o.lo[a];
                let max = (size / 4) as isize;
                let dz = rng.below(2 * max as usize + 1) as isize - max;
                let lo = (o.lo[a] as isize + dz).clamp(0, (spec.phantom.dims[a] - size) as isize) as usize;
                o.lo[a] = lo;
                o.hi[a] = lo + size;
            }
        }
        volume = apply_domain_shift(&volume, &shift, seed)?;
    }
    let drr = siddon_raytrace(&volume, &spec.geometry)?;
    let input = normalize_image(&downsample_image(&drr, spec.input, spec.input)?);
    let target_mask = center_crop(&mask, spec.target)?;
    let target_vol = center_crop(&volume, spec.target)?;
    let item = ManifestItem {
        volume: format!("items/{id}.vol.volb"),
        mask: format!("items/{id}.mask.volb"),
        drr: format!("items/{id}.drr.imgf"),
        input: format!("items/{id}.input.imgf"),
        id,
        split,
        seed,
    };
    write_volume(&dir.join(&item.volume), &target_vol)?;
    write_mask(&dir.join(&item.mask), &target_mask)?;
    write_image(&dir.join(&item.drr), &drr)?;
    write_image(&dir.join(&item.input), &input)?;
    Ok(item)
}

/// Renders DRR/target pairs for every item and writes the manifest last.
pub fn build_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let items = (0..spec.n_train + spec.n_test)
        .into_par_iter()
        .map(|i| build_item(spec, dir, i))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        items,
    };
    formats::write_file(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

/// One loaded item: `[1, 1, n, n]` input and its target mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub mask: MaskVolume,
}

impl Sample {
    pub fn eval_case(&self) -> EvalCase {
        EvalCase {
            id: self.id.clone(),
            x: self.x.clone(),
            gt: self.mask.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let manifest: DatasetManifest = serde_json::from_slice(&formats::read_file(&path)?)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for item in &manifest.items {
            let img = read_image(&dir.join(&item.input))?;
            let n = manifest.spec.input;
            if img.rows() != n || img.cols() != n {
                return Err(Error::config(format!(
                    "{}: input is {}x{}, manifest says {n}",
                    item.id,
                    img.rows(),
                    img.cols()
                )));
            }
            let mask = read_mask(&dir.join(&item.mask))?;
            let [d, h, w] = mask.dims();
            let sample = Sample {
                id: item.id.clone(),
                x: Tensor::from_vec(&[1, 1, n, n], img.data().to_vec())?,
                y: Tensor::from_vec(&[1, 1, d, h, w], mask.data().iter().map(|&m| m as f32).collect())?,
                mask,
            };
            match item.split {
                Split::Train => train.push(sample),
                Split::Test => test.push(sample),
            }
        }
        Ok(Dataset { manifest, train, test })
    }

    /// Model extents implied by the targets.
    pub fn extent(&self) -> usize {
        self.manifest.spec.input
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a better validation Dice.
    pub patience: usize,
    pub seed: u64,
    /// KL weight, ramped linearly over the first `warmup` fraction of steps.
    pub beta: f64,
    pub warmup: f64,
    /// Weight of the reconstruction loss; 0 disables target steps.
    pub recon_weight: f64,
    /// Stop after this many segmentation steps (smoke runs).
    pub max_steps: Option<usize>,
    pub post: PostProcess,
}

impl TrainConfig {
    pub fn new(family: ModelFamily, extent: usize, seed: u64) -> Result<Self> {
        Ok(TrainConfig {
            model: ModelConfig::new(family, extent)?,
            lr: 1e-3,
            batch: 4,
            epochs: 40,
            patience: 10,
            seed,
            beta: 1.0,
            warmup: 0.1,
            recon_weight: 0.01,
            max_steps: None,
            post: PostProcess::default(),
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch == 0 || self.epochs == 0 || !(self.beta >= 0.0) {
            return Err(Error::config(format!(
                "invalid training config: lr {} batch {} epochs {} beta {}",
                self.lr, self.batch, self.epochs, self.beta
            )));
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub terms: LossTerms,
    /// Unweighted target reconstruction loss of the same update.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_seg_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_recon_loss: Option<f64>,
    pub val_dice: f64,
}

/// Everything logged during training. Wall-clock time is kept out so the
/// log is a pure function of the configuration and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub dataset: String,
    pub target_dataset: Option<String>,
    pub params: usize,
    /// Named random streams derived from the seed.
    pub rng_streams: Vec<String>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub stopped_early: bool,
}

/// Mean validation Dice of deterministic predictions.
pub fn validation_dice(net: &Network, samples: &[Sample], post: &PostProcess) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let scores = samples
        .par_iter()
        .map(|s| {
            let p = net.predict(&s.x)?;
            let prob = Volume::new(s.mask.dims(), s.mask.spacing(), p.into_data())?;
            dice(&binarize_and_filter(&prob, post), &s.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn permutation(n: usize, rng: &mut RngState) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.below(i + 1));
    }
    p
}

fn stack(samples: &[&Sample], f: impl Fn(&Sample) -> &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(Tensor::stack_batch(
        &samples.iter().map(|s| f(s).clone()).collect::<Vec<_>>(),
    )?)
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Diverged {
            step,
            msg: format!("{what} loss is {v}"),
        });
    }
    Ok(())
}

/// Optional progress callback: `(epoch, EpochLog)`.
pub type Progress<'a> = &'a mut dyn FnMut(&EpochLog);

/// Trains on `data` and, for `phiseg-uda`, alternates with reconstruction
/// steps on the images of `target`. Returns the best-by-validation-Dice
/// network and the log.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    target: Option<&Dataset>,
    progress: Option<Progress>,
) -> Result<(Network, TrainLog)> {
    config.validate()?;
    let n = data.extent();
    if config.model.size != n || config.model.depth != data.manifest.spec.target[0] {
        return Err(Error::config(format!(
            "model extent {}x{} does not match dataset {:?}",
            config.model.depth, config.model.size, data.manifest.spec.target
        )));
    }
    if data.train.is_empty() {
        return Err(Error::config("dataset has no training items"));
    }
    let uda = config.model.family == ModelFamily::PhisegUda && config.recon_weight > 0.0;
    let target_images: Vec<&Sample> = match (uda, target) {
        (true, Some(t)) => t.train.iter().collect(),
        _ => Vec::new(),
    };
    if let Some(t) = target {
        if t.extent() != n {
            return Err(Error::config("target dataset extent differs from source"));
        }
    }
    let mut net = Network::new(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(
        net.params(),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let root = RngState::new(config.seed);
    let mut shuffle = root.derive("shuffle");
    let mut noise = root.derive("noise");
    let mut target_order = root.derive("target");
    let mut rng_streams = vec!["init".to_string(), "shuffle".into(), "noise".into()];
    if !target_images.is_empty() {
        rng_streams.push("target".into());
    }

    let per_epoch = data.train.len().div_ceil(config.batch);
    let planned = config.max_steps.unwrap_or(usize::MAX).min(per_epoch * config.epochs);
    let warmup = ((planned as f64 * config.warmup).ceil() as usize).max(1);
    let mut log = TrainLog {
        config: config.clone(),
        dataset: data.manifest.spec.phantom.kind.to_string(),
        target_dataset: target.filter(|_| uda).map(|t| t.manifest.spec.phantom.kind.to_string()),
        params: net.params().num_scalars(),
        rng_streams,
        steps: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_dice: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best = net.params().clone();
    let mut step = 0usize;
    let mut since_best = 0usize;
    let mut target_queue: Vec<usize> = Vec::new();
    let mut progress = progress;

    'epochs: for epoch in 1..=config.epochs {
        let order = permutation(data.train.len(), &mut shuffle);
        let (mut seg_sum, mut seg_n, mut rec_sum, mut rec_n) = (0.0, 0usize, 0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            if step >= planned {
                break;
            }
            step += 1;
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (x, y) = (stack(&batch, |s| &s.x)?, stack(&batch, |s| &s.y)?);
            let beta = config.beta * (step as f64 / warmup as f64).min(1.0);
            let xt = if target_images.is_empty() {
                None
            } else {
                let mut picks = Vec::with_capacity(config.batch);
                while picks.len() < config.batch.min(target_images.len()) {
                    if target_queue.is_empty() {
                        target_queue = permutation(target_images.len(), &mut target_order);
                        target_queue.reverse();
                    }
                    picks.push(target_images[target_queue.pop().expect("refilled")]);
                }
                Some(stack(&picks, |s| &s.x)?)
            };
            // Source segmentation and target reconstruction share one update
            // so `recon_weight` sets their balance; Adam would cancel a
            // weight applied to a separate step.
            let (grads, terms, recon) = {
                let mut g = Graph::with_params(net.params());
                let (mut loss, terms) = net.seg_loss(&mut g, &x, &y, &mut noise, beta)?;
                check_finite(step, "segmentation", terms.total)?;
                let mut recon = None;
                if let Some(xt) = &xt {
                    let r = net.recon_loss(&mut g, xt)?;
                    let rv = g.value(r).item() as f64;
                    check_finite(step, "reconstruction", rv)?;
                    let weighted = g.scale(r, config.recon_weight as f32);
                    loss = g.add(loss, weighted)?;
                    recon = Some(rv);
                }
                (g.backward(loss)?.dense(net.params()), terms, recon)
            };
            adam.step(net.params_mut(), &grads)?;
            seg_sum += terms.total;
            seg_n += 1;
            if let Some(r) = recon {
                rec_sum += r;
                rec_n += 1;
            }
            log.steps.push(StepLog {
                step,
                epoch,
                terms,
                recon,
            });
        }
        if seg_n == 0 {
            break;
        }
        let val_dice = validation_dice(&net, &data.test, &config.post)?;
        let entry = EpochLog {
            epoch,
            mean_seg_loss: seg_sum / seg_n as f64,
            mean_recon_loss: (rec_n > 0).then(|| rec_sum / rec_n as f64),
            val_dice,
        };
        if let Some(p) = progress.as_mut() {
            p(&entry);
        }
        log.epochs.push(entry);
        if val_dice > log.best_val_dice {
            log.best_val_dice = val_dice;
            log.best_epoch = epoch;
            best = net.params().clone();
            since_best = 0;
        } else if log.best_val_dice > 0.0 {
            // Runs sit at Dice 0 until they leave the all-background
            // solution; the plateau clock starts once they have.
            since_best += 1;
            if since_best >= config.patience {
                log.stopped_early = epoch < config.epochs;
                break 'epochs;
            }
        }
        if step >= planned {
            break;
        }
    }
    *net.params_mut() = best;
    Ok((net, log))
}

/// Trains and writes `model.ckpt` and `train_log.json` into `out`.
pub fn train_to_dir(
    config: &TrainConfig,
    data: &Dataset,
    target: Option<&Dataset>,
    out: &Path,
    progress: Option<Progress>,
) -> Result<(Network, TrainLog)> {
    let (net, log) = train(config, data, target, progress)?;
    net.save(&out.join(CHECKPOINT))?;
    formats::write_file(&out.join(TRAIN_LOG), serde_json::to_string_pretty(&log)?.as_bytes())?;
    Ok((net, log))
}
