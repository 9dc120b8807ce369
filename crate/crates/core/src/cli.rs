//! The `drrseg` command line: one subcommand per pipeline stage.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::drr::{
    downsample_image, normalize_image, siddon_raytrace, BeamMode, ProjectionGeometry, PIXEL_MM, THORAX_SOURCE_MM,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MedianMode, PostProcess};
use crate::formats::{self, read_volume, write_image, write_mask, write_pgm, write_volume};
use crate::models::{ModelFamily, Network, Regularizer};
use crate::phantom::{apply_domain_shift, DomainShiftSpec, PhantomKind, PhantomSpec};
use crate::training::{build_dataset, train_to_dir, Dataset, DatasetSpec, EpochLog, TrainConfig, TRAIN_LOG};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Parser, Debug)]
#[command(name = "drrseg", version, about = "3D segmentation from single radiographs")]
pub struct Cli {
    /// Emit progress as JSON lines.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate phantom volumes and their masks.
    Phantom(PhantomArgs),
    /// Render a DRR from a volume.
    Render(RenderArgs),
    /// Build a training/test dataset of DRR and target mask pairs.
    Dataset(DatasetArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with Monte-Carlo sampling.
    Eval(EvalArgs),
    /// Train PhiSeg with target-domain reconstruction.
    Uda(UdaArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(value_enum)]
    pub kind: KindArg,
    /// `N` for a cube or `D,H,W`.
    #[arg(long, default_value = "32", value_parser = parse_dims)]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Apply the default gain/noise/occluder shift.
    #[arg(long)]
    pub shift: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum KindArg {
    Thorax,
    Ribcage,
}

impl From<KindArg> for PhantomKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Thorax => PhantomKind::Thorax,
            KindArg::Ribcage => PhantomKind::Ribcage,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ModeArg {
    Cone,
    Parallel,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub vol: PathBuf,
    #[arg(long, value_enum, default_value = "cone")]
    pub mode: ModeArg,
    /// Source to isocenter distance.
    #[arg(long, default_value_t = THORAX_SOURCE_MM)]
    pub dist_mm: f64,
    /// Isocenter to detector distance; default magnifies the volume onto
    /// the whole detector.
    #[arg(long)]
    pub detector_dist_mm: Option<f64>,
    #[arg(long, default_value_t = PIXEL_MM)]
    pub pixel_mm: f64,
    #[arg(long, default_value_t = 128)]
    pub detector: usize,
    /// Downsample to `N x N` and normalise to [0, 1].
    #[arg(long)]
    pub down: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    #[arg(long, value_enum, default_value = "thorax")]
    pub kind: KindArg,
    /// Cubic extent of phantoms, targets and network input.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 50)]
    pub n_train: usize,
    #[arg(long, default_value_t = 10)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Apply the default domain shift with a per-item occluder position.
    #[arg(long)]
    pub shift: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// KL weight per target voxel.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Dropout probability for `unet-dropout`.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub dropblock_size: Option<usize>,
    #[arg(long)]
    pub dropblock_rate: Option<f64>,
    /// Replicate latents along depth without the 1/sqrt(depth) scale.
    #[arg(long)]
    pub unscaled_lift: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelFamily,
    /// With `--model phiseg`, drop the fusion module.
    #[arg(long)]
    pub no_fusion: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct UdaArgs {
    /// Unlabelled target-domain dataset; its training images are used.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub recon_weight: f64,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Monte-Carlo samples per case.
    #[arg(long, default_value_t = 20)]
    pub mc: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    #[arg(long, value_enum, default_value = "slices")]
    pub median: MedianMode,
    /// Also report Dice of masks projected onto the image plane.
    #[arg(long)]
    pub project: bool,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("expected N or D,H,W, got `{s}`")),
    }
}

/// Record written next to the outputs of every artifact-producing run.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub workers: usize,
    pub wall_clock_s: f64,
}

struct Ctx {
    json: bool,
    workers: usize,
    started: Instant,
}

impl Ctx {
    fn progress(&self, event: &str, human: String, data: serde_json::Value) {
        let mut out = std::io::stdout().lock();
        let _ = if self.json {
            writeln!(out, "{}", json!({ "event": event, "data": data }))
        } else {
            writeln!(out, "{human}")
        };
    }

    fn manifest(
        &self,
        dir: &Path,
        subcommand: &str,
        config: impl Serialize,
        seed: u64,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Result<()> {
        let m = RunManifest {
            subcommand: subcommand.into(),
            config: serde_json::to_value(config)?,
            seed,
            inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION").into(),
            workers: self.workers,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        formats::write_file(&dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&m)?.as_bytes())
    }
}

fn sibling_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn cmd_phantom(ctx: &Ctx, a: &PhantomArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::config("--count must be at least 1"));
    }
    let spec = PhantomSpec::new(a.kind.into(), a.dims);
    let shift = a.shift.then(|| DomainShiftSpec::exp3_default(a.dims));
    // Everything is generated before anything is written.
    let mut items = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        let (mut vol, mask) = spec.generate(seed)?;
        if let Some(s) = &shift {
            vol = apply_domain_shift(&vol, s, seed)?;
        }
        items.push((seed, vol, mask));
    }
    let mut outputs = Vec::new();
    for (seed, vol, mask) in &items {
        let stem = format!("{}-{seed}", spec.kind);
        let (v, m) = (
            a.out.join(format!("{stem}.vol.volb")),
            a.out.join(format!("{stem}.mask.volb")),
        );
        write_volume(&v, vol)?;
        write_mask(&m, mask)?;
        ctx.progress(
            "phantom",
            format!("{} ({} mask voxels)", v.display(), mask.count()),
            json!({ "volume": v, "mask": m, "seed": seed, "mask_voxels": mask.count() }),
        );
        outputs.extend([v, m]);
    }
    ctx.manifest(
        &a.out,
        "phantom",
        json!({ "spec": spec, "shift": shift, "count": a.count }),
        a.seed,
        Vec::new(),
        outputs,
    )
}

fn cmd_render(ctx: &Ctx, a: &RenderArgs) -> Result<()> {
    let vol = read_volume(&a.vol)?;
    let extent = vol.extent_mm();
    let geom = match (a.mode, a.detector_dist_mm) {
        (ModeArg::Parallel, _) => ProjectionGeometry::parallel(a.detector, a.pixel_mm),
        (ModeArg::Cone, None) => {
            ProjectionGeometry::cone_aligned(a.dist_mm, a.detector, a.pixel_mm, extent[1].max(extent[2]))?
        }
        (ModeArg::Cone, Some(d)) => ProjectionGeometry {
            mode: BeamMode::Cone,
            source_distance_mm: a.dist_mm,
            detector_distance_mm: d,
            rows: a.detector,
            cols: a.detector,
            pixel_mm: a.pixel_mm,
        },
    };
    let mut img = siddon_raytrace(&vol, &geom)?;
    if let Some(n) = a.down {
        img = normalize_image(&downsample_image(&img, n, n)?);
    }
    write_image(&a.out, &img)?;
    let preview = a.out.with_extension("pgm");
    write_pgm(&preview, img.rows(), img.cols(), img.data())?;
    ctx.progress(
        "render",
        format!("{} ({}x{})", a.out.display(), img.rows(), img.cols()),
        json!({ "image": a.out, "preview": preview, "rows": img.rows(), "cols": img.cols() }),
    );
    let dir = sibling_dir(&a.out);
    ctx.manifest(
        &dir,
        "render",
        &geom,
        0,
        vec![a.vol.clone()],
        vec![a.out.clone(), preview],
    )
}

fn cmd_dataset(ctx: &Ctx, a: &DatasetArgs) -> Result<()> {
    let mut spec = match (a.kind, a.shift) {
        (KindArg::Thorax, false) => DatasetSpec::lungs(a.size, a.seed)?,
        (KindArg::Thorax, true) => DatasetSpec::shifted_lungs(a.size, a.seed)?,
        (KindArg::Ribcage, shift) => {
            let mut s = DatasetSpec::ribs(a.size, a.seed)?;
            if shift {
                s.shift = Some(DomainShiftSpec::exp3_default(s.phantom.dims));
                s.jitter_occluder = true;
            }
            s
        }
    };
    spec.n_train = a.n_train;
    spec.n_test = a.n_test;
    let manifest = build_dataset(&spec, &a.out)?;
    ctx.progress(
        "dataset",
        format!("{}: {} items", a.out.display(), manifest.items.len()),
        json!({ "dir": a.out, "items": manifest.items.len() }),
    );
    ctx.manifest(
        &a.out,
        "dataset",
        &spec,
        a.seed,
        Vec::new(),
        vec![a.out.join(crate::training::MANIFEST)],
    )
}

fn train_config(family: ModelFamily, f: &TrainFlags, data: &Dataset) -> Result<TrainConfig> {
    let mut c = TrainConfig::new(family, data.extent(), f.seed)?;
    c.model.depth = data.manifest.spec.target[0];
    c.model.srm_strides = crate::models::default_srm_strides(c.model.depth)?;
    c.lr = f.lr;
    c.batch = f.batch;
    c.epochs = f.epochs;
    c.patience = f.patience;
    c.beta = f.beta;
    c.max_steps = f.max_steps;
    if let Some(b) = f.base_channels {
        c.model.base_channels = b;
    }
    c.model.lift_scaled = !f.unscaled_lift;
    match &mut c.model.regularizer {
        Regularizer::Dropout { p } => {
            if let Some(v) = f.dropout {
                *p = v;
            }
        }
        Regularizer::DropBlock { block_size, drop_rate } => {
            if let Some(v) = f.dropblock_size {
                *block_size = v;
            }
            if let Some(v) = f.dropblock_rate {
                *drop_rate = v;
            }
        }
        Regularizer::None => {}
    }
    Ok(c)
}

fn run_training(
    ctx: &Ctx,
    name: &str,
    config: &TrainConfig,
    f: &TrainFlags,
    data: &Dataset,
    target: Option<(&Dataset, &Path)>,
) -> Result<()> {
    let mut progress = |e: &EpochLog| {
        ctx.progress(
            "epoch",
            format!(
                "epoch {:>3}  loss {:.5}  val dice {:.4}{}",
                e.epoch,
                e.mean_seg_loss,
                e.val_dice,
                e.mean_recon_loss.map(|r| format!("  recon {r:.5}")).unwrap_or_default()
            ),
            serde_json::to_value(e).unwrap_or_default(),
        )
    };
    let (_, log) = train_to_dir(config, data, target.map(|t| t.0), &f.out, Some(&mut progress))?;
    ctx.progress(
        "done",
        format!("best val dice {:.4} at epoch {}", log.best_val_dice, log.best_epoch),
        json!({ "best_val_dice": log.best_val_dice, "best_epoch": log.best_epoch }),
    );
    let mut inputs = vec![f.data.clone()];
    inputs.extend(target.map(|t| t.1.to_path_buf()));
    ctx.manifest(
        &f.out,
        name,
        config,
        f.seed,
        inputs,
        vec![f.out.join(crate::training::CHECKPOINT), f.out.join(TRAIN_LOG)],
    )
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let family = match (a.model, a.no_fusion) {
        (ModelFamily::Phiseg, true) => ModelFamily::PhisegNofusion,
        (m, true) if m != ModelFamily::PhisegNofusion => {
            return Err(Error::config(format!("--no-fusion applies to phiseg, not {m}")));
        }
        (m, _) => m,
    };
    let data = Dataset::load(&a.flags.data)?;
    let config = train_config(family, &a.flags, &data)?;
    run_training(ctx, "train", &config, &a.flags, &data, None)
}

fn cmd_uda(ctx: &Ctx, a: &UdaArgs) -> Result<()> {
    let data = Dataset::load(&a.flags.data)?;
    let target = Dataset::load(&a.target)?;
    let mut config = train_config(ModelFamily::PhisegUda, &a.flags, &data)?;
    config.recon_weight = a.recon_weight;
    run_training(ctx, "uda", &config, &a.flags, &data, Some((&target, &a.target)))
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let net = Network::load(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let cases: Vec<_> = data.test.iter().map(|s| s.eval_case()).collect();
    let opts = EvalOptions {
        samples: a.mc,
        seed: a.seed,
        post: PostProcess {
            threshold: a.threshold,
            median: a.median,
        },
        projection: a.project.then(|| data.manifest.spec.mask_projection()),
    };
    let report = evaluate(&net, &cases, &opts)?;
    formats::write_file(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let agg = &report.aggregate;
    ctx.progress(
        "eval",
        format!(
            "{}: dice {:.4} +- {:.4}  volume ratio {:.4} +- {:.4}  mc dice std {:.4}{}",
            net.family(),
            agg.dice.mean,
            agg.dice.std,
            agg.volume_ratio.mean,
            agg.volume_ratio.std,
            agg.mc_dice_std,
            agg.dice2d
                .map(|d| format!("  2d dice {:.4}", d.mean))
                .unwrap_or_default()
        ),
        serde_json::to_value(agg)?,
    );
    ctx.manifest(
        &sibling_dir(&a.out),
        "eval",
        &opts,
        a.seed,
        vec![a.model.clone(), a.data.clone()],
        vec![a.out.clone()],
    )
}

/// Parses `args` and runs the subcommand; returns the process exit code
/// (0 success, 1 runtime failure, 2 usage error).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let workers = cli.workers.unwrap_or_else(rayon::current_num_threads);
    if workers == 0 {
        return Err(Error::config("--workers must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let ctx = Ctx {
        json: cli.json,
        workers,
        started: Instant::now(),
    };
    pool.install(|| match &cli.command {
        Command::Phantom(a) => cmd_phantom(&ctx, a),
        Command::Render(a) => cmd_render(&ctx, a),
        Command::Dataset(a) => cmd_dataset(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Uda(a) => cmd_uda(&ctx, a),
    })
}
