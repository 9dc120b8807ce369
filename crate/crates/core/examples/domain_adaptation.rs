//! Trains PhiSeg on clean renders, then again with an unsupervised image
//! reconstruction loss on shifted renders, and compares both on the shifted
//! test set using projected 2D masks.
//!
//! `cargo run --release --example domain_adaptation -- [epochs]`

use drrseg::eval::{evaluate, EvalOptions, PostProcess};
use drrseg::models::ModelFamily;
use drrseg::training::{build_dataset, train, Dataset, DatasetSpec, TrainConfig};

fn main() -> drrseg::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let root = std::env::temp_dir().join(format!("drrseg-example-uda-{}", std::process::id()));
    let mut source = DatasetSpec::lungs(16, 0)?;
    let mut target = DatasetSpec::shifted_lungs(16, 1)?;
    for s in [&mut source, &mut target] {
        s.n_train = 20;
        s.n_test = 4;
    }
    build_dataset(&source, &root.join("source"))?;
    build_dataset(&target, &root.join("target"))?;
    let source = Dataset::load(&root.join("source"))?;
    let target = Dataset::load(&root.join("target"))?;
    let cases: Vec<_> = target.test.iter().map(|s| s.eval_case()).collect();
    let opts = EvalOptions {
        samples: 10,
        seed: 0,
        post: PostProcess::default(),
        projection: Some(target.manifest.spec.mask_projection()),
    };

    for family in [ModelFamily::Phiseg, ModelFamily::PhisegUda] {
        let mut config = TrainConfig::new(family, 16, 1)?;
        config.epochs = epochs;
        let (net, log) = train(&config, &source, Some(&target), None)?;
        let report = evaluate(&net, &cases, &opts)?;
        let recon = log.epochs.last().and_then(|e| e.mean_recon_loss);
        println!(
            "{family:<14} shifted test: 3D dice {:.3}, projected 2D dice {:.3}; last recon loss {recon:?}",
            report.aggregate.dice.mean,
            report.aggregate.dice2d.map_or(f64::NAN, |d| d.mean),
        );
    }
    std::fs::remove_dir_all(&root).ok();
    Ok(())
}
