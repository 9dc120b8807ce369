//! Monte-Carlo evaluation: per-case Dice and volume-ratio bounds over
//! repeated stochastic predictions, for a dropout U-Net and PhiSeg.
//!
//! `cargo run --release --example uncertainty -- [epochs] [samples]`

use drrseg::eval::{evaluate, EvalOptions, PostProcess};
use drrseg::models::ModelFamily;
use drrseg::training::{build_dataset, train, Dataset, DatasetSpec, TrainConfig};

fn main() -> drrseg::Result<()> {
    let arg = |i: usize, d: usize| std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (epochs, samples) = (arg(1, 15), arg(2, 20));
    let dir = std::env::temp_dir().join(format!("drrseg-example-mc-{}", std::process::id()));
    let mut spec = DatasetSpec::lungs(16, 0)?;
    spec.n_train = 20;
    spec.n_test = 4;
    build_dataset(&spec, &dir)?;
    let data = Dataset::load(&dir)?;
    let cases: Vec<_> = data.test.iter().map(|s| s.eval_case()).collect();

    for family in [ModelFamily::UnetDropout, ModelFamily::Phiseg] {
        let mut config = TrainConfig::new(family, 16, 1)?;
        config.epochs = epochs;
        let (net, _) = train(&config, &data, None, None)?;
        let opts = EvalOptions {
            samples,
            seed: 0,
            post: PostProcess::default(),
            projection: Some(data.manifest.spec.mask_projection()),
        };
        let report = evaluate(&net, &cases, &opts)?;
        println!("{family}:");
        for c in &report.cases {
            let d = &c.mc.dice;
            println!(
                "  {}  dice {:.3} (samples {:.3} .. {:.3}, std {:.4})  volume ratio {:.2}",
                c.id, c.dice, d.min, d.max, d.std, c.volume_ratio
            );
        }
        println!("  {}", serde_json::to_string(&report.aggregate)?);
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
