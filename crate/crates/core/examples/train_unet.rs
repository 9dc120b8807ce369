//! Trains the MC-dropout U-Net on a freshly built lung dataset and prints
//! the per-epoch log.
//!
//! `cargo run --release --example train_unet -- [size] [epochs]`

use std::time::Instant;

use drrseg::models::ModelFamily;
use drrseg::training::{build_dataset, train, Dataset, DatasetSpec, EpochLog, TrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> drrseg::Result<()> {
    let (size, epochs) = (arg(1, 16), arg(2, 20));
    let dir = std::env::temp_dir().join(format!("drrseg-example-unet-{}", std::process::id()));
    let mut spec = DatasetSpec::lungs(size, 0)?;
    spec.n_train = 20;
    spec.n_test = 4;
    build_dataset(&spec, &dir)?;
    let data = Dataset::load(&dir)?;

    let mut config = TrainConfig::new(ModelFamily::UnetDropout, size, 1)?;
    config.epochs = epochs;
    let start = Instant::now();
    let mut report = |e: &EpochLog| {
        println!(
            "epoch {:>3}  loss {:.4}  val dice {:.3}  ({:.0} s)",
            e.epoch,
            e.mean_seg_loss,
            e.val_dice,
            start.elapsed().as_secs_f64()
        )
    };
    let (net, log) = train(&config, &data, None, Some(&mut report))?;
    println!(
        "best val dice {:.3} at epoch {}; {} parameters",
        log.best_val_dice,
        log.best_epoch,
        net.params().num_scalars()
    );
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
