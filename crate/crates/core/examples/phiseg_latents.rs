//! Trains PhiSeg briefly, then looks inside: prior and posterior latents per
//! level, their KL, and how much the decoded samples disagree.
//!
//! `cargo run --release --example phiseg_latents -- [epochs]`

use drrseg::models::ModelFamily;
use drrseg::training::{build_dataset, train, Dataset, DatasetSpec, TrainConfig};
use drrseg_tensor::{RngState, Tensor};

fn kl(q: (&Tensor<f32>, &Tensor<f32>), p: (&Tensor<f32>, &Tensor<f32>)) -> f64 {
    let it = q.0.data().iter().zip(q.1.data()).zip(p.0.data().iter().zip(p.1.data()));
    it.map(|((&mq, &lq), (&mp, &lp))| {
        let (mq, lq, mp, lp) = (mq as f64, lq as f64, mp as f64, lp as f64);
        0.5 * (lp - lq + (lq.exp() + (mq - mp).powi(2)) / lp.exp() - 1.0)
    })
    .sum()
}

fn main() -> drrseg::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let dir = std::env::temp_dir().join(format!("drrseg-example-phiseg-{}", std::process::id()));
    let mut spec = DatasetSpec::lungs(16, 0)?;
    spec.n_train = 20;
    spec.n_test = 2;
    build_dataset(&spec, &dir)?;
    let data = Dataset::load(&dir)?;

    let mut config = TrainConfig::new(ModelFamily::Phiseg, 16, 1)?;
    config.epochs = epochs;
    let (net, log) = train(&config, &data, None, None)?;
    println!("best val dice {:.3}", log.best_val_dice);

    let case = &data.test[0];
    let prior = net.encode(&case.x, None, &mut RngState::new(0))?;
    let post = net.encode(&case.x, Some(&case.y), &mut RngState::new(0))?;
    for (p, q) in prior.iter().zip(&post) {
        println!(
            "level {}: latent {:?} lifted {:?}, KL(post || prior) = {:.2} nats",
            p.level,
            p.mu.shape(),
            p.lifted.shape(),
            kl((&q.mu, &q.logvar), (&p.mu, &p.logvar))
        );
    }

    let samples = net.sample(&case.x, 8, &RngState::new(1))?;
    let fg: Vec<usize> = samples
        .iter()
        .map(|s| s.data().iter().filter(|&&v| v > 0.5).count())
        .collect();
    println!(
        "foreground voxels per sample {fg:?}, ground truth {}",
        case.mask.count()
    );
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
