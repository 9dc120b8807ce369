//! Builds a small lung dataset on disk and loads it back.
//!
//! `cargo run --release --example build_dataset -- [out_dir]`

use drrseg::training::{build_dataset, Dataset, DatasetSpec};

fn main() -> drrseg::Result<()> {
    let out: std::path::PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("drrseg-example-dataset"));
    let mut spec = DatasetSpec::lungs(32, 0)?;
    spec.n_train = 8;
    spec.n_test = 2;
    let manifest = build_dataset(&spec, &out)?;
    for item in manifest.items.iter().take(3) {
        println!("{} ({:?}, seed {}): {}", item.id, item.split, item.seed, item.input);
    }
    let data = Dataset::load(&out)?;
    let fg: f64 = data
        .train
        .iter()
        .map(|s| s.mask.count() as f64 / s.mask.len() as f64)
        .sum::<f64>()
        / data.train.len() as f64;
    println!(
        "{} train / {} test items, {}^3 targets, mean foreground fraction {fg:.3}",
        data.train.len(),
        data.test.len(),
        data.extent()
    );
    Ok(())
}
