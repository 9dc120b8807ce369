//! Saves networks to checkpoint files and loads them back, including
//! loading an adapted PhiSeg checkpoint as a plain PhiSeg.
//!
//! `cargo run --release --example checkpoints`

use drrseg::formats::decode_ckpt;
use drrseg::models::{ModelConfig, ModelFamily, Network};
use drrseg_tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("drrseg-example-ckpt-{}", std::process::id()));
    let x = Tensor::from_fn(&[1, 1, 16, 16], |i| (i as f32 * 0.1).sin());

    let uda = Network::new(ModelConfig::new(ModelFamily::PhisegUda, 16)?, 3)?;
    let path = dir.join("uda.ckpt");
    uda.save(&path)?;
    let entries = decode_ckpt(&std::fs::read(&path)?)?;
    println!("{} entries, first: {:.60}...", entries.len(), entries[0].name);
    for e in entries.iter().skip(1).take(4) {
        println!("  {} {:?}", e.name, e.dims);
    }

    let plain = Network::load_as(&path, Some(ModelFamily::Phiseg))?;
    let same = plain.predict(&x)?.data() == uda.predict(&x)?.data();
    println!(
        "loaded as {}: {} -> {} parameters, identical predictions: {same}",
        plain.family(),
        uda.params().num_scalars(),
        plain.params().num_scalars()
    );
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
