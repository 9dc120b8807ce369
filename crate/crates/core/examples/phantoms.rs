//! Generates a thorax and a ribcage phantom and prints what they contain.
//!
//! `cargo run --release --example phantoms -- [out_dir]`

use drrseg::formats::{write_mask, write_volume};
use drrseg::phantom::PhantomSpec;

fn main() -> drrseg::Result<()> {
    let out: std::path::PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("drrseg-example-phantoms"));
    for spec in [PhantomSpec::thorax(64), PhantomSpec::ribcage(64)] {
        let (volume, mask) = spec.generate(7)?;
        let (lo, hi) = volume
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        println!(
            "{}: dims {:?}, HU range [{lo:.0}, {hi:.0}], target fraction {:.3}",
            spec.kind,
            volume.dims(),
            mask.count() as f64 / mask.len() as f64
        );
        write_volume(&out.join(format!("{}.vol.volb", spec.kind)), &volume)?;
        write_mask(&out.join(format!("{}.mask.volb", spec.kind)), &mask)?;
    }
    println!("written to {}", out.display());
    Ok(())
}
