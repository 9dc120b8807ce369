//! Applies the intensity shift and slab artefact used for the adaptation
//! experiment and shows how the rendered input changes.
//!
//! `cargo run --release --example domain_shift`

use drrseg::drr::{render_input, ProjectionGeometry, PIXEL_MM, THORAX_SOURCE_MM};
use drrseg::phantom::{apply_domain_shift, DomainShiftSpec, PhantomSpec};

fn main() -> drrseg::Result<()> {
    let spec = PhantomSpec::thorax(32);
    let (clean, mask) = spec.generate(3)?;
    let shift = DomainShiftSpec::exp3_default(spec.dims);
    let shifted = apply_domain_shift(&clean, &shift, 3)?;
    println!("shift: {shift:?}");

    let geom = ProjectionGeometry::cone_aligned(THORAX_SOURCE_MM, 128, PIXEL_MM, 32.0)?;
    let (_, a) = render_input(&clean, &geom, 32)?;
    let (_, b) = render_input(&shifted, &geom, 32)?;
    let diff: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect();
    let mean = diff.iter().sum::<f32>() / diff.len() as f32;
    let max = diff.iter().copied().fold(0.0, f32::max);
    println!("normalised input differs by {mean:.3} on average, {max:.3} at most");
    println!("the lung mask is untouched: {} voxels", mask.count());
    Ok(())
}
