//! Renders cone-beam and parallel DRRs of one phantom and writes 16-bit PGM
//! previews next to the raw images.
//!
//! `cargo run --release --example render_drr -- [out_dir]`

use std::path::Path;

use drrseg::drr::{render_input, siddon_raytrace, Image, ProjectionGeometry, PIXEL_MM, THORAX_SOURCE_MM};
use drrseg::formats::{write_image, write_pgm};
use drrseg::phantom::PhantomSpec;

fn save(dir: &Path, name: &str, img: &Image) -> drrseg::Result<()> {
    write_image(&dir.join(format!("{name}.imgf")), img)?;
    write_pgm(&dir.join(format!("{name}.pgm")), img.rows(), img.cols(), img.data())?;
    let lo = img.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    println!(
        "{name}: {}x{} px at {} mm, values [{lo:.2}, {hi:.2}]",
        img.rows(),
        img.cols(),
        img.pixel_mm()
    );
    Ok(())
}

fn main() -> drrseg::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("drrseg-example-drr"));
    let (volume, _) = PhantomSpec::thorax(64).generate(1)?;

    // detector sized so the volume just fills the image
    let cone = ProjectionGeometry::cone_aligned(THORAX_SOURCE_MM, 256, PIXEL_MM, 64.0)?;
    let (full, input) = render_input(&volume, &cone, 64)?;
    save(&dir, "cone", &full)?;
    save(&dir, "cone-input", &input)?;

    let parallel = ProjectionGeometry::parallel(64, 1.0);
    save(&dir, "parallel", &siddon_raytrace(&volume, &parallel)?)?;
    println!("written to {}", dir.display());
    Ok(())
}
