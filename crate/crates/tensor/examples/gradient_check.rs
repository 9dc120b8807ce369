//! Compares analytic gradients of a small 3D network against central
//! finite differences in double precision.
//!
//! `cargo run --release -p drrseg-tensor --example gradient_check`

use drrseg_tensor::{grad_check, RngState, Tensor};

fn main() -> drrseg_tensor::Result<()> {
    let mut rng = RngState::new(1);
    let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0));
    let inputs = [
        draw(&[2, 1, 4, 6, 6]),
        draw(&[3, 1, 3, 3, 3]),
        draw(&[3]),
        draw(&[3, 1, 2, 2, 2]),
    ];
    let target = Tensor::from_fn(&[2, 1, 4, 6, 6], |i| (i % 3 == 0) as u8 as f64);

    let report = grad_check(
        &inputs,
        |g, v| {
            let h = g.conv3d(v[0], v[1], Some(v[2]), [1, 1, 1], [1, 1, 1])?;
            let h = g.sigmoid(h);
            let h = g.max_pool3d(h, [2, 2, 2])?;
            let out = g.conv_transpose3d(h, v[3], None, [2, 2, 2], [0; 3], [0; 3])?;
            g.bce_with_logits(out, &target)
        },
        1e-6,
    )?;
    println!(
        "worst relative error {:.2e} (input {}, element {}): analytic {:.6e}, numeric {:.6e}",
        report.max_rel_error, report.worst.0, report.worst.1, report.analytic_at_worst, report.numeric_at_worst
    );
    println!(
        "{}",
        if report.passed() {
            "gradients agree"
        } else {
            "gradients disagree"
        }
    );
    Ok(())
}
