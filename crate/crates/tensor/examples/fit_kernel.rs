//! Recovers an unknown 3x3 convolution kernel from input/output pairs with
//! reverse-mode gradients and Adam.
//!
//! `cargo run --release -p drrseg-tensor --example fit_kernel`

use drrseg_tensor::{Adam, AdamConfig, Graph, ParamStore, Result, RngState, Tensor};

fn main() -> Result<()> {
    let mut rng = RngState::new(0);
    let truth = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0, 0.2, 0.0, 0.2, 0.2, 0.2, 0.0, 0.2, 0.0f32])?;
    let x = Tensor::from_fn(&[8, 1, 12, 12], |_| rng.uniform_in(-1.0, 1.0) as f32);
    let y = {
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(truth.clone()));
        let yv = g.conv2d(xv, wv, None, [1, 1], [1, 1])?;
        g.value(yv).clone()
    };

    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[1, 1, 3, 3]));
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: 0.02,
            ..AdamConfig::default()
        },
    );
    for step in 0..=300 {
        let mut g = Graph::with_params(&store);
        let (xv, wv) = (g.input(x.clone()), g.param(w));
        let pred = g.conv2d(xv, wv, None, [1, 1], [1, 1])?;
        let loss = g.mse(pred, &y)?;
        if step % 50 == 0 {
            println!("step {step:>3}  mse {:.2e}", g.value(loss).item());
        }
        let grads = g.backward(loss)?.dense(&store);
        adam.step(&mut store, &grads)?;
    }
    println!("learned {:.3?}", store.get(w).data());
    Ok(())
}
