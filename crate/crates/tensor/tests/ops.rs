//! Forward semantics, sampling statistics and numerical robustness.

use drrseg_tensor::{Graph, RngState, Tensor};

fn ones(shape: &[usize]) -> Tensor<f64> {
    Tensor::full(shape, 1.0)
}

fn identity_kernel(k: usize) -> Tensor<f64> {
    let c = k / 2;
    Tensor::from_fn(&[1, 1, k, k, k], |i| (i == (c * k + c) * k + c) as u8 as f64)
}

#[test]
fn conv_trivial_examples() {
    let mut g = Graph::<f64>::new();
    let zero = g.input(Tensor::zeros(&[1, 2, 4, 4, 4]));
    let w = g.input(Tensor::from_fn(&[3, 2, 3, 3, 3], |i| (i as f64).sin()));
    let b = g.input(Tensor::zeros(&[3]));
    let y = g.conv3d(zero, w, Some(b), [1, 1, 1], [1, 1, 1]).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let v = g.input(Tensor::full(&[1, 1, 1, 1, 1], 2.5));
    let id = g.input(identity_kernel(3));
    let y = g.conv3d(v, id, None, [1, 1, 1], [1, 1, 1]).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);

    let x = g.input(Tensor::from_fn(&[1, 1, 3, 5, 4], |i| i as f64 - 7.0));
    let y = g
        .conv_transpose3d(x, id, None, [1, 1, 1], [1, 1, 1], [0, 0, 0])
        .unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let x2 = g.input(Tensor::from_fn(&[1, 1, 5, 4], |i| i as f64 * 0.5));
    let id2 = g.input(Tensor::from_fn(&[1, 1, 3, 3], |i| (i == 4) as u8 as f64));
    let y = g.conv2d(x2, id2, None, [1, 1], [1, 1]).unwrap();
    assert_eq!(g.value(y).data(), g.value(x2).data());
    let z2 = g.input(Tensor::zeros(&[1, 1, 5, 4]));
    let y = g.conv2d(z2, id2, None, [1, 1], [1, 1]).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

/// Five transposed layers with z-stride 2, kernel 4, padding 1 inflate a
/// depth-1 image to depth 32.
#[test]
fn transposed_chain_reaches_depth_32() {
    let mut g = Graph::<f32>::new();
    let mut h = g.input(Tensor::full(&[1, 1, 1, 8, 8], 1.0));
    for _ in 0..5 {
        let w = g.input(Tensor::full(&[1, 1, 4, 3, 3], 0.1));
        h = g.conv_transpose3d(h, w, None, [2, 1, 1], [1, 1, 1], [0, 0, 0]).unwrap();
    }
    assert_eq!(g.shape(h), &[1, 1, 32, 8, 8]);
}

/// The transposed conv equals a stride-1 conv over the zero-stuffed input
/// with the spatially flipped, channel-swapped kernel and padding `k-1-p`.
#[test]
fn conv_transpose_equals_zero_stuffed_conv() {
    let mut rng = RngState::new(21);
    for (stride, kernel, pad, out_pad) in [
        ([2, 1, 1], [4, 3, 3], [1, 1, 1], [0, 0, 0]),
        ([2, 2, 2], [2, 2, 2], [0, 0, 0], [1, 0, 1]),
        ([3, 2, 1], [3, 3, 2], [1, 0, 1], [2, 1, 0]),
    ] {
        let (cin, cout, input) = (3, 2, [3, 4, 5]);
        let x = Tensor::from_fn(&[1, cin, input[0], input[1], input[2]], |_| rng.uniform_in(-1.0, 1.0));
        let w = Tensor::from_fn(&[cin, cout, kernel[0], kernel[1], kernel[2]], |_| {
            rng.uniform_in(-1.0, 1.0)
        });
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv_transpose3d(xv, wv, None, stride, pad, out_pad).unwrap();
        let out = g.shape(y).to_vec();

        // zero-stuffed, padded input: lo = k-1-p, hi = k-1-p+output_padding
        let lo: [usize; 3] = std::array::from_fn(|a| kernel[a] - 1 - pad[a]);
        let sd: [usize; 3] = std::array::from_fn(|a| (input[a] - 1) * stride[a] + 1 + 2 * lo[a] + out_pad[a]);
        let mut stuffed = vec![0.0; cin * sd[0] * sd[1] * sd[2]];
        for c in 0..cin {
            for z in 0..input[0] {
                for yy in 0..input[1] {
                    for xx in 0..input[2] {
                        let (pz, py, px) = (lo[0] + z * stride[0], lo[1] + yy * stride[1], lo[2] + xx * stride[2]);
                        stuffed[((c * sd[0] + pz) * sd[1] + py) * sd[2] + px] =
                            x.data()[((c * input[0] + z) * input[1] + yy) * input[2] + xx];
                    }
                }
            }
        }
        let taps: usize = kernel.iter().product();
        let flipped = Tensor::from_fn(&[cout, cin, kernel[0], kernel[1], kernel[2]], |i| {
            let (co, ci, t) = (i / (cin * taps), (i / taps) % cin, i % taps);
            w.data()[(ci * cout + co) * taps + taps - 1 - t]
        });
        let sv = g.input(Tensor::from_vec(&[1, cin, sd[0], sd[1], sd[2]], stuffed).unwrap());
        let fv = g.input(flipped);
        let want = g.conv3d(sv, fv, None, [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(g.shape(want), out.as_slice());
        let err = g
            .value(y)
            .data()
            .iter()
            .zip(g.value(want).data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / b.abs().max(1e-3)));
        assert!(err <= 1e-6, "relative error {err}");
    }
}

#[test]
fn activations() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(&[5], vec![-1.0, 0.0, 2.0, -800.0, 800.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0, 0.0, 800.0]);
    let s = g.sigmoid(x);
    let sv = g.value(s).data();
    assert_eq!(sv[1], 0.5);
    assert!(sv.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
    assert!(sv[0] > 0.0 && sv[2] < 1.0);
}

#[test]
fn dropout_statistics_and_modes() {
    let n = 1_000_000;
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::full(&[1, 1, 100, 100, 100], 1.0));
    let mut rng = RngState::new(5);
    assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
    assert_eq!(g.dropout(x, 0.6, &mut rng, false).unwrap(), x);
    assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    assert!(g.dropout(x, -0.1, &mut rng, true).is_err());

    let y = g.dropout(x, 0.6, &mut RngState::new(9), true).unwrap();
    let y2 = g.dropout(x, 0.6, &mut RngState::new(9), true).unwrap();
    assert_eq!(g.value(y).data(), g.value(y2).data());
    let vals = g.value(y).data();
    let zeros = vals.iter().filter(|&&v| v == 0.0).count();
    assert!((zeros as f64 / n as f64 - 0.6).abs() < 0.01);
    let keep = 1.0 / 0.4f32;
    assert!(vals.iter().all(|&v| v == 0.0 || v == keep));
}

#[test]
fn dropblock_statistics_and_blocks() {
    let mut g = Graph::<f64>::new();
    let x = g.input(ones(&[4, 4, 40, 40, 40]));
    let mut rng = RngState::new(6);
    assert_eq!(g.dropblock3d(x, 2, 0.0, &mut rng, true).unwrap(), x);
    assert_eq!(g.dropblock3d(x, 2, 0.1, &mut rng, false).unwrap(), x);
    let y = g.dropblock3d(x, 2, 0.1, &mut rng, true).unwrap();
    let vals = g.value(y).data();
    let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
    assert!((kept - 0.9).abs() < 0.02, "kept fraction {kept}");
    // survivor rescaling preserves the activation sum exactly
    let sum: f64 = vals.iter().sum();
    assert!((sum - vals.len() as f64).abs() < 1e-6 * vals.len() as f64);

    // a tensor that fits exactly one block has a single seed site:
    // either nothing or the whole cube is dropped
    let cube = g.input(ones(&[1, 1, 3, 3, 3]));
    let mut dropped_once = false;
    for seed in 0..64 {
        let y = g.dropblock3d(cube, 3, 0.5, &mut RngState::new(seed), true).unwrap();
        let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros == 0 || zeros == 27);
        dropped_once |= zeros == 27;
    }
    assert!(dropped_once);
}

#[test]
fn bce_examples() {
    let mut g = Graph::<f64>::new();
    let one = Tensor::full(&[1, 1], 1.0);
    let z = g.input(Tensor::full(&[1, 1], 30.0));
    let l = g.bce_with_logits(z, &one).unwrap();
    assert!(g.value(l).item() < 1e-6);
    for t in [0.0, 1.0] {
        let z0 = g.input(Tensor::zeros(&[1, 1]));
        let l = g.bce_with_logits(z0, &Tensor::full(&[1, 1], t)).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }
    // |logit| up to 100 stays finite in single precision too
    let mut g32 = Graph::<f32>::new();
    let z = g32.leaf(Tensor::from_vec(&[4], vec![-100.0, 100.0, -100.0, 100.0]).unwrap());
    let t = Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let l = g32.bce_with_logits(z, &t).unwrap();
    assert!((g32.value(l).item() - 50.0).abs() < 1e-3);
    let grads = g32.backward(l).unwrap();
    assert!(grads.get(z).unwrap().iter().all(|v| v.is_finite()));

    // random case against the direct definition -y ln s - (1-y) ln(1-s)
    let mut rng = RngState::new(7);
    let zs = Tensor::from_fn(&[64], |_| rng.uniform_in(-8.0, 8.0));
    let ys = Tensor::from_fn(&[64], |_| (rng.uniform() < 0.5) as u8 as f64);
    let want: f64 = zs
        .data()
        .iter()
        .zip(ys.data())
        .map(|(&z, &y)| {
            let s = 1.0 / (1.0 + (-z).exp());
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / 64.0;
    let zv = g.input(zs);
    let l = g.bce_with_logits(zv, &ys).unwrap();
    assert!((g.value(l).item() - want).abs() < 1e-9);
}

#[test]
fn mse_examples() {
    let mut g = Graph::<f64>::new();
    let t = Tensor::from_fn(&[2, 3], |i| i as f64);
    let p = g.leaf(t.clone());
    let l = g.mse(p, &t).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let p1 = g.leaf(t.map(|v| v + 1.0));
    let l = g.mse(p1, &t).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(p1).unwrap().iter().all(|&v| (v - 2.0 / 6.0).abs() < 1e-15));
}

#[test]
fn kl_examples() {
    let mut g = Graph::<f64>::new();
    let mut rng = RngState::new(8);
    let mu = g.input(Tensor::from_fn(&[2, 3, 4], |_| rng.uniform_in(-2.0, 2.0)));
    let lv = g.input(Tensor::from_fn(&[2, 3, 4], |_| rng.uniform_in(-2.0, 2.0)));
    let k = g.kl_diag_gauss(mu, lv, mu, lv).unwrap();
    assert_eq!(g.value(k).item(), 0.0);

    // q = N(1, 1), p = N(0, 1): (mu^2 + sigma^2 - 1 - ln sigma^2) / 2 = 0.5
    let one = g.input(Tensor::full(&[1, 1], 1.0));
    let zero = g.input(Tensor::zeros(&[1, 1]));
    let k = g.kl_diag_gauss(one, zero, zero, zero).unwrap();
    assert!((g.value(k).item() - 0.5).abs() < 1e-15);

    for _ in 0..50 {
        let vs: Vec<_> = (0..4)
            .map(|_| g.input(Tensor::from_fn(&[3, 5], |_| rng.uniform_in(-5.0, 5.0))))
            .collect();
        let k = g.kl_diag_gauss(vs[0], vs[1], vs[2], vs[3]).unwrap();
        assert!(g.value(k).item() >= 0.0);
    }
}

#[test]
fn reparam_examples() {
    let n = 100_000;
    let mut g = Graph::<f64>::new();
    let mu = g.leaf(Tensor::full(&[n], 1.5));
    let lv_low = g.leaf(Tensor::full(&[n], -80.0));
    let y = g.reparam_sample(mu, lv_low, &mut RngState::new(1)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| (v - 1.5).abs() < 1e-8));

    let lv = g.leaf(Tensor::full(&[n], 2.0f64.ln() * 2.0)); // sigma = 2
    let a = g.reparam_sample(mu, lv, &mut RngState::new(2)).unwrap();
    let b = g.reparam_sample(mu, lv, &mut RngState::new(2)).unwrap();
    assert_eq!(g.value(a).data(), g.value(b).data());
    let mean = g.value(a).data().iter().sum::<f64>() / n as f64;
    assert!((mean - 1.5).abs() < 3.0 * 2.0 / (n as f64).sqrt());

    let s = g.sum_all(a);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(mu).unwrap().iter().all(|&v| v == 1.0));
    assert!(grads.get(lv).unwrap().iter().any(|&v| v != 0.0));
}

/// Every op on finite inputs with |x| <= 1e3 stays finite, forward and
/// backward, in single precision.
#[test]
fn no_nan_or_inf_on_large_inputs() {
    let mut rng = RngState::new(12);
    let x = Tensor::<f32>::from_fn(&[2, 2, 4, 4, 4], |_| rng.uniform_in(-1e3, 1e3) as f32);
    let w = Tensor::<f32>::from_fn(&[2, 2, 3, 3, 3], |_| rng.uniform_in(-1.0, 1.0) as f32);
    let wt = Tensor::<f32>::from_fn(&[2, 2, 2, 2, 2], |_| rng.uniform_in(-1.0, 1.0) as f32);
    let target = Tensor::<f32>::from_fn(&[2, 2, 4, 4, 4], |i| (i % 2) as f32);
    let mut g = Graph::<f32>::new();
    let (xv, wv, wtv) = (g.leaf(x), g.leaf(w), g.leaf(wt));
    let c = g.conv3d(xv, wv, None, [1, 1, 1], [1, 1, 1]).unwrap();
    let r = g.relu(c);
    let s = g.sigmoid(c);
    let p = g.max_pool3d(r, [2, 2, 2]).unwrap();
    let u = g
        .conv_transpose3d(p, wtv, None, [2, 2, 2], [0, 0, 0], [0, 0, 0])
        .unwrap();
    let d = g.dropout(u, 0.6, &mut rng, true).unwrap();
    let db = g.dropblock3d(d, 2, 0.1, &mut rng, true).unwrap();
    let sum = g.add(db, s).unwrap();
    let bce = g.bce_with_logits(sum, &target).unwrap();
    let mse = g.mse(xv, &target).unwrap();
    let kl = g.kl_diag_gauss(xv, xv, c, c).unwrap();
    let z = g.reparam_sample(xv, xv, &mut rng).unwrap();
    let zs = g.sum_all(z);
    let a = g.add(bce, mse).unwrap();
    let a = g.add(a, kl).unwrap();
    let total = g.add(a, zs).unwrap();
    for v in [c, r, s, p, u, d, db, sum, bce, mse, kl, z, total] {
        assert!(g.value(v).is_finite(), "non-finite forward value");
    }
    let grads = g.backward(total).unwrap();
    for v in [xv, wv, wtv] {
        assert!(grads.get(v).unwrap().iter().all(|x| x.is_finite()));
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = RngState::new(3);
        let x = Tensor::<f32>::from_fn(&[4, 3, 8, 8, 8], |_| rng.uniform_in(-1.0, 1.0) as f32);
        let w = Tensor::<f32>::from_fn(&[5, 3, 3, 3, 3], |_| rng.uniform_in(-1.0, 1.0) as f32);
        let mut g = Graph::<f32>::new();
        let (xv, wv) = (g.leaf(x), g.leaf(w));
        let y = g.conv3d(xv, wv, None, [1, 1, 1], [1, 1, 1]).unwrap();
        let y = g.dropout(y, 0.5, &mut rng, true).unwrap();
        let l = g.sum_all(y);
        let grads = g.backward(l).unwrap();
        (grads.get(xv).unwrap().to_vec(), grads.get(wv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn conv_gradients_independent_of_worker_count() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut rng = RngState::new(4);
            let x = Tensor::<f32>::from_fn(&[5, 3, 6, 6, 6], |_| rng.uniform_in(-1.0, 1.0) as f32);
            let w = Tensor::<f32>::from_fn(&[3, 4, 2, 2, 2], |_| rng.uniform_in(-1.0, 1.0) as f32);
            let mut g = Graph::<f32>::new();
            let (xv, wv) = (g.leaf(x), g.leaf(w));
            let y = g
                .conv_transpose3d(xv, wv, None, [2, 2, 2], [0, 0, 0], [0, 0, 0])
                .unwrap();
            let l = g.sum_all(y);
            let grads = g.backward(l).unwrap();
            (g.value(y).data().to_vec(), grads.get(wv).unwrap().to_vec())
        })
    };
    assert_eq!(run(1), run(3));
}
