use drrseg::models::*;
use drrseg_tensor::{Adam, AdamConfig, Graph, RngState, Tensor};

const N: usize = 16;

fn image(seed: u64) -> Tensor<f32> {
    let mut rng = RngState::new(seed);
    Tensor::from_fn(&[1, 1, N, N], |_| rng.uniform_in(-1.0, 1.0) as f32)
}

fn target(seed: u64) -> Tensor<f32> {
    let mut rng = RngState::new(seed);
    Tensor::from_fn(&[1, 1, N, N, N], |_| (rng.uniform() < 0.2) as u8 as f32)
}

fn net(family: ModelFamily, seed: u64) -> Network {
    Network::new(ModelConfig::new(family, N).unwrap(), seed).unwrap()
}

const ALL: [ModelFamily; 6] = [
    ModelFamily::UnetDet,
    ModelFamily::UnetDropout,
    ModelFamily::UnetDropblock,
    ModelFamily::Phiseg,
    ModelFamily::PhisegNofusion,
    ModelFamily::PhisegUda,
];

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn every_family_predicts_probability_volumes() {
    for family in ALL {
        let n = net(family, 1);
        let p = n.predict(&image(2)).unwrap();
        assert_eq!(p.shape(), [1, 1, N, N, N], "{family}");
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "{family}");
        let s = n.sample(&image(2), 3, &RngState::new(4)).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|t| t.shape() == [1, 1, N, N, N]));
    }
}

#[test]
fn wrong_input_shapes_are_rejected() {
    let n = net(ModelFamily::Phiseg, 1);
    let bad = Tensor::<f32>::zeros(&[1, 1, N, N + 1]);
    assert!(n.predict(&bad).is_err());
    let mut g = Graph::with_params(n.params());
    let wrong_depth = Tensor::<f32>::zeros(&[1, 1, N / 2, N, N]);
    assert!(n
        .seg_loss(&mut g, &image(1), &wrong_depth, &mut RngState::new(0), 1.0)
        .is_err());
    assert!(n.sample(&image(1), 0, &RngState::new(0)).is_err());
}

#[test]
fn initial_output_matches_the_foreground_prior() {
    // zero image: every conv sees only its bias, so the head bias decides
    let x = Tensor::<f32>::zeros(&[1, 1, N, N]);
    for family in [ModelFamily::UnetDet, ModelFamily::PhisegNofusion] {
        let p = net(family, 3).predict(&x).unwrap();
        let mean = p.data().iter().map(|&v| v as f64).sum::<f64>() / p.numel() as f64;
        assert!((mean - 0.1).abs() < 0.05, "{family}: {mean}");
    }
}

#[test]
fn construction_and_sampling_are_deterministic() {
    for family in ALL {
        let (a, b) = (net(family, 9), net(family, 9));
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(bits(ta), bits(tb), "{family} {na}");
        }
        let rng = RngState::new(5);
        let sa = a.sample(&image(1), 2, &rng).unwrap();
        let sb = b.sample(&image(1), 2, &rng).unwrap();
        assert_eq!(bits(&sa[1]), bits(&sb[1]), "{family}");
    }
    let (a, c) = (net(ModelFamily::Phiseg, 9), net(ModelFamily::Phiseg, 10));
    let pa = a.params().iter().next().unwrap().1;
    let pc = c.params().iter().next().unwrap().1;
    assert_ne!(bits(pa), bits(pc));
}

#[test]
fn stochasticity_follows_the_family() {
    let x = image(7);
    let rng = RngState::new(1);
    for family in ALL {
        let n = net(family, 2);
        let s = n.sample(&x, 2, &rng).unwrap();
        let differ = bits(&s[0]) != bits(&s[1]);
        assert_eq!(differ, family != ModelFamily::UnetDet, "{family}");
        assert_eq!(n.is_stochastic(), family != ModelFamily::UnetDet);
    }
    let mut config = ModelConfig::new(ModelFamily::UnetDropout, N).unwrap();
    config.regularizer = Regularizer::Dropout { p: 0.0 };
    let n = Network::new(config, 2).unwrap();
    let s = n.sample(&x, 3, &rng).unwrap();
    assert_eq!(bits(&s[0]), bits(&s[2]));
    assert_eq!(bits(&s[0]), bits(&n.predict(&x).unwrap()));
}

#[test]
fn fusion_starts_as_identity_on_the_likelihood() {
    let n = net(ModelFamily::Phiseg, 4);
    let mut rng = RngState::new(0);
    let s = Tensor::from_fn(&[1, 1, N, N, N], |_| rng.uniform_in(-3.0, 3.0) as f32);
    let out = n.fusion(&image(3), &s).unwrap();
    for (a, b) in out.data().iter().zip(s.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(net(ModelFamily::PhisegNofusion, 4).fusion(&image(3), &s).is_err());
}

#[test]
fn lifting_preserves_the_column_norm() {
    let mut rng = RngState::new(3);
    let z = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.uniform_in(-2.0, 2.0) as f32);
    for depth in [1usize, 4, 16] {
        let l = lift_latent(&z, depth, true).unwrap();
        assert_eq!(l.shape(), [2, 3, depth, 4, 4]);
        let d = l.data();
        for b in 0..2 * 3 {
            for p in 0..16 {
                let col: f64 = (0..depth).map(|k| (d[(b * depth + k) * 16 + p] as f64).powi(2)).sum();
                let zz = (z.data()[b * 16 + p] as f64).powi(2);
                assert!((col - zz).abs() < 1e-5 * (1.0 + zz), "depth {depth}");
            }
        }
        let raw = lift_latent(&z, depth, false).unwrap();
        assert_eq!(raw.data()[(depth - 1) * 16], z.data()[0]);
    }
}

#[test]
fn latent_stack_shapes_and_posterior_dependence() {
    let n = net(ModelFamily::Phiseg, 1);
    let prior = n.encode(&image(1), None, &mut RngState::new(0)).unwrap();
    assert_eq!(prior.len(), 3);
    for lv in &prior {
        let side = N >> lv.level;
        assert_eq!(lv.mu.shape(), [1, 4, side, side]);
        assert_eq!(lv.lifted.shape(), [1, 4, N >> lv.level, side, side]);
    }
    let p1 = n.encode(&image(1), Some(&target(1)), &mut RngState::new(0)).unwrap();
    let p2 = n.encode(&image(1), Some(&target(2)), &mut RngState::new(0)).unwrap();
    assert_ne!(bits(&p1[0].mu), bits(&p2[0].mu));
    assert_eq!(n.distill(&target(1)).unwrap().shape(), [1, 8, N, N]);
}

#[test]
fn zero_beta_is_plain_cross_entropy() {
    let n = net(ModelFamily::Phiseg, 2);
    let mut g = Graph::with_params(n.params());
    let (loss, terms) = n
        .seg_loss(&mut g, &image(1), &target(1), &mut RngState::new(0), 0.0)
        .unwrap();
    assert_eq!(terms.total, terms.bce);
    assert_eq!(g.value(loss).item() as f64, terms.bce);
    assert_eq!(terms.kl.len(), 3);
    assert!(terms.kl.iter().all(|&k| k >= 0.0));

    let mut g = Graph::with_params(n.params());
    let (_, weighted) = n
        .seg_loss(&mut g, &image(1), &target(1), &mut RngState::new(0), 2.0)
        .unwrap();
    let expect = weighted.bce + 2.0 * weighted.kl.iter().sum::<f64>() / (N * N * N) as f64;
    assert!((weighted.total - expect).abs() < 1e-9);
}

#[test]
fn every_parameter_receives_gradient() {
    let x = Tensor::stack_batch(&[image(1), image(2)]).unwrap();
    let y = Tensor::stack_batch(&[target(1), target(2)]).unwrap();
    for family in ALL {
        let mut n = net(family, 6);
        let mut adam = Adam::new(n.params(), AdamConfig::default());
        let mut grads = Vec::new();
        // a first step moves zero-initialised pass-through weights
        for _ in 0..2 {
            let mut g = Graph::with_params(n.params());
            let (mut loss, _) = n.seg_loss(&mut g, &x, &y, &mut RngState::new(1), 1.0).unwrap();
            if family == ModelFamily::PhisegUda {
                let r = n.recon_loss(&mut g, &x).unwrap();
                loss = g.add(loss, r).unwrap();
            }
            grads = g.backward(loss).unwrap().dense(n.params());
            adam.step(n.params_mut(), &grads).unwrap();
        }
        for ((name, _), gr) in n.params().iter().zip(&grads) {
            assert!(gr.iter().all(|v| v.is_finite()), "{family} {name}");
            assert!(gr.iter().any(|&v| v != 0.0), "{family}: {name} has zero gradient");
        }
    }
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for family in ALL {
        let n = net(family, 11);
        let path = dir.path().join(format!("{family}.ckpt"));
        n.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back.config(), n.config());
        assert_eq!(
            bits(&back.predict(&image(3)).unwrap()),
            bits(&n.predict(&image(3)).unwrap())
        );
    }
}

#[test]
fn adapted_checkpoint_loads_as_plain_phiseg() {
    let dir = tempfile::tempdir().unwrap();
    let uda = net(ModelFamily::PhisegUda, 12);
    let path = dir.path().join("uda.ckpt");
    uda.save(&path).unwrap();
    let plain = Network::load_as(&path, Some(ModelFamily::Phiseg)).unwrap();
    assert_eq!(plain.family(), ModelFamily::Phiseg);
    assert!(plain.params().iter().all(|(name, _)| !name.starts_with("recon.")));
    assert_eq!(plain.params().len() + 2, uda.params().len());
    assert_eq!(
        bits(&plain.predict(&image(1)).unwrap()),
        bits(&uda.predict(&image(1)).unwrap())
    );
    let rng = RngState::new(8);
    assert_eq!(
        bits(&plain.sample(&image(1), 2, &rng).unwrap()[1]),
        bits(&uda.sample(&image(1), 2, &rng).unwrap()[1])
    );
    assert!(Network::load_as(&path, Some(ModelFamily::UnetDet)).is_err());
    assert!(Network::load_as(&path, Some(ModelFamily::PhisegNofusion)).is_err());
}

#[test]
fn configs_are_validated() {
    assert!(ModelConfig::new(ModelFamily::Phiseg, 12).is_err());
    let mut c = ModelConfig::new(ModelFamily::Phiseg, N).unwrap();
    c.latent_levels = 4;
    assert!(Network::new(c.clone(), 0).is_err());
    c.latent_levels = 3;
    c.foreground_prior = 1.0;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::new(ModelFamily::UnetDet, N).unwrap();
    c.srm_strides = vec![2, 2, 2, 1, 1];
    assert!(c.validate().is_err());
    assert_eq!(default_srm_strides(32).unwrap(), vec![2, 2, 2, 2, 2]);
    assert_eq!(default_srm_strides(128).unwrap(), vec![2, 2, 2, 2, 8]);
    assert_eq!(default_srm_strides(4).unwrap(), vec![2, 2, 1, 1, 1]);
    for f in ALL {
        assert_eq!(f.name().parse::<ModelFamily>().unwrap(), f);
    }
}
