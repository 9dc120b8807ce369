use std::path::Path;

use drrseg::models::{ModelFamily, Network};
use drrseg::training::*;
use drrseg_tensor::RngState;

fn small(seed: u64, n_train: usize, n_test: usize) -> DatasetSpec {
    let mut spec = DatasetSpec::lungs(16, seed).unwrap();
    spec.n_train = n_train;
    spec.n_test = n_test;
    spec
}

fn build(spec: &DatasetSpec, dir: &Path) -> Dataset {
    build_dataset(spec, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    std::fs::read_dir(dir)
        .unwrap()
        .flat_map(|e| {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p)
            } else {
                vec![p]
            }
        })
        .collect()
}

#[test]
fn datasets_rebuild_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small(3, 3, 2);
    let m = build_dataset(&spec, &tmp.path().join("a")).unwrap();
    build_dataset(&spec, &tmp.path().join("b")).unwrap();
    assert_eq!(files(&tmp.path().join("a")), files(&tmp.path().join("b")));

    assert_eq!(m.items.len(), 5);
    assert_eq!(m.items.iter().filter(|i| i.split == Split::Train).count(), 3);
    assert_eq!(m.items[3].id, "test-000");
    // four files per item plus the manifest
    assert_eq!(walk(&tmp.path().join("a")).len(), 5 * 4 + 1);

    let data = Dataset::load(&tmp.path().join("a")).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (3, 2));
    assert_eq!(data.extent(), 16);
    assert_eq!(data.train[0].x.shape(), [1, 1, 16, 16]);
    assert_eq!(data.train[0].y.shape(), [1, 1, 16, 16, 16]);
    assert!(data.train[0].mask.count() > 0);

    let other = build_dataset(&small(4, 3, 2), &tmp.path().join("c")).unwrap();
    assert_ne!(other.items[0].seed, m.items[0].seed);
}

#[test]
fn shifted_items_differ_from_clean_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = build(&small(5, 2, 0), &tmp.path().join("clean"));
    let mut spec = DatasetSpec::shifted_lungs(16, 5).unwrap();
    spec.n_train = 2;
    spec.n_test = 0;
    let shifted = build(&spec, &tmp.path().join("shifted"));
    // same anatomy, different appearance
    assert_eq!(clean.train[0].mask, shifted.train[0].mask);
    assert_ne!(clean.train[0].x.data(), shifted.train[0].x.data());
}

#[test]
fn bad_specs_are_rejected_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = small(1, 0, 0);
    assert!(build_dataset(&spec, tmp.path()).is_err());
    spec.n_train = 1;
    spec.input = 32;
    assert!(build_dataset(&spec, tmp.path()).is_err());
    assert!(std::fs::read_dir(tmp.path()).unwrap().next().is_none());
}

fn quick(family: ModelFamily, max_steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(family, 16, 7).unwrap();
    c.batch = 2;
    c.epochs = 50;
    c.max_steps = Some(max_steps);
    c
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build(&small(2, 4, 1), tmp.path());
    let config = quick(ModelFamily::Phiseg, 4);
    let (na, la) = train(&config, &data, None, None).unwrap();
    let (nb, lb) = train(&config, &data, None, None).unwrap();
    assert_eq!(serde_json::to_string(&la).unwrap(), serde_json::to_string(&lb).unwrap());
    for ((_, a), (_, b)) in na.params().iter().zip(nb.params().iter()) {
        assert_eq!(a.data(), b.data());
    }
    assert_eq!(la.steps.len(), 4);
    assert_eq!(la.epochs.len(), 2);
    assert!(la.steps.iter().all(|s| s.terms.total.is_finite()));
    // beta ramps over the first ceil(0.1 * 4) = 1 step
    assert_eq!(la.steps[0].terms.beta, 1.0);
}

#[test]
fn a_small_set_is_overfit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build(&small(9, 2, 1), tmp.path());
    let mut config = quick(ModelFamily::UnetDet, 50);
    config.patience = 100;
    let mut epochs = 0;
    let mut on_epoch = |_: &EpochLog| epochs += 1;
    let (_, log) = train(&config, &data, None, Some(&mut on_epoch)).unwrap();
    assert_eq!(log.steps.len(), 50);
    assert_eq!(epochs, log.epochs.len());
    let first = log.steps[0].terms.bce;
    let last = log.steps.last().unwrap().terms.bce;
    assert!(last < 0.1, "bce {first} -> {last}");
}

#[test]
fn zero_reconstruction_weight_is_plain_phiseg() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build(&small(2, 4, 1), &tmp.path().join("src"));
    let mut tspec = DatasetSpec::shifted_lungs(16, 8).unwrap();
    tspec.n_train = 2;
    tspec.n_test = 0;
    let target = build(&tspec, &tmp.path().join("tgt"));

    let plain = quick(ModelFamily::Phiseg, 3);
    let mut uda = quick(ModelFamily::PhisegUda, 3);
    uda.recon_weight = 0.0;
    let (np, lp) = train(&plain, &data, None, None).unwrap();
    let (nu, lu) = train(&uda, &data, Some(&target), None).unwrap();
    assert_eq!(lu.target_dataset, None);
    assert!(lu.steps.iter().all(|s| s.recon.is_none()));
    for (a, b) in lp.steps.iter().zip(&lu.steps) {
        assert_eq!(a.terms, b.terms);
    }
    let x = &data.test[0].x;
    assert_eq!(np.predict(x).unwrap().data(), nu.predict(x).unwrap().data());

    uda.recon_weight = 0.01;
    let (_, lw) = train(&uda, &data, Some(&target), None).unwrap();
    assert!(lw.steps.iter().all(|s| s.recon.is_some_and(f64::is_finite)));
    assert!(lw.rng_streams.iter().any(|s| s == "target"));
}

#[test]
fn training_writes_a_loadable_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build(&small(2, 2, 1), &tmp.path().join("data"));
    let out = tmp.path().join("run");
    let config = quick(ModelFamily::UnetDropout, 2);
    let (net, _) = train_to_dir(&config, &data, None, &out, None).unwrap();
    let back = Network::load(&out.join(CHECKPOINT)).unwrap();
    let rng = RngState::new(1);
    let x = &data.test[0].x;
    assert_eq!(
        net.sample(x, 2, &rng).unwrap()[1].data(),
        back.sample(x, 2, &rng).unwrap()[1].data()
    );
    let log: TrainLog = serde_json::from_slice(&std::fs::read(out.join(TRAIN_LOG)).unwrap()).unwrap();
    assert_eq!(log.config, config);
    assert_eq!(log.params, net.params().num_scalars());
}

#[test]
fn mismatched_configs_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let data = build(&small(2, 1, 1), tmp.path());
    let wrong = TrainConfig::new(ModelFamily::UnetDet, 32, 0).unwrap();
    assert!(train(&wrong, &data, None, None).is_err());
    let mut bad = quick(ModelFamily::UnetDet, 1);
    bad.lr = 0.0;
    assert!(train(&bad, &data, None, None).is_err());
}
