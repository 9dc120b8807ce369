use std::collections::VecDeque;

use drrseg::phantom::{apply_domain_shift, DomainShiftSpec, Occluder, PhantomSpec};
use drrseg::volume::{center_crop, threshold_mask, MaskVolume, VoxelVolume};

/// 26-connected component sizes of a binary mask.
fn components(mask: &MaskVolume) -> Vec<usize> {
    let [d, h, w] = mask.dims();
    let mut seen = vec![false; mask.len()];
    let mut sizes = Vec::new();
    for start in 0..mask.len() {
        if mask.data()[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = ((i / (h * w)) as isize, ((i / w) % h) as isize, (i % w) as isize);
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let j = (nz as usize * h + ny as usize) * w + nx as usize;
                        if mask.data()[j] != 0 && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    sizes
}

fn bits(v: &VoxelVolume) -> Vec<u32> {
    v.data().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn generators_are_deterministic_per_seed() {
    for spec in [PhantomSpec::thorax(32), PhantomSpec::ribcage(32)] {
        let (a, ma) = spec.generate(11).unwrap();
        let (b, mb) = spec.generate(11).unwrap();
        let (c, _) = spec.generate(12).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(ma, mb);
        assert_ne!(bits(&a), bits(&c));
    }
}

#[test]
fn thorax_lungs_are_dark_and_within_fraction_range() {
    let spec = PhantomSpec::thorax(32);
    for seed in 0..50 {
        let (v, m) = spec.generate(seed).unwrap();
        for (&hu, &inside) in v.data().iter().zip(m.data()) {
            if inside != 0 {
                assert!(hu < -400.0, "seed {seed}: lung voxel at {hu} HU");
            }
            assert!((-1024.0..=3000.0).contains(&hu));
        }
        let body = v.data().iter().filter(|&&h| h > -950.0).count() + m.count();
        let frac = m.count() as f64 / body as f64;
        assert!(
            (spec.lung_fraction.0..=spec.lung_fraction.1).contains(&frac),
            "seed {seed}: lung fraction {frac}"
        );
    }
}

#[test]
fn each_lung_is_one_26_connected_component() {
    let spec = PhantomSpec::thorax(32);
    for seed in 0..20 {
        let (_, m) = spec.generate(seed).unwrap();
        let sizes = components(&m);
        assert_eq!(sizes.len(), 2, "seed {seed}: components {sizes:?}");
    }
}

#[test]
fn ribcage_mask_is_bone_threshold_and_sparse() {
    let spec = PhantomSpec::ribcage(32);
    for seed in 0..50 {
        let (v, m) = spec.generate(seed).unwrap();
        for (&hu, &inside) in v.data().iter().zip(m.data()) {
            if inside != 0 {
                assert!((1800.0..=1900.0).contains(&hu), "seed {seed}: rib voxel at {hu} HU");
            }
        }
        assert_eq!(m, threshold_mask(&v, 1800.0, 1900.0));
        let frac = m.count() as f64 / m.len() as f64;
        assert!(frac > 0.0 && frac < 0.05, "seed {seed}: rib fraction {frac}");
    }
}

#[test]
fn ribcage_has_paired_ribs() {
    let spec = PhantomSpec::ribcage(32);
    for seed in 0..20 {
        let (_, m) = spec.generate(seed).unwrap();
        let n = components(&m).len();
        assert!((8..=12).contains(&n), "seed {seed}: {n} ribs");
    }
}

#[test]
fn phantom_rejects_small_dims() {
    assert!(PhantomSpec::thorax(8).generate(0).is_err());
    let mut spec = PhantomSpec::thorax(32);
    spec.dims = [32, 15, 32];
    assert!(spec.generate(0).is_err());
}

#[test]
fn containment_violation_is_an_error() {
    let mut spec = PhantomSpec::thorax(32);
    spec.jitter.scale = 0.29;
    spec.jitter.position = 0.29;
    // lungs pushed against the body wall for at least some seeds
    assert!((0..40).any(|s| spec.generate(s).is_err()));
}

#[test]
fn threshold_mask_examples() {
    let v = VoxelVolume::filled([4, 4, 4], [1.0; 3], 0.0).unwrap();
    assert_eq!(threshold_mask(&v, 1800.0, 1900.0).count(), 0);
    assert_eq!(threshold_mask(&v, -1024.0, 3000.0).count(), 64);
    // masking then remapping unmasked voxels away from the band is a fixed point
    let (r, _) = PhantomSpec::ribcage(32).generate(3).unwrap();
    let m1 = threshold_mask(&r, 1800.0, 1900.0);
    let mut remapped = r.clone();
    for (h, &k) in remapped.data_mut().iter_mut().zip(m1.data()) {
        if k == 0 {
            *h = 0.0;
        }
    }
    assert_eq!(threshold_mask(&remapped, 1800.0, 1900.0), m1);
}

#[test]
fn identity_shift_is_a_no_op() {
    let (v, _) = PhantomSpec::thorax(32).generate(1).unwrap();
    let s = apply_domain_shift(&v, &DomainShiftSpec::identity(), 5).unwrap();
    assert_eq!(bits(&v), bits(&s));
}

#[test]
fn occluder_changes_exactly_the_slab() {
    let (v, _) = PhantomSpec::thorax(32).generate(1).unwrap();
    let o = Occluder {
        lo: [2, 5, 7],
        hi: [9, 20, 13],
        added_hu: 500.0,
    };
    let spec = DomainShiftSpec {
        occluder: Some(o),
        ..DomainShiftSpec::identity()
    };
    let s = apply_domain_shift(&v, &spec, 0).unwrap();
    for z in 0..32 {
        for y in 0..32 {
            for x in 0..32 {
                let inside = (o.lo[0]..o.hi[0]).contains(&z)
                    && (o.lo[1]..o.hi[1]).contains(&y)
                    && (o.lo[2]..o.hi[2]).contains(&x);
                assert_eq!(v.get(z, y, x) != s.get(z, y, x), inside, "({z},{y},{x})");
            }
        }
    }
}

#[test]
fn noise_has_requested_sigma() {
    let v = VoxelVolume::filled([100, 100, 100], [1.0; 3], 0.0).unwrap();
    let spec = DomainShiftSpec {
        noise_sigma: 10.0,
        ..DomainShiftSpec::identity()
    };
    let s = apply_domain_shift(&v, &spec, 9).unwrap();
    let n = s.len() as f64;
    let mean = s.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = s.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!((var.sqrt() - 10.0).abs() < 0.5, "sigma {}", var.sqrt());
}

#[test]
fn shifted_volumes_stay_in_hu_bounds() {
    let (v, _) = PhantomSpec::ribcage(32).generate(2).unwrap();
    let spec = DomainShiftSpec {
        gain: 2.0,
        offset: 500.0,
        noise_sigma: 300.0,
        occluder: DomainShiftSpec::exp3_default([32; 3]).occluder,
    };
    let s = apply_domain_shift(&v, &spec, 1).unwrap();
    assert!(s.data().iter().all(|h| (-1024.0..=3000.0).contains(h)));
}

#[test]
fn center_crop_examples() {
    let v = VoxelVolume::new([34, 34, 34], [1.0; 3], (0..34 * 34 * 34).map(|i| i as f32).collect()).unwrap();
    assert_eq!(center_crop(&v, [34, 34, 34]).unwrap(), v);
    let c = center_crop(&v, [32, 32, 32]).unwrap();
    // one voxel removed from each side
    assert_eq!(c.get(0, 0, 0), v.get(1, 1, 1));
    assert_eq!(c.get(31, 31, 31), v.get(32, 32, 32));
    // odd surplus: the extra voxel comes off the high side
    let c = center_crop(&v, [31, 31, 31]).unwrap();
    assert_eq!(c.get(0, 0, 0), v.get(1, 1, 1));
    assert!(center_crop(&v, [35, 34, 34]).is_err());
}

#[test]
fn center_crop_keeps_the_ellipsoid_center() {
    let (v, _) = PhantomSpec::thorax(34).generate(4).unwrap();
    let c = center_crop(&v, [32, 32, 32]).unwrap();
    assert_eq!(c.get(16, 16, 16), v.get(17, 17, 17));
}
