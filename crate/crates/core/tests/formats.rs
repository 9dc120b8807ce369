use drrseg::drr::Image;
use drrseg::formats::*;
use drrseg::volume::{MaskVolume, VoxelVolume};
use drrseg::Error;
use proptest::prelude::*;

fn volume(dims: [usize; 3], seed: u32) -> VoxelVolume {
    let n = dims.iter().product::<usize>();
    let data = (0..n)
        .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 / 1e6 - 1000.0)
        .collect();
    VoxelVolume::new(dims, [0.5, 1.0, 1.25], data).unwrap()
}

#[test]
fn volb_layout_is_exact() {
    let v = VoxelVolume::new([2, 1, 3], [1.0, 2.0, 0.5], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let b = encode_volb_f32(&v);
    let mut expect = b"VOLB".to_vec();
    expect.extend([1u8, 0u8]);
    for d in [2u32, 1, 3] {
        expect.extend(d.to_le_bytes());
    }
    for s in [1.0f32, 2.0, 0.5] {
        expect.extend(s.to_le_bytes());
    }
    for x in 0..6 {
        expect.extend((x as f32).to_le_bytes());
    }
    assert_eq!(b, expect);

    let m = MaskVolume::new([1, 1, 2], [1.0; 3], vec![1, 0]).unwrap();
    let b = encode_volb_u8(&m);
    assert_eq!(b[5], 1);
    assert_eq!(&b[b.len() - 2..], &[1, 0]);
}

#[test]
fn imgf_and_ckpt_layouts_are_exact() {
    let img = Image::new(1, 2, 0.51, vec![3.0, -1.0]).unwrap();
    let mut expect = b"IMGF".to_vec();
    expect.push(1);
    expect.extend(1u32.to_le_bytes());
    expect.extend(2u32.to_le_bytes());
    expect.extend(0.51f32.to_le_bytes());
    expect.extend(3.0f32.to_le_bytes());
    expect.extend((-1.0f32).to_le_bytes());
    assert_eq!(encode_imgf(&img), expect);

    let entries = vec![CkptEntry {
        name: "w".into(),
        dims: vec![2],
        data: vec![1.0, 2.0],
    }];
    let mut expect = b"CKPT".to_vec();
    expect.push(1);
    expect.extend(1u32.to_le_bytes());
    expect.extend(1u32.to_le_bytes());
    expect.push(b'w');
    expect.extend(1u32.to_le_bytes());
    expect.extend(2u32.to_le_bytes());
    expect.extend(1.0f32.to_le_bytes());
    expect.extend(2.0f32.to_le_bytes());
    assert_eq!(encode_ckpt(&entries), expect);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn volb_round_trips_bitwise(d in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u32>()) {
        let v = volume([d, h, w], seed);
        match decode_volb(&encode_volb_f32(&v)).unwrap() {
            VolbData::F32(back) => {
                prop_assert_eq!(back.dims(), v.dims());
                prop_assert_eq!(back.spacing(), v.spacing());
                let a: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
            VolbData::U8(_) => prop_assert!(false, "dtype flipped"),
        }
        let m = v.map(|x| (x > 0.0) as u8);
        prop_assert_eq!(decode_volb(&encode_volb_u8(&m)).unwrap(), VolbData::U8(m));
    }

    #[test]
    fn imgf_round_trips_bitwise(r in 1usize..6, c in 1usize..6, px in 0.01f32..5.0) {
        let data: Vec<f32> = (0..r * c).map(|i| (i as f32 * 0.37).sin()).collect();
        let img = Image::new(r, c, px, data).unwrap();
        let back = decode_imgf(&encode_imgf(&img)).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn ckpt_round_trips_bitwise(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..5)) {
        let entries: Vec<CkptEntry> = shapes
            .iter()
            .enumerate()
            .map(|(i, dims)| CkptEntry {
                name: format!("layer{i}.weight"),
                dims: dims.clone(),
                data: (0..dims.iter().product::<usize>()).map(|k| k as f32 - 0.5).collect(),
            })
            .collect();
        prop_assert_eq!(decode_ckpt(&encode_ckpt(&entries)).unwrap(), entries);
    }
}

fn assert_truncations_fail(bytes: &[u8]) {
    for cut in 0..bytes.len() {
        match decode_any(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut, "cut {cut}: offset {offset}"),
            other => panic!("cut {cut}: expected format error, got {other:?}"),
        }
    }
}

fn decode_any(bytes: &[u8]) -> drrseg::Result<()> {
    match bytes.get(..4) {
        Some(b"VOLB") => decode_volb(bytes).map(drop),
        Some(b"IMGF") => decode_imgf(bytes).map(drop),
        Some(b"CKPT") => decode_ckpt(bytes).map(drop),
        _ => decode_volb(bytes).map(drop),
    }
}

#[test]
fn truncated_files_name_the_offset() {
    assert_truncations_fail(&encode_volb_f32(&volume([2, 2, 2], 1)));
    assert_truncations_fail(&encode_imgf(&Image::new(2, 3, 1.0, vec![0.0; 6]).unwrap()));
    let ck = encode_ckpt(&[CkptEntry {
        name: "a.b".into(),
        dims: vec![2, 2],
        data: vec![0.0; 4],
    }]);
    assert_truncations_fail(&ck);
    let err = decode_imgf(&encode_imgf(&Image::new(2, 3, 1.0, vec![0.0; 6]).unwrap())[..20]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("offset 17"), "{msg}");
}

#[test]
fn unsupported_versions_are_explicit() {
    let mut b = encode_volb_f32(&volume([1, 1, 1], 0));
    b[4] = 2;
    assert!(matches!(decode_volb(&b), Err(Error::Version { version: 2, .. })));
    let mut b = encode_imgf(&Image::new(1, 1, 1.0, vec![0.0]).unwrap());
    b[4] = 0;
    assert!(matches!(decode_imgf(&b), Err(Error::Version { version: 0, .. })));
    let mut b = encode_ckpt(&[]);
    b[4] = 7;
    assert!(matches!(decode_ckpt(&b), Err(Error::Version { version: 7, .. })));
}

#[test]
fn wrong_magic_and_trailing_bytes_are_rejected() {
    let mut b = encode_imgf(&Image::new(1, 1, 1.0, vec![0.0]).unwrap());
    assert!(matches!(decode_volb(&b), Err(Error::Format { offset: 0, .. })));
    b.push(0);
    assert!(matches!(decode_imgf(&b), Err(Error::Format { .. })));
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let v = volume([3, 4, 5], 2);
    let p = dir.path().join("nested/vol.volb");
    write_volume(&p, &v).unwrap();
    assert_eq!(read_volume(&p).unwrap(), v);
    assert!(read_mask(&p).is_err());
    let m = v.map(|x| (x < 0.0) as u8);
    let pm = dir.path().join("mask.volb");
    write_mask(&pm, &m).unwrap();
    assert_eq!(read_mask(&pm).unwrap(), m);
    let img = Image::new(2, 2, 0.51, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let pi = dir.path().join("img.imgf");
    write_image(&pi, &img).unwrap();
    assert_eq!(read_image(&pi).unwrap(), img);
    assert!(matches!(read_image(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn pgm_preview_is_16_bit_big_endian() {
    let b = encode_pgm16(1, 3, &[0.0, 0.5, 1.0]);
    let header = b"P5\n3 1\n65535\n";
    assert_eq!(&b[..header.len()], header);
    let px: Vec<u16> = b[header.len()..]
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    assert_eq!(px, vec![0, 32768, 65535]);
    let flat = encode_pgm16(1, 2, &[4.0, 4.0]);
    assert!(flat[header.len()..].iter().all(|&x| x == 0));
}
