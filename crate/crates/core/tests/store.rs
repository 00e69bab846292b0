use proptest::prelude::*;
use seqmatch_core::store::*;
use seqmatch_core::tensor::Tensor;
use seqmatch_core::Error;

fn sample_store(kind: PayloadKind) -> Store {
    Store::new(
        kind,
        vec![
            Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 1e-300, f64::MAX, -0.0]).unwrap(),
            Tensor::new(vec![4], vec![0.25, 0.5, 0.75, 1.0]).unwrap(),
        ],
    )
}

/// Independent little-endian reader for the documented layout.
fn read_layout(bytes: &[u8]) -> (u32, u8, u8, Vec<Vec<u32>>, Vec<f64>, u32) {
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap());
    assert_eq!(&bytes[..4], b"SQDS");
    let version = u32_at(4);
    let kind = bytes[8];
    let dtype = bytes[9];
    let count = u32_at(10) as usize;
    let mut pos = 14;
    let mut shapes = Vec::new();
    for _ in 0..count {
        let rank = u32_at(pos) as usize;
        pos += 4;
        shapes.push((0..rank).map(|k| u32_at(pos + 4 * k)).collect::<Vec<_>>());
        pos += 4 * rank;
    }
    let payload_end = bytes.len() - 4;
    let values = bytes[pos..payload_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    (version, kind, dtype, shapes, values, u32_at(payload_end))
}

#[test]
fn layout_is_self_describing() {
    let bytes = encode(&sample_store(PayloadKind::Synthetic)).unwrap();
    let (version, kind, dtype, shapes, values, _crc) = read_layout(&bytes);
    assert_eq!(version, VERSION);
    assert_eq!(kind, 2);
    assert_eq!(dtype, 1);
    assert_eq!(shapes, vec![vec![2, 3], vec![4]]);
    assert_eq!(values.len(), 10);
    assert_eq!(values[4], f64::MAX);
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/run.sqds");
    let store = sample_store(PayloadKind::Metrics);
    save_store(&path, &store).unwrap();
    assert_eq!(load_store(&path).unwrap(), store);
    assert_eq!(load_store_of(&path, PayloadKind::Metrics).unwrap(), store);
    assert!(load_store_of(&path, PayloadKind::Trajectory).is_err());
    assert_eq!(manifest_path(&path), dir.path().join("nested/run.json"));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path().join("nested")).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}

#[test]
fn payload_corruption_raises_checksum_error() {
    let bytes = encode(&sample_store(PayloadKind::Trajectory)).unwrap();
    let payload_start = bytes.len() - 4 - 80;
    for pos in payload_start..bytes.len() - 4 {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(matches!(decode(&bad), Err(Error::Checksum { .. })), "byte {pos}");
    }
}

#[test]
fn every_single_byte_corruption_is_detected() {
    for kind in [PayloadKind::Trajectory, PayloadKind::Synthetic, PayloadKind::Metrics] {
        let bytes = encode(&sample_store(kind)).unwrap();
        for pos in 0..bytes.len() {
            for mask in [0x01u8, 0x02, 0x80, 0xff] {
                let mut bad = bytes.clone();
                bad[pos] ^= mask;
                let detected = match decode(&bad) {
                    Err(_) => true,
                    Ok(s) => s.kind != kind,
                };
                assert!(detected, "kind {kind:?} byte {pos} mask {mask:#x}");
            }
        }
    }
}

#[test]
fn header_errors() {
    let bytes = encode(&sample_store(PayloadKind::Trajectory)).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(decode(&bad), Err(Error::Version { found: 2, expected: 1 })));
    assert!(matches!(decode(&bytes[..3]), Err(Error::BadMagic(_))));
    assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(decode(&longer), Err(Error::Format(_))));
}

#[test]
fn empty_store_round_trips() {
    let s = Store::new(PayloadKind::Metrics, vec![]);
    assert_eq!(decode(&encode(&s).unwrap()).unwrap(), s);
}

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<f64>(), n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn random_stores_round_trip_bitwise(tensors in prop::collection::vec(arb_tensor(), 0..6), kind in 1u8..4) {
        let kind = match kind { 1 => PayloadKind::Trajectory, 2 => PayloadKind::Synthetic, _ => PayloadKind::Metrics };
        let store = Store::new(kind, tensors);
        let back = decode(&encode(&store).unwrap()).unwrap();
        prop_assert_eq!(back.kind, kind);
        prop_assert_eq!(back.tensors.len(), store.tensors.len());
        for (a, b) in back.tensors.iter().zip(&store.tensors) {
            prop_assert_eq!(a.shape(), b.shape());
            let abits: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bbits: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(abits, bbits);
        }
    }
}
