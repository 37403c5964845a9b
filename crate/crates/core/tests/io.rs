use deimlab::autodiff::Tensor;
use deimlab::io::*;
use deimlab::snapshot::SnapshotMatrix;
use deimlab::Error;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), Just(-0.0), Just(f64::MIN_POSITIVE)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn snapshots_round_trip_bit_exact(rows in 1usize..12, cols in 1usize..6, seed in any::<u64>(), data in prop::collection::vec(finite(), 72)) {
        let values: Vec<f64> = (0..rows * cols).map(|k| data[k % data.len()]).collect();
        let snaps = SnapshotMatrix::from_parts(&[rows], values).unwrap();
        let bytes = encode_snapshots(&snaps, Metadata::new("stream", seed, serde_json::json!({"rows": rows}))).unwrap();
        let (back, meta) = decode_snapshots(&bytes).unwrap();
        prop_assert_eq!(back.dims(), snaps.dims());
        prop_assert!(back.as_slice().iter().zip(snaps.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(meta.seed, seed);
        prop_assert_eq!(meta.kind, "stream");
        // Encoding is a pure function of content and metadata.
        let again = encode_snapshots(&back, Metadata::new("stream", seed, serde_json::json!({"rows": rows}))).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn any_flipped_payload_byte_is_caught(pos in 0usize..1000, bit in 0u8..8) {
        let snaps = SnapshotMatrix::from_parts(&[4, 4], (0..64).map(|k| k as f64 / 7.0).collect()).unwrap();
        let mut bytes = encode_snapshots(&snaps, Metadata::new("stream", 1, serde_json::Value::Null)).unwrap();
        // Header, extents, payload and the trailer length field.
        let i = pos % (payload_end(&bytes) + 8);
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_snapshots(&bytes).is_err());
    }

    #[test]
    fn checkpoints_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5), fill in finite()) {
        let tensors: Vec<Tensor> = shapes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let n = s.iter().product();
                Tensor::new(s, (0..n).map(|j| fill * (j + k) as f64).collect()).unwrap()
            })
            .collect();
        let bytes = encode_checkpoint(&tensors, Metadata::new("net", 3, serde_json::Value::Null)).unwrap();
        let (back, _) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back.len(), tensors.len());
        for (a, b) in tensors.iter().zip(&back) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn kinds_are_not_interchangeable() {
    let snaps = SnapshotMatrix::from_parts(&[3], vec![1.0; 6]).unwrap();
    let bytes = encode_snapshots(&snaps, Metadata::new("stream", 0, serde_json::Value::Null)).unwrap();
    assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
    let ck = encode_checkpoint(&[Tensor::scalar(2.0)], Metadata::new("net", 0, serde_json::Value::Null)).unwrap();
    assert!(matches!(decode_snapshots(&ck), Err(Error::Format(_))));
}

#[test]
fn files_round_trip_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.dlab");
    let snaps = SnapshotMatrix::from_parts(&[2, 2], vec![0.5; 12]).unwrap();
    save_snapshots(&path, &snaps, Metadata::new("stream", 5, serde_json::Value::Null)).unwrap();
    let (back, meta) = load_snapshots(&path).unwrap();
    assert_eq!(back, snaps);
    let raw = std::fs::read(&path).unwrap();
    assert!(raw.starts_with(b"DLAB"));
    assert_eq!(meta.sha256.len(), 64);
    // A stale hash in the trailer is rejected.
    let mut tampered = raw.clone();
    let at = raw.windows(64).position(|w| w == meta.sha256.as_bytes()).unwrap();
    tampered[at..at + 64].copy_from_slice(sha256_hex(b"other").as_bytes());
    assert!(matches!(decode_snapshots(&tampered), Err(Error::Format(_))));
    assert!(load_snapshots(&dir.path().join("missing")).is_err());
}

fn payload_end(bytes: &[u8]) -> usize {
    let (_, meta) = decode_snapshots(bytes).unwrap();
    bytes.len() - 8 - serde_json::to_vec(&meta).unwrap().len()
}
