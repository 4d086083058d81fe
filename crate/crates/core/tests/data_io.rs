use pcn_core::data::{
    batches, load_cifar10_binary, normalize, synthetic_classification_set, write_cifar10_binary, Dataset,
    NormalizationSpec, Split, CIFAR_RECORD,
};
use pcn_core::Error;
use proptest::prelude::*;

fn write(dir: &std::path::Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn single_record_scales_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![255u8; CIFAR_RECORD];
    rec[0] = 7;
    let p = write(dir.path(), "one.bin", &rec);
    let d = load_cifar10_binary(&[p], Split::Train).unwrap();
    assert_eq!(d.labels, [7]);
    assert!(d.images.iter().all(|&v| v == 1.0));
    assert_eq!(d.images.len(), 3072);
}

#[test]
fn malformed_files_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let short = write(dir.path(), "short.bin", &[0u8; 3072]);
    assert!(matches!(load_cifar10_binary(&[short], Split::Train), Err(Error::Format(_))));
    let empty = write(dir.path(), "empty.bin", &[]);
    assert!(matches!(load_cifar10_binary(&[empty], Split::Train), Err(Error::Format(_))));
    let mut rec = vec![0u8; 2 * CIFAR_RECORD];
    rec[CIFAR_RECORD] = 10;
    let bad = write(dir.path(), "label.bin", &rec);
    assert!(matches!(load_cifar10_binary(&[bad], Split::Train), Err(Error::Data(_))));
    let missing = dir.path().join("missing.bin");
    assert!(matches!(load_cifar10_binary(&[missing], Split::Test), Err(Error::Io { .. })));
}

#[test]
fn planar_layout() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![0u8; CIFAR_RECORD];
    rec[0] = 3;
    rec[1 + 1024 + 32 * 5 + 9] = 51;
    let d = load_cifar10_binary(&[write(dir.path(), "x.bin", &rec)], Split::Test).unwrap();
    assert_eq!(d.image(0)[1024 + 5 * 32 + 9], 0.2);
    assert_eq!(d.split, Split::Test);
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for i in 0..5u32 {
        bytes.push((i % 10) as u8);
        bytes.extend((0..3072u32).map(|j| ((i * 31 + j * 7) % 256) as u8));
    }
    let p = write(dir.path(), "src.bin", &bytes);
    let a = load_cifar10_binary(&[&p], Split::Train).unwrap();
    let b = load_cifar10_binary(&[&p], Split::Train).unwrap();
    assert_eq!(a, b);
    let q = dir.path().join("copy.bin");
    write_cifar10_binary(&q, &a).unwrap();
    assert_eq!(std::fs::read(&q).unwrap(), bytes);
    let c = load_cifar10_binary(&[&q], Split::Train).unwrap();
    assert!(a.images.iter().zip(&c.images).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.labels, c.labels);
    let both = load_cifar10_binary(&[&p, &q], Split::Train).unwrap();
    assert_eq!(both.len(), 10);
}

#[test]
fn synthetic_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = synthetic_classification_set(20, 10, 4).unwrap();
    let p = dir.path().join("syn.bin");
    write_cifar10_binary(&p, &d).unwrap();
    let back = load_cifar10_binary(&[&p], Split::Train).unwrap();
    let requantized: Vec<f32> = d.images.iter().map(|v| (v * 255.0).round() / 255.0).collect();
    assert_eq!(back.images, requantized);
    write_cifar10_binary(&dir.path().join("again.bin"), &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("again.bin")).unwrap());
}

#[test]
fn normalization() {
    let d = synthetic_classification_set(30, 10, 1).unwrap();
    assert_eq!(normalize(&d, &NormalizationSpec::identity(3)).unwrap(), d);
    let spec = NormalizationSpec::from_dataset(&d).unwrap();
    let n = normalize(&d, &spec).unwrap();
    let own = NormalizationSpec::from_dataset(&n).unwrap();
    for c in 0..3 {
        assert!(own.mean[c].abs() < 1e-4);
        assert!((own.std[c] - 1.0).abs() < 1e-4);
    }
    let (i, c, y, x) = (17, 2, 9, 30);
    let j = c * 1024 + y * 32 + x;
    let expect = (d.image(i)[j] as f64 - spec.mean[c]) / spec.std[c];
    assert!((n.image(i)[j] as f64 - expect).abs() < 1e-6);
    let zero = NormalizationSpec { mean: vec![0.0; 3], std: vec![1.0, 0.0, 1.0] };
    assert!(matches!(normalize(&d, &zero), Err(Error::Config(_))));
}

#[test]
fn shuffles_are_seeded() {
    let a = batches(100, 64, true, 9).unwrap();
    assert_eq!(a, batches(100, 64, true, 9).unwrap());
    assert_ne!(a, batches(100, 64, true, 10).unwrap());
    assert_ne!(a.concat(), (0..100).collect::<Vec<_>>());
}

#[test]
fn synthetic_is_balanced_and_deterministic() {
    let d = synthetic_classification_set(100, 10, 3).unwrap();
    for k in 0..10u8 {
        assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 10);
    }
    assert_eq!(d, synthetic_classification_set(100, 10, 3).unwrap());
    assert!(d.images.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(synthetic_classification_set(5, 10, 3).is_err());
}

/// Multiclass perceptron on raw pixels.
fn perceptron_accuracy(d: &Dataset, epochs: usize) -> f64 {
    let f = d.image_len();
    let k = d.num_classes;
    let mut w = vec![0.0f64; k * (f + 1)];
    let score = |w: &[f64], x: &[f32], c: usize| {
        let row = &w[c * (f + 1)..(c + 1) * (f + 1)];
        row[f] + row[..f].iter().zip(x).map(|(a, b)| a * *b as f64).sum::<f64>()
    };
    let predict = |w: &[f64], x: &[f32]| (0..k).max_by(|&a, &b| score(w, x, a).total_cmp(&score(w, x, b))).unwrap();
    for _ in 0..epochs {
        for i in 0..d.len() {
            let x = d.image(i);
            let (y, p) = (d.labels[i] as usize, predict(&w, x));
            if y != p {
                for (c, sign) in [(y, 1.0), (p, -1.0)] {
                    let row = &mut w[c * (f + 1)..(c + 1) * (f + 1)];
                    row.iter_mut().zip(x).for_each(|(a, b)| *a += sign * *b as f64);
                    row[f] += sign;
                }
            }
        }
    }
    (0..d.len()).filter(|&i| predict(&w, d.image(i)) == d.labels[i] as usize).count() as f64 / d.len() as f64
}

#[test]
fn synthetic_is_linearly_separable() {
    let d = synthetic_classification_set(200, 10, 5).unwrap();
    assert!(perceptron_accuracy(&d, 20) >= 0.95);
}

proptest! {
    #[test]
    fn batches_partition(len in 0usize..300, bs in 1usize..80, shuffle: bool, seed: u64) {
        let b = batches(len, bs, shuffle, seed).unwrap();
        let mut all = b.concat();
        prop_assert_eq!(all.len(), len);
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert!(b.iter().rev().skip(1).all(|x| x.len() == bs));
        if !shuffle {
            prop_assert_eq!(b.concat(), (0..len).collect::<Vec<_>>());
        }
    }
}
