use pcn_core::artifact::{csv_reader, read_provenance};
use pcn_core::config::{ModelConfig, ModelId};
use pcn_core::exits::{
    classify, infer_early_exit, infer_fixed_cycles, write_exit_log, ExitRecord,
};
use pcn_core::model::names;
use pcn_core::{ExitPolicy, PcModel, Provenance};
use pcn_tensor::Tensor;
use proptest::prelude::*;

fn config(cycles: usize) -> ModelConfig {
    ModelConfig::preset(ModelId::A, cycles).unwrap().shrunk(4, 8).unwrap()
}

fn input(batch: usize, seed: u64) -> Tensor<f64> {
    let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
    Tensor::from_fn(&[batch, 3, 8, 8], |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s % 10_000) as f64 / 2_500.0 - 2.0
    })
    .unwrap()
}

#[test]
fn zero_head_is_uniform() {
    let cfg = config(2);
    let mut m = PcModel::<f64>::new(cfg.clone(), 0).unwrap();
    m.params.set(&names::head_weight(2), Tensor::zeros(&[10, 16]).unwrap()).unwrap();
    m.params.set(&names::head_bias(2), Tensor::zeros(&[10]).unwrap()).unwrap();
    let f = Tensor::from_fn(&[3, 16], |i| i as f64 * 0.1).unwrap();
    let p = classify(&m, &f, 2).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.1).abs() < 1e-12));
    assert!(classify(&m, &f, 0).is_err());
    assert!(classify(&m, &f, 3).is_err());
}

#[test]
fn heads_are_independent() {
    let m = PcModel::<f64>::new(config(2), 1).unwrap();
    let f = Tensor::from_fn(&[2, 16], |i| (i as f64).sin()).unwrap();
    assert_ne!(classify(&m, &f, 1).unwrap(), classify(&m, &f, 2).unwrap());
}

#[test]
fn classify_matches_softmax_affine() {
    let m = PcModel::<f64>::new(config(3), 2).unwrap();
    let f = Tensor::from_fn(&[4, 16], |i| ((i * 37) % 11) as f64 / 5.0 - 1.0).unwrap();
    let p = classify(&m, &f, 3).unwrap();
    let w = m.params.tensor(&names::head_weight(3)).unwrap();
    let b = m.params.tensor(&names::head_bias(3)).unwrap();
    for s in 0..4 {
        let logits: Vec<f64> = (0..10)
            .map(|k| b.data()[k] + (0..16).map(|j| w.data()[k * 16 + j] * f.data()[s * 16 + j]).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..10 {
            assert!((p.data()[s * 10 + k] - logits[k].exp() / z).abs() < 1e-6);
        }
    }
}

#[test]
fn threshold_boundaries_match_fixed_cycles() {
    let m = PcModel::<f64>::new(config(4), 3).unwrap();
    let x = input(6, 1);
    let low = infer_early_exit(&m, &x, ExitPolicy::new(0.0).unwrap()).unwrap();
    let high = infer_early_exit(&m, &x, ExitPolicy::new(1.0).unwrap()).unwrap();
    assert!(low.iter().all(|o| o.exit_cycle == 1));
    assert!(high.iter().all(|o| o.exit_cycle == 4 && o.confidences.len() == 4));
    assert_eq!(low, infer_fixed_cycles(&m, &x, 1).unwrap());
    assert_eq!(high, infer_fixed_cycles(&m, &x, 4).unwrap());
    assert!(infer_fixed_cycles(&m, &x, 5).is_err());
    assert!(infer_fixed_cycles(&m, &x, 0).is_err());
}

#[test]
fn outcomes_are_consistent() {
    let m = PcModel::<f64>::new(config(3), 4).unwrap();
    for o in infer_early_exit(&m, &input(5, 2), ExitPolicy::new(0.12).unwrap()).unwrap() {
        assert!((o.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let max = o.probs.iter().copied().fold(0.0, f64::max);
        assert_eq!(o.confidence, max);
        assert_eq!(o.probs[o.predicted_class], max);
        assert!(o.exit_cycle <= 3);
        assert_eq!(o.cycles_executed, o.exit_cycle);
        assert_eq!(o.confidences.len(), o.exit_cycle);
        assert_eq!(*o.confidences.last().unwrap(), o.confidence);
        assert_eq!(ExitPolicy::new(0.12).unwrap().exit_cycle(&o.confidences), o.exit_cycle);
    }
}

#[test]
fn batch_invariance() {
    let m = PcModel::<f64>::new(config(3), 5).unwrap();
    let x = input(5, 3);
    let batched = infer_fixed_cycles(&m, &x, 3).unwrap();
    for (i, whole) in batched.iter().enumerate() {
        let single = infer_fixed_cycles(&m, &x.slice_batch(i, 1).unwrap(), 3).unwrap();
        for (a, b) in whole.probs.iter().zip(&single[0].probs) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn early_exit_deterministic() {
    let m = PcModel::<f32>::new(config(3), 6).unwrap();
    let x = input(4, 4).cast::<f32>();
    let p = ExitPolicy::new(0.11).unwrap();
    assert_eq!(infer_early_exit(&m, &x, p).unwrap(), infer_early_exit(&m, &x, p).unwrap());
}

#[test]
fn exit_log_round_trip() {
    let m = PcModel::<f64>::new(config(3), 7).unwrap();
    let outs = infer_early_exit(&m, &input(4, 5), ExitPolicy::new(0.105).unwrap()).unwrap();
    let records: Vec<ExitRecord> =
        outs.into_iter().enumerate().map(|(i, outcome)| ExitRecord { sample_id: i, label: i % 10, outcome }).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exits.csv");
    let prov = Provenance::new(m.config.hash(), 11);
    write_exit_log(&path, &records, 3, &prov).unwrap();
    assert_eq!(read_provenance(&path).unwrap(), prov);
    let mut rdr = csv_reader(&path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(headers.len(), 8);
    for (row, rec) in rdr.records().zip(&records) {
        let row = row.unwrap();
        assert_eq!(row[4].parse::<usize>().unwrap(), rec.outcome.exit_cycle);
        assert_eq!(&row[3] == "1", rec.correct());
        let filled = (5..8).filter(|&c| !row[c].is_empty()).count();
        assert_eq!(filled, rec.outcome.exit_cycle);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn exit_volume_monotone(seed in 0u64..500, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let m = PcModel::<f64>::new(config(3), seed).unwrap();
        let x = input(6, seed);
        let a = infer_early_exit(&m, &x, ExitPolicy::new(lo).unwrap()).unwrap();
        let b = infer_early_exit(&m, &x, ExitPolicy::new(hi).unwrap()).unwrap();
        for (oa, ob) in a.iter().zip(&b) {
            if ob.exit_cycle == 1 {
                prop_assert_eq!(oa.exit_cycle, 1);
            }
            prop_assert!(oa.exit_cycle <= ob.exit_cycle);
        }
    }
}
