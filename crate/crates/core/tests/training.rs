use pcn_core::config::{ModelConfig, ModelId};
use pcn_core::data::{normalize, synthetic_set, NormalizationSpec, Split};
use pcn_core::model::names;
use pcn_core::train::{build_objective, Trainer};
use pcn_core::{run_training, Error, PcModel, TrainConfig, TrainMode};
use pcn_tensor::Tensor;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn config(cycles: usize) -> ModelConfig {
    ModelConfig::preset(ModelId::A, cycles).unwrap().shrunk(4, 8).unwrap()
}

fn two_layer(cycles: usize) -> ModelConfig {
    ModelConfig::from_channels(ModelId::Custom, 3, 8, &[4, 8], 10, cycles).unwrap()
}

fn data(n: usize, seed: u64) -> pcn_core::Dataset {
    let raw = synthetic_set(n, 10, 3, 8, seed, Split::Train).unwrap();
    normalize(&raw, &NormalizationSpec::from_dataset(&raw).unwrap()).unwrap()
}

fn quiet(mode: TrainMode) -> TrainConfig {
    TrainConfig { mode, dropout: 0.0, hflip: false, translate: false, ..TrainConfig::default() }
}

fn objective(m: &PcModel<f64>, x: &Tensor<f64>, labels: &[usize], lambdas: &[Option<f64>]) -> f64 {
    let mut s = m.session(false).unwrap();
    let cycles = lambdas.iter().rposition(Option::is_some).unwrap() + 1;
    let (obj, _) = build_objective(&mut s, x.clone(), labels, cycles, lambdas, None).unwrap();
    s.value(obj.total).data()[0]
}

fn grads(
    m: &PcModel<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    lambdas: &[Option<f64>],
) -> indexmap::IndexMap<String, Tensor<f64>> {
    let mut s = m.session(true).unwrap();
    let (obj, _) = build_objective(&mut s, x.clone(), labels, lambdas.len(), lambdas, None).unwrap();
    s.param_grads(obj.total).unwrap()
}

fn batch(d: &pcn_core::Dataset, n: usize) -> (Tensor<f64>, Vec<usize>) {
    let idx: Vec<usize> = (0..n).collect();
    (d.batch_tensor(&idx).unwrap(), d.batch_labels(&idx))
}

fn param_hash(m: &PcModel<f32>, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (name, p) in m.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
        h.update(name.as_bytes());
        for v in p.tensor.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[test]
fn unweighted_heads_get_zero_gradient() {
    let m = PcModel::<f64>::new(config(3), 1).unwrap();
    let (x, y) = batch(&data(20, 1), 4);
    let g = grads(&m, &x, &y, &[Some(1.0), Some(0.0), Some(0.0)]);
    for t in 2..=3 {
        assert!(g[&names::head_weight(t)].data().iter().all(|&v| v == 0.0));
        assert!(g[&names::head_bias(t)].data().iter().all(|&v| v == 0.0));
    }
    assert!(g[&names::head_weight(1)].data().iter().any(|&v| v != 0.0));
}

#[test]
fn doubling_lambdas_doubles_gradients() {
    let m = PcModel::<f64>::new(config(3), 2).unwrap();
    let (x, y) = batch(&data(20, 2), 4);
    let g1 = grads(&m, &x, &y, &[Some(0.2), Some(0.3), Some(0.5)]);
    let g2 = grads(&m, &x, &y, &[Some(0.4), Some(0.6), Some(1.0)]);
    for (name, a) in &g1 {
        for (u, v) in a.data().iter().zip(g2[name].data()) {
            assert_eq!(2.0 * u, *v, "{name}");
        }
    }
}

#[test]
fn feedback_rate_gradient_matches_finite_difference() {
    let m = PcModel::<f64>::new(two_layer(3), 3).unwrap();
    let (x, y) = batch(&data(20, 3), 2);
    let lambdas = [Some(1.0 / 3.0); 3];
    let analytic = grads(&m, &x, &y, &lambdas)[&names::rate_b(1)].data()[0];
    assert!(analytic != 0.0);
    let h = 1e-5;
    let at = |delta: f64| {
        let mut p = m.clone();
        let v = p.params.tensor(&names::rate_b(1)).unwrap().data()[0];
        p.params.set(&names::rate_b(1), Tensor::scalar(v + delta)).unwrap();
        objective(&p, &x, &y, &lambdas)
    };
    let numeric = (at(h) - at(-h)) / (2.0 * h);
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
    assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
}

/// A feedback change rises one layer per cycle, so with five layers the
/// lowest feedback rate cannot reach exit 3.
#[test]
fn deep_feedback_needs_enough_cycles() {
    let (x, y) = batch(&data(20, 3), 2);
    let shallow = grads(&PcModel::<f64>::new(config(3), 3).unwrap(), &x, &y, &[Some(1.0 / 3.0); 3]);
    assert!(!shallow.contains_key(&names::rate_b(1)));
    assert!(shallow.contains_key(&names::rate_b(2)));
    let deep = grads(&PcModel::<f64>::new(config(4), 3).unwrap(), &x, &y, &[Some(0.25); 4]);
    assert!(deep[&names::rate_b(1)].data()[0] != 0.0);
}

#[test]
fn one_step_reduces_replayed_loss() {
    let d = data(16, 4);
    let model = PcModel::<f64>::new(two_layer(2), 4).unwrap();
    let (x, y) = batch(&d, 16);
    let lambdas = [Some(0.5), Some(0.5)];
    let before = objective(&model, &x, &y, &lambdas);
    let mut tr = Trainer::new(model, quiet(TrainMode::Joint)).unwrap();
    let out = tr.train_step_joint(x.clone(), &y).unwrap();
    assert!((out.total - before).abs() < 1e-12);
    assert!(objective(&tr.model, &x, &y, &lambdas) < before);
}

#[test]
fn fixed_cycle_one_equals_joint_single_exit() {
    let d = data(20, 5);
    let idx: Vec<usize> = (0..8).collect();
    let x = d.batch_tensor::<f32>(&idx).unwrap();
    let y = d.batch_labels(&idx);
    let base = PcModel::<f32>::new(two_layer(1), 5).unwrap();
    let mut joint = Trainer::new(base.clone(), TrainConfig { lambdas: vec![1.0], ..quiet(TrainMode::Joint) }).unwrap();
    let mut fixed = Trainer::new(base, quiet(TrainMode::FixedCycle(1))).unwrap();
    for _ in 0..3 {
        let a = joint.train_step(x.clone(), &y).unwrap();
        let b = fixed.train_step(x.clone(), &y).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(joint.model, fixed.model);
}

#[test]
fn fixed_cycle_leaves_other_heads_alone() {
    let d = data(20, 6);
    let idx: Vec<usize> = (0..8).collect();
    let x = d.batch_tensor::<f32>(&idx).unwrap();
    let y = d.batch_labels(&idx);
    let mut tr = Trainer::new(PcModel::<f32>::new(config(3), 6).unwrap(), TrainConfig::fixed_cycle(2)).unwrap();
    let before: Vec<String> = (1..=3).map(|t| param_hash(&tr.model, &format!("head.{t}."))).collect();
    for _ in 0..2 {
        let out = tr.train_step(x.clone(), &y).unwrap();
        assert!(out.losses[0].is_none() && out.losses[1].is_some() && out.losses[2].is_none());
    }
    assert_eq!(param_hash(&tr.model, "head.1."), before[0]);
    assert_ne!(param_hash(&tr.model, "head.2."), before[1]);
    assert_eq!(param_hash(&tr.model, "head.3."), before[2]);
    assert!(tr.train_step_fixed(x, &y, 4).is_err());
}

#[test]
fn fixed_cycle_loss_trace_settles() {
    let d = data(32, 7);
    let idx: Vec<usize> = (0..32).collect();
    let x = d.batch_tensor::<f32>(&idx).unwrap();
    let y = d.batch_labels(&idx);
    let mut tr = Trainer::new(PcModel::<f32>::new(two_layer(2), 7).unwrap(), quiet(TrainMode::FixedCycle(2))).unwrap();
    let losses: Vec<f64> = (0..20).map(|_| tr.train_step(x.clone(), &y).unwrap().total).collect();
    for w in losses[5..].windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn rates_stay_feasible() {
    let d = data(20, 8);
    let idx: Vec<usize> = (0..10).collect();
    let x = d.batch_tensor::<f32>(&idx).unwrap();
    let y = d.batch_labels(&idx);
    let mut m = PcModel::<f32>::new(config(2), 8).unwrap();
    let mut r = m.rates().unwrap();
    r.a[0] = 1e-6;
    r.b[1] = 1e-6;
    m.set_rates(&r).unwrap();
    let cfg = TrainConfig { learning_rate: 0.05, ..quiet(TrainMode::Joint) };
    let mut tr = Trainer::new(m, cfg).unwrap();
    for _ in 0..5 {
        tr.train_step(x.clone(), &y).unwrap();
        let r = tr.model.rates().unwrap();
        assert!(r.a.iter().chain(&r.b).all(|&v| v >= 0.0));
        assert_eq!(r.b[0], 0.0);
    }
}

#[test]
fn non_finite_loss_is_divergence() {
    let d = data(20, 9);
    let idx: Vec<usize> = (0..4).collect();
    let mut m = PcModel::<f32>::new(config(2), 9).unwrap();
    let mut w = m.params.tensor(&names::head_weight(1)).unwrap().clone();
    w.data_mut()[0] = f32::NAN;
    m.params.set(&names::head_weight(1), w).unwrap();
    let mut tr = Trainer::new(m, quiet(TrainMode::Joint)).unwrap();
    let err = tr.train_step(d.batch_tensor(&idx).unwrap(), &d.batch_labels(&idx)).unwrap_err();
    assert!(matches!(&err, Error::Divergence(msg) if msg.contains("rates")), "{err}");
}

#[test]
fn one_epoch_one_step() {
    let d = data(64, 10);
    let cfg = TrainConfig { epochs: 1, seed: 3, ..TrainConfig::default() };
    let out = run_training(PcModel::<f32>::new(config(2), 10).unwrap(), cfg, &d, None, |_| {}).unwrap();
    assert_eq!(out.report.epochs.len(), 1);
    assert_eq!(out.report.epochs[0].steps, 1);
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let d = data(40, 11);
    let test = data(20, 12);
    let run = || {
        let cfg = TrainConfig { epochs: 2, batch_size: 16, seed: 21, ..TrainConfig::default() };
        run_training(PcModel::<f32>::new(config(2), 21).unwrap(), cfg, &d, Some(&test), |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    for (ea, eb) in a.report.epochs.iter().zip(&b.report.epochs) {
        assert_eq!(ea.losses, eb.losses);
        assert_eq!(ea.test_accuracy, eb.test_accuracy);
    }
    assert_eq!(a.last, b.last);
}

#[test]
fn report_csv_rows() {
    let d = data(20, 13);
    let cfg = TrainConfig { epochs: 2, batch_size: 10, ..TrainConfig::default() };
    let out = run_training(PcModel::<f32>::new(config(3), 1).unwrap(), cfg, &d, Some(&d), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    out.report.write_csv(&path).unwrap();
    let mut rdr = pcn_core::artifact::csv_reader(&path).unwrap();
    assert_eq!(rdr.headers().unwrap().iter().take(4).collect::<Vec<_>>(), ["epoch", "exit", "loss", "accuracy"]);
    assert_eq!(rdr.records().count(), 2 * 3);
    let prov = pcn_core::artifact::read_provenance(&path).unwrap();
    assert_eq!(prov.config_hash, config(3).hash());
}

#[test]
fn empty_dataset_rejected() {
    let d = data(20, 14).truncated(0);
    let r = run_training(PcModel::<f32>::new(config(2), 1).unwrap(), TrainConfig::default(), &d, None, |_| {});
    assert!(matches!(r, Err(Error::Data(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn joint_loss_is_a_dot_product(pairs in prop::collection::vec((0.0f64..5.0, 0.0f64..1.0), 1..8)) {
        let (losses, lambdas): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(lambdas.iter().sum::<f64>() > 0.0);
        let oracle: f64 = losses.iter().zip(&lambdas).map(|(l, w)| l * w).sum();
        prop_assert!((pcn_core::joint_loss(&losses, &lambdas).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn translation_index_map(dx in -4i64..=4, dy in -4i64..=4) {
        let img: Vec<f32> = (0..2 * 36).map(|v| v as f32 + 1.0).collect();
        let out = pcn_core::train::augment_with(&img, 2, 6, false, dx, dy);
        for c in 0..2 {
            for r in 0..6i64 {
                for col in 0..6i64 {
                    let (sr, sc) = (r - dy, col - dx);
                    let expect = if (0..6).contains(&sr) && (0..6).contains(&sc) {
                        img[(c * 36 + sr * 6 + sc) as usize]
                    } else {
                        0.0
                    };
                    prop_assert_eq!(out[(c * 36 + r * 6 + col) as usize], expect);
                }
            }
        }
    }
}
