//! Analytic gradients against central finite differences, and AdamW against
//! a scripted scalar recurrence.

use indexmap::IndexMap;
use pcn_tensor::{AdamW, AdamWConfig, Graph, NormMode, ParamKind, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// `sum(op(inputs) * probe)` for a fixed random probe.
fn probed_loss<F>(inputs: &[Tensor<f64>], op: &F, probe: &Tensor<f64>) -> (Graph<f64>, Vec<Var>, Var)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = op(&mut g, &vars);
    let p = g.leaf(probe.clone(), false);
    let prod = g.mul(out, p).unwrap();
    let loss = g.sum(prod).unwrap();
    (g, vars, loss)
}

/// Compares every input gradient with central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, op: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = op(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let probe = random(&out_shape, &mut rng);
    let (g, vars, loss) = probed_loss(&inputs, &op, &probe);
    let grads = g.backward(loss).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input reaches the loss");
        for i in 0..inputs[k].len() {
            let eval = |delta: f64| {
                let mut moved = inputs.clone();
                moved[k].data_mut()[i] += delta;
                let (g, _, l) = probed_loss(&moved, &op, &probe);
                g.value(l).data()[0]
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let a = analytic.data()[i];
            assert!(rel_err(a, numeric) < TOL, "input {k} element {i}: analytic {a} vs numeric {numeric}");
        }
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(
        vec![random(&[2, 2, 4, 5], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)],
        |g, v| g.conv2d(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn deconv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for stride in [1, 2] {
        check(
            vec![random(&[2, 3, 3, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[2], &mut rng)],
            move |g, v| g.deconv2d(v[0], v[1], v[2], stride).unwrap(),
        );
    }
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![random(&[3, 2, 3, 3], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng)];
    check(inputs.clone(), |g, v| g.batchnorm(v[0], v[1], v[2], NormMode::Train).unwrap().0);
    let mean = random(&[2], &mut rng);
    let var = random(&[2], &mut rng).map(|v| v.abs() + 0.5);
    check(inputs, move |g, v| {
        g.batchnorm(v[0], v[1], v[2], NormMode::Eval { mean: &mean, var: &var }).unwrap().0
    });
}

#[test]
fn relu_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // keep inputs away from the kink and from pooling ties
    let mut vals: Vec<f64> = (0..64).map(|i| (i as f64 - 31.5) * 0.05).collect();
    for i in (1..vals.len()).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::new(&[1, 4, 4, 4], vals).unwrap();
    check(vec![x.clone()], |g, v| g.relu(v[0]).unwrap());
    check(vec![x.clone()], |g, v| g.maxpool2(v[0]).unwrap());
    check(vec![x], |g, v| g.global_avg_pool(v[0]).unwrap());
}

#[test]
fn fully_connected_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(
        vec![random(&[3, 4], &mut rng), random(&[5, 4], &mut rng), random(&[5], &mut rng)],
        |g, v| g.fully_connected(v[0], v[1], v[2]).unwrap(),
    );
    check(vec![random(&[4, 6], &mut rng).map(|v| 3.0 * v)], |g, v| {
        g.softmax_cross_entropy(v[0], &[1, 5, 0, 1]).unwrap()
    });
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    let s = Tensor::scalar(0.3);
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check(vec![a.clone(), s.clone()], |g, v| g.scale_by(v[0], v[1]).unwrap());
    check(vec![a.clone(), s.clone(), b.clone()], |g, v| g.add_scaled(v[0], v[1], v[2]).unwrap());
    check(vec![a.clone(), b.clone(), s], |g, v| g.lerp(v[0], v[1], v[2]).unwrap());
    check(vec![a], |g, v| g.scale_const(v[0], -2.5).unwrap());
}

#[test]
fn dropout_gradient_follows_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random(&[1000], &mut rng), true);
    let y = g.dropout(x, 0.25, &mut rng).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let gx = grads.get(x).unwrap();
    for (gv, (yv, xv)) in gx.data().iter().zip(g.value(y).data().iter().zip(g.value(x).data())) {
        if *yv == 0.0 {
            assert_eq!(*gv, 0.0);
        } else {
            assert!((gv - 1.0 / 0.75).abs() < 1e-12 && (yv - xv / 0.75).abs() < 1e-12);
        }
    }
}

fn single(value: f64, kind: ParamKind) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(value), kind, true).unwrap();
    p
}

fn grad_map(g: f64) -> IndexMap<String, Tensor<f64>> {
    IndexMap::from([("w".to_string(), Tensor::scalar(g))])
}

#[test]
fn adamw_zero_gradient_without_decay_is_noop() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), ParamKind::Weight, true).unwrap();
    let before = p.clone();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let zero = IndexMap::from([("w".to_string(), Tensor::zeros(&[3]).unwrap())]);
    for _ in 0..3 {
        opt.step(&mut p, &zero).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(opt.steps(), 3);
}

#[test]
fn adamw_first_step_moves_by_learning_rate() {
    let mut p = single(0.0, ParamKind::Weight);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
    opt.step(&mut p, &grad_map(1.0)).unwrap();
    let w = p.tensor("w").unwrap().data()[0];
    assert!((w + 0.001).abs() < 1e-9, "{w}");
}

#[test]
fn adamw_matches_scripted_recurrence_on_quadratic() {
    // loss = 0.5 * c * (w - 3)^2
    let c = 2.5;
    let cfg = AdamWConfig::default();
    let mut p = single(-1.0, ParamKind::Weight);
    let mut opt = AdamW::new(cfg);

    let (mut w, mut m, mut v) = (-1.0f64, 0.0f64, 0.0f64);
    for t in 1..=5 {
        let g = c * (p.tensor("w").unwrap().data()[0] - 3.0);
        opt.step(&mut p, &grad_map(g)).unwrap();

        let g_ref = c * (w - 3.0);
        w -= 0.001 * 0.01 * w;
        m = 0.9 * m + 0.1 * g_ref;
        v = 0.999 * v + 0.001 * g_ref * g_ref;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        w -= 0.001 * mh / (vh.sqrt() + 1e-8);

        let got = p.tensor("w").unwrap().data()[0];
        assert!((got - w).abs() < 1e-10, "step {t}: {got} vs {w}");
    }
}

#[test]
fn adamw_exempts_rates_and_norm_from_decay() {
    for kind in [ParamKind::Rate, ParamKind::Norm] {
        let mut p = single(0.7, kind);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() });
        opt.step(&mut p, &grad_map(0.0)).unwrap();
        assert_eq!(p.tensor("w").unwrap().data()[0], 0.7);
    }
    let mut p = single(0.7, ParamKind::Weight);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..Default::default() });
    opt.step(&mut p, &grad_map(0.0)).unwrap();
    assert!((p.tensor("w").unwrap().data()[0] - 0.7 * (1.0 - 0.0005)).abs() < 1e-15);
}

#[test]
fn adamw_rejects_mismatched_gradient() {
    let mut p = single(1.0, ParamKind::Weight);
    let mut opt = AdamW::<f64>::new(AdamWConfig::default());
    let bad = IndexMap::from([("w".to_string(), Tensor::zeros(&[2]).unwrap())]);
    assert!(opt.step(&mut p, &bad).is_err());
    assert_eq!(opt.steps(), 0);
}

#[test]
fn adamw_skips_frozen_entries() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(1.0), ParamKind::Rate, false).unwrap();
    let mut opt = AdamW::<f64>::new(AdamWConfig::default());
    opt.step(&mut p, &grad_map(5.0)).unwrap();
    assert_eq!(p.tensor("w").unwrap().data()[0], 1.0);
}
