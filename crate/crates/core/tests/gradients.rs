use bicameral::gradcheck::{self, DEFAULT_STEP};
use bicameral::graph::BCE_EPS;
use bicameral::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_case_in_the_suite_passes() {
    let reports = gradcheck::suite(11).unwrap();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    for name in [
        "matmul",
        "softmax_axis1",
        "layer_norm",
        "bicameral_loss",
        "doppel_loss",
    ] {
        assert!(reports.iter().any(|r| r.name == name), "{name} missing");
    }
}

#[test]
fn matmul_sum_gradient_is_row_sums_of_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
    let b = Tensor::uniform(&[4, 2], -2.0, 2.0, &mut rng);
    let report = gradcheck::check(
        "matmul",
        &[a.clone(), b.clone()],
        DEFAULT_STEP,
        1e-6,
        &|g, v| {
            let c = g.matmul(v[0], v[1])?;
            Ok(g.sum(c))
        },
    )
    .unwrap();
    assert!(report.passed, "{report:?}");

    let mut g = Graph::new();
    let av = g.param(a);
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    let grad = g.grad(av).unwrap();
    for i in 0..3 {
        for r in 0..4 {
            assert_eq!(grad.row(i)[r], b.row(r).iter().sum::<f64>());
        }
    }
}

#[test]
fn softmax_matches_direct_formula() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.softmax(x, 1).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    for (k, v) in g.value(s).data().iter().enumerate() {
        assert!((v - ((k + 1) as f64).exp() / z).abs() < 1e-15);
    }
    let y = g.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let s = g.softmax(y, 1).unwrap();
    assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);
    assert!(g.value(s).data()[1].abs() < 1e-12);
}

#[test]
fn layer_norm_random_row_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let row = Tensor::uniform(&[1, 16], -2.0, 2.0, &mut rng);
    let m = row.data().iter().sum::<f64>() / 16.0;
    let v = row.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
    let mut g = Graph::new();
    let x = g.constant(row);
    let gain = g.constant(Tensor::full(&[16], 1.0));
    let bias = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    let d = g.value(y).data();
    let mean = d.iter().sum::<f64>() / 16.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-12);
    // the eps guard leaves variance v / (v + eps) rather than exactly 1
    assert!((var - v / (v + 1e-5)).abs() < 1e-12, "{var}");
    assert!((var - 1.0).abs() < 1e-4, "{var}");
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = Tensor::uniform(&[3, 5], -2.0, 2.0, &mut rng);
    let targets = [4, 0, 2];
    let mut expect = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        expect += lse - row[t];
    }
    expect /= 3.0;
    let mut g = Graph::new();
    let l = g.constant(logits);
    let ce = g.cross_entropy(l, &targets).unwrap();
    assert!((g.value(ce).item().unwrap() - expect).abs() < 1e-12);
}

#[test]
fn binary_cross_entropy_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let p = Tensor::uniform(&[4, 2], 0.05, 0.95, &mut rng);
    let y = Tensor::uniform(&[4, 2], 0.0, 1.0, &mut rng);
    let expect = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum::<f64>()
        / 8.0;
    let mut g = Graph::new();
    let pv = g.constant(p);
    let bce = g.binary_cross_entropy(pv, &y).unwrap();
    assert!((g.value(bce).item().unwrap() - expect).abs() < 1e-12);

    let mut g = Graph::new();
    let one = g.constant(Tensor::full(&[1, 1], 1.0));
    let bce = g
        .binary_cross_entropy(one, &Tensor::full(&[1, 1], 1.0))
        .unwrap();
    let v = g.value(bce).item().unwrap();
    assert!((v + (1.0 - BCE_EPS).ln()).abs() < 1e-15);
}
