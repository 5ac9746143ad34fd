use std::time::Instant;

use bimatch_core::gradsuite::{run_suite, CASES};
use bimatch_core::losses::cross_entropy;
use bimatch_core::numkernel::gradcheck::{check_gradients, DEFAULT_FLOOR};
use bimatch_core::numkernel::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn every_case_passes_on_ten_instances_within_two_minutes() {
    let started = Instant::now();
    let entries = run_suite(10, 2024).unwrap();
    let secs = started.elapsed().as_secs_f64();
    assert_eq!(entries.len(), CASES.len());
    for e in &entries {
        println!("{:<16} n={} max_rel={:.2e}", e.name, e.instances, e.check.max_rel_error);
        assert_eq!(e.instances, 10);
        assert!(e.check.checked > 0, "{} checked nothing", e.name);
        assert!(e.passes(), "{}: {:e}", e.name, e.check.max_rel_error);
    }
    assert!(secs < 120.0, "suite took {secs:.1}s");
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..28).map(|_| rng.random_range(-2.0..2.0)).collect();
    let logits = Tensor::matrix(4, 7, logits).unwrap();
    let labels = [3, 0, 6, 2];

    let report = check_gradients(
        std::slice::from_ref(&logits),
        |g, v| cross_entropy(g, v[0], &labels),
        1e-5,
        DEFAULT_FLOOR,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{:e}", report.max_rel_error);

    // closed form: (softmax − one-hot) / rows
    let g = Graph::new();
    let x = g.input(logits.clone());
    g.backward(cross_entropy(&g, x, &labels).unwrap()).unwrap();
    let grad = g.grad(x).unwrap();
    for r in 0..4 {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for c in 0..7 {
            let want = (row[c].exp() / z - f64::from(u8::from(c == labels[r]))) / 4.0;
            assert!((grad.get(r, c) - want).abs() < 1e-14);
        }
    }
}
