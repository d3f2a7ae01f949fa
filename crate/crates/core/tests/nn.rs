mod common;

use common::{gather_fd_check, grad_check, primitive_fd_case, random_tensor};
use ltd_lab::nn::{Graph, NnError, ParamStore, Tensor, Var};
use ltd_lab::rng::StreamRng;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn softmax_saturates() {
    let mut g = Graph::new();
    let x = g.constant(t(vec![1, 3], &[1000.0, 0.0, 0.0])).unwrap();
    let y = g.softmax(x).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300 && v[2] < 1e-300);
}

#[test]
fn layernorm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(t(vec![2, 4], &[3.0; 8])).unwrap();
    let gamma = g.constant(t(vec![4], &[1.0; 4])).unwrap();
    let beta = g.constant(t(vec![4], &[0.0; 4])).unwrap();
    let y = g.layernorm(x, gamma, beta).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gather_and_combine_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(vec![4, 2], &[0., 1., 2., 3., 4., 5., 6., 7.])).unwrap();
    let k = g.gather_rows(x, &[0, 2]).unwrap();
    assert_eq!(g.value(k).data(), &[0., 1., 4., 5.]);
    let all = g.gather_rows(x, &[0, 1, 2, 3]).unwrap();
    assert_eq!(g.value(all).data(), g.value(x).data());
    let back = g.combine_rows(k, x, &[0, 2], &[1, 3]).unwrap();
    assert_eq!(g.value(back).data(), g.value(x).data());

    let y = g.constant(t(vec![4, 2], &[9.; 8])).unwrap();
    let full = g.combine_rows(y, x, &[0, 1, 2, 3], &[]).unwrap();
    assert_eq!(g.value(full).data(), &[9.; 8]);
}

#[test]
fn gather_rejects_bad_indices() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::zeros(vec![4, 2])).unwrap();
    assert!(matches!(g.gather_rows(x, &[2, 1]), Err(NnError::Index(_))));
    assert!(matches!(g.gather_rows(x, &[1, 1]), Err(NnError::Index(_))));
    assert!(matches!(g.gather_rows(x, &[4]), Err(NnError::Index(_))));
    let k = g.gather_rows(x, &[0, 2]).unwrap();
    assert!(g.combine_rows(k, x, &[0, 2], &[1]).is_err());
    assert!(g.combine_rows(k, x, &[0, 2], &[1, 2]).is_err());
    assert!(g.combine_rows(k, x, &[0, 3], &[1, 2]).is_ok());
}

#[test]
fn combine_backward_passes_dropped_rows_through() {
    // loss = sum(combine(gather(X), X)); through the dropped path dX is 1 at
    // dropped rows and 0 at kept rows
    let mut g = Graph::new();
    let x_for_gather = g.constant(Tensor::<f64>::full(vec![5, 3], 0.5)).unwrap();
    let x = g.param(Tensor::full(vec![5, 3], 0.5)).unwrap();
    let k = g.gather_rows(x_for_gather, &[1, 3]).unwrap();
    let out = g.combine_rows(k, x, &[1, 3], &[0, 2, 4]).unwrap();
    let loss = g.sum(out).unwrap();
    let grads = g.backward(loss).unwrap();
    let dx = grads.get(x).unwrap();
    for row in 0..5 {
        let expect = if row == 1 || row == 3 { 0.0 } else { 1.0 };
        assert!(dx[row * 3..row * 3 + 3].iter().all(|&v| v == expect), "row {row}");
    }
    let rel = grad_check(&[Tensor::full(vec![5, 3], 0.5)], |g, v| {
        let k = k_const(g);
        let out = g.combine_rows(k, v[0], &[1, 3], &[0, 2, 4]).unwrap();
        g.sum(out).unwrap()
    });
    assert!(rel < TOL);
}

fn k_const(g: &mut Graph<f64>) -> Var {
    g.constant(Tensor::full(vec![2, 3], 0.25)).unwrap()
}

#[test]
fn gather_gradient_matches_finite_differences() {
    let rel = gather_fd_check();
    assert!(rel < TOL, "{rel}");
}

/// 50 random small cases spread over every primitive.
#[test]
fn primitives_match_finite_differences() {
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let rel = primitive_fd_case(case);
        assert!(rel < TOL, "case {case}: rel error {rel}");
        worst = worst.max(rel);
    }
    eprintln!("worst primitive relative error {worst:.2e}");
}

#[test]
fn causal_attention_ignores_future_rows() {
    let mut rng = StreamRng::from_key(8);
    let q = random_tensor(&mut rng, vec![4, 4], 1.0);
    let k = random_tensor(&mut rng, vec![4, 4], 1.0);
    let v = random_tensor(&mut rng, vec![4, 4], 1.0);
    let run = |v: &Tensor<f64>| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap(), g.constant(v.clone()).unwrap());
        let y = g.attention(qv, kv, vv, 1, 2, true).unwrap();
        g.value(y).clone()
    };
    let base = run(&v);
    let mut v2 = v.clone();
    v2.data_mut()[12..16].iter_mut().for_each(|x| *x += 5.0);
    let changed = run(&v2);
    assert_eq!(&base.data()[..12], &changed.data()[..12]);
    assert_ne!(&base.data()[12..], &changed.data()[12..]);
}

#[test]
fn dropout_rate_zero_is_identity_and_mean_preserving() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![10, 10], 1.0)).unwrap();
    let mut rng = StreamRng::from_key(1);
    assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);

    let mut total = 0.0;
    let trials = 10_000;
    for i in 0..trials {
        let mut rng = StreamRng::from_key(i);
        let y = g.dropout(x, 0.1, &mut rng).unwrap();
        total += g.value(y).data().iter().sum::<f64>() / 100.0;
        if g.len() > 64 {
            g = Graph::new();
            let _ = g.constant(Tensor::<f64>::full(vec![10, 10], 1.0)).unwrap();
        }
    }
    let mean = total / trials as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
}

#[test]
fn rejects_non_finite_and_mismatched_inputs() {
    let mut g = Graph::<f64>::new();
    assert!(matches!(g.constant(t(vec![2], &[1.0, f64::NAN])), Err(NnError::NonFinite(_))));
    let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(NnError::Shape(_))));
    let c = g.constant(Tensor::zeros(vec![3, 2])).unwrap();
    assert!(matches!(g.add(a, c), Err(NnError::Shape(_))));
    assert!(matches!(g.cross_entropy(a, &[None, None]), Err(NnError::EmptyTargets)));
    let big = g.constant(Tensor::full(vec![1, 2], 1e300)).unwrap();
    let w = g.constant(Tensor::full(vec![2, 1], 1e300)).unwrap();
    assert!(matches!(g.matmul(big, w), Err(NnError::NonFinite("matmul"))));
    assert!(matches!(g.backward(a), Err(NnError::NotScalar(_))));
}

#[test]
fn bounded_fuzz_stays_finite() {
    for case in 0..1000u64 {
        let mut rng = StreamRng::from_key(case);
        let (rows, d) = (2 + rng.below(6) as usize, 4);
        let mut g = Graph::new();
        let x = g.param(random_tensor(&mut rng, vec![rows, d], 10.0)).unwrap();
        let w = g.param(random_tensor(&mut rng, vec![d, d], 10.0)).unwrap();
        let gamma = g.param(random_tensor(&mut rng, vec![d], 2.0)).unwrap();
        let beta = g.param(random_tensor(&mut rng, vec![d], 2.0)).unwrap();
        let h = g.layernorm(x, gamma, beta).unwrap();
        let h = g.matmul(h, w).unwrap();
        let h = g.gelu(h).unwrap();
        let a = g.attention(h, h, h, 1, 2, case % 2 == 0).unwrap();
        let s = g.softmax(a).unwrap();
        let targets: Vec<Option<usize>> = (0..rows).map(|i| Some(i % d)).collect();
        let loss = g.cross_entropy(s, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        for v in [x, w, gamma, beta] {
            assert!(grads.get(v).unwrap().iter().all(|g| g.is_finite()), "case {case}");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StreamRng::from_key(4);
    let mut store = ParamStore::<f32>::new();
    store.add("a", random_tensor(&mut rng, vec![3, 5], 1.0).cast()).unwrap();
    store.add("b.bias", random_tensor(&mut rng, vec![7], 1e-30).cast()).unwrap();
    store.save(dir.path()).unwrap();
    let back = ParamStore::<f32>::load(dir.path()).unwrap();
    for (x, y) in store.iter().zip(back.iter()) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.tensor.shape(), y.tensor.shape());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.tensor), bits(&y.tensor));
    }
    assert!(ParamStore::<f64>::load(dir.path()).is_err());
    assert!(store.add("a", Tensor::zeros(vec![1])).is_err());
}

proptest! {
    #[test]
    fn combine_of_gather_is_identity(rows in 1usize..24, d in 1usize..6, mask in proptest::collection::vec(any::<bool>(), 24), seed in any::<u64>()) {
        let mut rng = StreamRng::from_key(seed);
        let x = random_tensor(&mut rng, vec![rows, d], 5.0);
        let kept: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
        let dropped: Vec<usize> = (0..rows).filter(|&r| !mask[r]).collect();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let k = g.gather_rows(xv, &kept).unwrap();
        let y = g.combine_rows(k, xv, &kept, &dropped).unwrap();
        prop_assert_eq!(g.value(y), &x);
    }
}
