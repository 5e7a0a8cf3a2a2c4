use super::*;
use crate::error::CapError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(dims.to_vec(), data).unwrap()
}

#[test]
fn softmax_symmetry() {
    let tape = Tape::<f64>::inference();
    let x = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
    let s = tape.softmax(&x, 0).unwrap();
    assert_eq!(s.to_vec(), vec![0.5, 0.5]);
}

#[test]
fn matmul_identity() {
    let tape = Tape::inference();
    let eye = Tensor::new(vec![3, 3], vec![1.0f64, 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[3, 3], &mut rng);
    let out = tape.matmul(&eye, &a).unwrap();
    assert_eq!(out.to_vec(), a.to_vec());
}

#[test]
fn gelu_relu_fixed_points() {
    let tape = Tape::<f64>::inference();
    let x = Tensor::new(vec![2], vec![0.0f64, -1.0]).unwrap();
    assert_eq!(tape.gelu(&x).unwrap().to_vec()[0], 0.0);
    assert_eq!(tape.relu(&x).unwrap().to_vec()[1], 0.0);
}

#[test]
fn shape_error_names_both_dims() {
    let tape = Tape::<f64>::inference();
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![4, 5]);
    let err = tape.matmul(&a, &b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "got: {msg}");
}

#[test]
fn backward_square_sum() {
    let x = Tensor::param(vec![1], vec![3.0f64]).unwrap();
    let tape = Tape::new();
    let loss = tape.sum(&tape.square(&x).unwrap()).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![6.0]);
}

#[test]
fn backward_softmax_sum_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = rand_tensor(&[5], &mut rng);
    z.set_requires_grad(true);
    let tape = Tape::new();
    let loss = tape.sum(&tape.softmax(&z, 0).unwrap()).unwrap();
    tape.backward(&loss).unwrap();
    for g in z.grad().unwrap() {
        assert!(g.abs() < 1e-12, "softmax sum gradient should vanish, got {g}");
    }
}

#[test]
fn matmul_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = rand_tensor(&[5, 4], &mut rng);
    let c = rand_tensor(&[4, 5], &mut rng);
    let point = rand_tensor(&[4, 5], &mut rng);
    let report = grad_check(
        |tape, x| {
            let h = tape.matmul(x, &b)?;
            let h = tape.matmul(&h, &c)?;
            let h = tape.gelu(&h)?;
            tape.sum(&h)
        },
        &point,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report}");
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let point = rand_tensor(&[3, 3], &mut rng);
    let w = rand_tensor(&[3, 3], &mut rng);
    let f = |tape: &Tape<f64>, x: &Tensor<f64>| tape.sum(&tape.square(&tape.matmul(x, &w).unwrap()).unwrap());
    let g = |tape: &Tape<f64>, x: &Tensor<f64>| tape.sum(&tape.gelu(x).unwrap());

    let grad_of = |h: &dyn Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>| -> Vec<f64> {
        let x = point.detach();
        x.set_requires_grad(true);
        let tape = Tape::new();
        let loss = h(&tape, &x).unwrap();
        tape.backward(&loss).unwrap();
        x.grad().unwrap()
    };

    let (a, b) = (2.5f64, -1.25f64);
    let gf = grad_of(&|t, x| f(t, x));
    let gg = grad_of(&|t, x| g(t, x));
    let gcombo = grad_of(&|t: &Tape<f64>, x: &Tensor<f64>| {
        let fa = t.scale(&f(t, x)?, a)?;
        let gb = t.scale(&g(t, x)?, b)?;
        t.add(&fa, &gb)
    });
    for i in 0..gcombo.len() {
        assert!((gcombo[i] - (a * gf[i] + b * gg[i])).abs() < 1e-6);
    }
}

#[test]
fn grad_accumulates_across_backward_calls() {
    let x = Tensor::param(vec![1], vec![3.0f64]).unwrap();
    let tape = Tape::new();
    let loss = tape.sum(&tape.square(&x).unwrap()).unwrap();
    tape.backward(&loss).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![12.0], "two backward passes double the grad");
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_error_paths() {
    let x = Tensor::param(vec![2], vec![1.0f64, 2.0]).unwrap();
    let tape = Tape::new();
    let y = tape.square(&x).unwrap();
    assert!(matches!(tape.backward(&y), Err(CapError::NonScalarLoss(_))));

    let detached = Tensor::scalar(1.0f64);
    assert!(matches!(tape.backward(&detached), Err(CapError::DetachedLoss)));

    let loss = tape.sum(&y).unwrap();
    tape.clear();
    assert!(
        matches!(tape.backward(&loss), Err(CapError::DetachedLoss)),
        "backward on stale outputs after clear must fail"
    );
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[6, 6], &mut rng);
    let w = rand_tensor(&[6, 6], &mut rng);
    let run = || {
        let tape = Tape::inference();
        let h = tape.matmul(&x, &w).unwrap();
        let h = tape.softmax(&h, 1).unwrap();
        h.to_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn grad_check_constant_is_zero() {
    let point = Tensor::new(vec![3], vec![0.3f64, -0.2, 0.9]).unwrap();
    let report = grad_check(
        |tape, x| {
            let z = tape.sub(x, x)?; // constant 0 regardless of x
            tape.sum(&z)
        },
        &point,
        1e-5,
        1e-9,
    )
    .unwrap();
    assert!(report.passed);
    assert!(report.tape_grad.iter().all(|&g| g == 0.0));
}

#[test]
fn grad_check_rejects_nondeterminism() {
    use std::sync::atomic::{AtomicU64, Ordering};
    let calls = AtomicU64::new(0);
    let point = Tensor::new(vec![1], vec![1.0f64]).unwrap();
    let err = grad_check(
        |tape, x| {
            let jitter = calls.fetch_add(1, Ordering::Relaxed) as f64 * 0.1;
            tape.sum(&tape.scale(x, 1.0 + jitter)?)
        },
        &point,
        1e-5,
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, CapError::NonDeterministic(_)));
}

#[test]
fn transpose_roundtrip_and_slice_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    let tape = Tape::inference();
    let t = tape.transpose(&x, &[2, 0, 1]).unwrap();
    assert_eq!(t.dims(), &[4, 2, 3]);
    let back = tape.transpose(&t, &[1, 2, 0]).unwrap();
    assert_eq!(back.to_vec(), x.to_vec());

    let a = tape.slice(&x, 1, 0, 2).unwrap();
    let b = tape.slice(&x, 1, 2, 3).unwrap();
    let joined = tape.concat(&[&a, &b], 1).unwrap();
    assert_eq!(joined.to_vec(), x.to_vec());
}

#[test]
fn tile_and_embedding_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let point = rand_tensor(&[3, 2], &mut rng);
    let report = grad_check(
        |tape, x| {
            let t = tape.tile(x, 4)?;
            tape.sum(&tape.square(&t)?)
        },
        &point,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "tile: {report}");

    let report = grad_check(
        |tape, x| {
            let e = tape.embedding_lookup(x, &[0, 2, 2, 1])?;
            tape.sum(&tape.square(&e)?)
        },
        &point,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "embedding_lookup: {report}");
}

#[test]
fn softmax_rows_sum_to_one_prop() {
    use proptest::prelude::*;
    proptest!(|(vals in proptest::collection::vec(-30.0f64..30.0, 12))| {
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let tape = Tape::inference();
        let s = tape.softmax(&x, 1).unwrap();
        let sv = s.to_vec();
        for row in sv.chunks(4) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            for &p in row {
                prop_assert!(p > 0.0 && p < 1.0 + 1e-12);
            }
        }
    });
}
