use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    gradcheck::random_tensor(rng, shape)
}

fn run_gradchecks<T: Float>(tolerance: f64, seed: u64) {
    for r in gradcheck::run_suite::<T>(gradcheck::TRIALS, seed) {
        assert!(r.worst < tolerance, "{}: max relative error {:e} exceeds {tolerance:e}", r.name, r.worst);
    }
}

#[test]
fn gradcheck_f32() {
    run_gradchecks::<f32>(1e-3, 7);
}

#[test]
fn gradcheck_f64() {
    run_gradchecks::<f64>(1e-5, 11);
}

#[test]
fn matmul_examples() {
    let x: Tensor<f32> = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    assert_eq!(Tensor::identity(3).matmul(&x).unwrap(), x);
    let a = Tensor::new(vec![1, 1], vec![2.0f32]).unwrap();
    let b = Tensor::new(vec![1, 1], vec![3.0f32]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[6.0]);
    let bad = Tensor::<f32>::zeros(&[3, 3]);
    assert!(matches!(
        bad.matmul(&Tensor::zeros(&[2, 2])),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn layer_norm_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.constant(Tensor::filled(&[1, 4], 3.5));
    let g = tape.constant(Tensor::filled(&[4], 1.0));
    let b = tape.constant(Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    for (out, bias) in tape.value(y).data().iter().zip([0.1, -0.2, 0.3, 0.0]) {
        assert!((out - bias).abs() < 1e-9);
    }

    let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 4.0, 9.0]).unwrap());
    let zero = tape.constant(Tensor::zeros(&[4]));
    let y = tape.layer_norm(x, g, zero, 1e-5).unwrap();
    let out = tape.value(y).data();
    let mean: f64 = out.iter().sum::<f64>() / 4.0;
    let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-4);

    let wrong = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.layer_norm(x, wrong, zero, 1e-5).is_err());
}

#[test]
fn gelu_examples() {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![0.0, 10.0, -10.0]).unwrap());
    let y = tape.gelu(x);
    let out = tape.value(y).data();
    assert_eq!(out[0], 0.0);
    assert!((out[1] - 10.0).abs() < 1e-4);
    assert!(out[2].abs() < 1e-4);
}

#[test]
fn cross_entropy_examples() {
    let mut tape: Tape<f64> = Tape::new();
    let uniform = tape.constant(Tensor::filled(&[1, 4], 0.3));
    let loss = tape.cross_entropy(uniform, &[2]).unwrap();
    assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);

    let mut tape: Tape<f32> = Tape::new();
    let sharp = tape.leaf(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let loss = tape.cross_entropy(sharp, &[0]).unwrap();
    let value = tape.value(loss).data()[0];
    assert!(value.is_finite() && value.abs() < 1e-6);

    // Gradient is softmax − onehot.
    let mut tape: Tape<f64> = Tape::new();
    let logits = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, &[1]).unwrap();
    tape.backward(loss).unwrap();
    let probs = softmax_rows(&logits);
    let grad = tape.grad(l);
    for (j, (&g, &p)) in grad.data().iter().zip(probs.data()).enumerate() {
        let onehot = if j == 1 { 1.0 } else { 0.0 };
        assert!((g - (p - onehot)).abs() < 1e-12);
    }

    assert!(matches!(
        tape.cross_entropy(l, &[3]),
        Err(TensorError::IndexOutOfRange { .. })
    ));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let t: Tensor<f32> = random_tensor(&mut rng, &[4, 9]);
        let s = softmax_rows(&t.map(|v| v * 50.0));
        for r in 0..4 {
            let total: f32 = s.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_contracts() {
    let mut tape: Tape<f64> = Tape::new();
    let p = tape.leaf(Tensor::filled(&[2], 1.0));
    let unused = tape.leaf(Tensor::filled(&[3], 5.0));
    let s = tape.sum(p);
    let loss = tape.scale(s, 3.0);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(p).data(), &[3.0, 3.0]);
    assert_eq!(tape.grad(unused).data(), &[0.0, 0.0, 0.0]);

    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(p).data(), &[6.0, 6.0]);
    tape.zero_grad();
    assert_eq!(tape.grad(p).data(), &[0.0, 0.0]);

    assert!(matches!(
        tape.backward(p),
        Err(TensorError::NonScalarLoss(_))
    ));
}

#[test]
fn attention_padding_is_inert() {
    // A segment with masked trailing keys matches the trimmed segment.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q: Tensor<f32> = random_tensor(&mut rng, &[6, 8]);
    let k: Tensor<f32> = random_tensor(&mut rng, &[6, 8]);
    let v: Tensor<f32> = random_tensor(&mut rng, &[6, 8]);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let padded = AttentionSpec {
        segments: vec![(0, 6)],
        heads: 2,
        key_mask: Some(vec![true, true, true, true, false, false]),
    };
    let full = tape.attention(qv, kv, vv, &padded).unwrap();
    let trimmed = AttentionSpec {
        segments: vec![(0, 4)],
        heads: 2,
        key_mask: None,
    };
    let short = tape.attention(qv, kv, vv, &trimmed).unwrap();
    for r in 0..4 {
        for (a, b) in tape.value(full).row(r).iter().zip(tape.value(short).row(r)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn dropout_is_inverted_and_differentiable() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Tensor::filled(&[1000], 1.0));
    let y = tape.dropout(x, 0.1, &mut rng);
    let out = tape.value(y).data().to_vec();
    assert!(out.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-12));
    let dropped = out.iter().filter(|&&v| v == 0.0).count();
    assert!((50..150).contains(&dropped));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).data(), out.as_slice());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a: Tensor<f32> = random_tensor(&mut rng, &[16, 16]);
        let b: Tensor<f32> = random_tensor(&mut rng, &[16, 16]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let c = tape.matmul(av, bv).unwrap();
        let g = tape.gelu(c);
        tape.value(g).clone()
    };
    assert_eq!(run().data(), run().data());
}
