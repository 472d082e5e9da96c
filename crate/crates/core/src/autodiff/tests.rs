use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn add_and_mul_by_zero() {
    let mut t = Tape::new();
    let a = t.var(Tensor::from_slice(&[1.0, 2.0]));
    let b = t.constant(Tensor::from_slice(&[3.0, 4.0]));
    let c = t.add(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[4.0, 6.0]);

    let zero = t.constant(Tensor::scalar(0.0));
    let z = t.mul(a, zero).unwrap();
    let s = t.sum(z).unwrap();
    assert_eq!(t.value(z).data(), &[0.0, 0.0]);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn division_by_zero_is_an_error() {
    let mut t = Tape::new();
    let a = t.var(Tensor::from_slice(&[1.0]));
    let b = t.constant(Tensor::from_slice(&[0.0]));
    assert!(matches!(t.div(a, b), Err(Error::Numeric(_))));
}

#[test]
fn broadcasting_only_accepts_scalars() {
    let mut t = Tape::new();
    let a = t.var(Tensor::from_slice(&[1.0, 2.0, 3.0]));
    let b = t.var(Tensor::from_slice(&[1.0, 2.0]));
    assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch(_))));
}

#[test]
fn overflow_raises_numeric_error() {
    let mut t = Tape::new();
    let a = t.var(Tensor::from_slice(&[1000.0]));
    assert!(matches!(t.exp(a), Err(Error::Numeric(_))));
}

#[test]
fn exp_derivative_at_zero() {
    let mut t = Tape::new();
    let x = t.var(Tensor::scalar(0.0));
    let y = t.exp(x).unwrap();
    let g = t.backward(y).unwrap();
    let analytic = g.get(x).unwrap().item();
    let h = 1e-5;
    let fd = ((h as f64).exp() - (-h as f64).exp()) / (2.0 * h);
    assert!((analytic - 1.0).abs() < 1e-12);
    assert!((analytic - fd).abs() < 1e-6);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]).map(|v| v.signum() * (v.abs() + 0.5));
        let pos = rand_tensor(&mut rng, &[3, 4]).map(|v| v.abs() + 0.1);
        let r = check_gradients(
            |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[2])?;
                let m = t.mul(d, v[0])?;
                let q = t.div(m, v[1])?;
                let e = t.exp(q)?;
                let sq = t.square(e)?;
                let r = t.sqrt(v[2])?;
                let n = t.neg(r)?;
                let all = t.add(sq, n)?;
                let sc = t.scale(all, 0.7)?;
                t.sum(sc)
            },
            &[a, b, pos],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

#[test]
fn matmul_examples_and_gradients() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = t.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = rand_tensor(&mut rng, &[3, 3]);
    let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let i = t.constant(eye);
    let mv = t.constant(m.clone());
    let p = t.matmul(i, mv).unwrap();
    assert_eq!(t.value(p), &m);

    let bad = t.constant(Tensor::zeros(vec![2, 2]));
    assert!(matches!(t.matmul(mv, bad), Err(Error::ShapeMismatch(_))));

    for _ in 0..20 {
        let a = rand_tensor(&mut rng, &[4, 5]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let r = check_gradients(
            |t, v| {
                let p = t.matmul(v[0], v[1])?;
                let q = t.mul(p, v[2])?;
                t.sum(q)
            },
            &[a, b, w],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }
}

#[test]
fn conv2d_examples() {
    let mut t = Tape::new();
    let x = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
    let xv = t.constant(x.clone());
    let w = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let y = t.conv2d(xv, w, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);

    let ones = t.constant(Tensor::full(vec![1, 4, 4], 1.0));
    let k = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let y = t.conv2d(ones, k, None, 2, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 2, 2]);
    assert_eq!(t.value(y).data(), &[4.0; 4]);

    let big = t.constant(Tensor::full(vec![1, 1, 5, 5], 1.0));
    assert!(matches!(t.conv2d(ones, big, None, 1, 0), Err(Error::InvalidConfig(_))));
    assert!(matches!(t.conv2d(ones, k, None, 0, 0), Err(Error::InvalidConfig(_))));
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (i, &(stride, pad)) in [(1, 0), (1, 1), (2, 1), (2, 0)].iter().cycle().take(20).enumerate() {
        let batched = i % 2 == 0;
        let x = if batched {
            rand_tensor(&mut rng, &[2, 3, 8, 8])
        } else {
            rand_tensor(&mut rng, &[3, 8, 8])
        };
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let out_shape: Vec<usize> = {
            let mut t = Tape::new();
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv2d(xv, wv, None, stride, pad).unwrap();
            t.value(y).shape().to_vec()
        };
        let probe = rand_tensor(&mut rng, &out_shape);
        let r = check_gradients(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                let p = t.constant(probe.clone());
                let q = t.mul(y, p)?;
                let s = t.square(q)?;
                t.sum(s)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "stride {stride} pad {pad}: {r:?}");
    }
}

#[test]
fn activation_definitions() {
    let a = Activation::Relu;
    assert_eq!(a.apply(-2.0), 0.0);
    assert_eq!(a.apply(3.0), 3.0);
    assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
    assert_eq!(Activation::LeakyRelu.apply(-1.0), -0.01);

    let mut t = Tape::new();
    let x = t.var(Tensor::scalar(0.0));
    let y = t.activation(Activation::Tanh, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 1.0);
    let fd = (1e-5f64.tanh() - (-1e-5f64).tanh()) / 2e-5;
    assert!((fd - 1.0).abs() < 1e-9);

    // relu subgradient at the kink
    let mut t = Tape::new();
    let x = t.var(Tensor::scalar(0.0));
    let y = t.activation(Activation::Relu, x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 0.0);
}

#[test]
fn activation_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Linear,
    ] {
        for _ in 0..20 {
            // keep away from the relu kink
            let x = rand_tensor(&mut rng, &[10]).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
            let w = rand_tensor(&mut rng, &[10]);
            let r = check_gradients(
                |t, v| {
                    let y = t.activation(kind, v[0])?;
                    let c = t.constant(w.clone());
                    let p = t.mul(y, c)?;
                    t.sum(p)
                },
                &[x],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{kind:?}: {r:?}");
        }
    }
}

#[test]
fn batch_norm_examples() {
    let mut t = Tape::new();
    let x = t.var(Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap());
    let g = t.var(Tensor::from_slice(&[1.0]));
    let b = t.var(Tensor::from_slice(&[0.0]));
    let mut st = RunningStats::new(1);
    let y = t.batch_norm(x, g, b, &mut st, true).unwrap();
    for (o, e) in t.value(y).data().iter().zip([-1.0, 1.0]) {
        assert!((o - e).abs() < 1e-5);
    }
    // running stats moved by momentum 0.1 toward mean 0 / unbiased var 2
    assert!((st.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = t.var(rand_tensor(&mut rng, &[4, 3, 2, 2]));
    let g0 = t.var(Tensor::zeros(vec![3]));
    let beta = t.var(Tensor::from_slice(&[0.1, -0.2, 0.3]));
    let mut st = RunningStats::new(3);
    let y = t.batch_norm(x, g0, beta, &mut st, true).unwrap();
    for (i, v) in t.value(y).data().iter().enumerate() {
        let c = (i / 4) % 3;
        assert_eq!(*v, [0.1, -0.2, 0.3][c]);
    }

    let single = t.var(rand_tensor(&mut rng, &[1, 3]));
    let g1 = t.var(Tensor::full(vec![3], 1.0));
    let res = t.batch_norm(single, g1, beta, &mut st, true);
    assert!(matches!(res, Err(Error::InvalidConfig(_))));
    assert!(t.batch_norm(single, g1, beta, &mut st, false).is_ok());
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..20 {
        let shape: &[usize] = if i % 2 == 0 { &[8, 3] } else { &[8, 2, 2, 2] };
        let c = shape[1];
        let x = rand_tensor(&mut rng, shape);
        let gamma = rand_tensor(&mut rng, &[c]);
        let beta = rand_tensor(&mut rng, &[c]);
        let probe = rand_tensor(&mut rng, shape);
        let training = i % 4 != 3;
        let r = check_gradients(
            |t, v| {
                let mut st = RunningStats::new(c);
                st.mean = vec![0.1; c];
                st.var = vec![0.7; c];
                let y = t.batch_norm(v[0], v[1], v[2], &mut st, training)?;
                let p = t.constant(probe.clone());
                let q = t.mul(y, p)?;
                let e = t.exp(q)?;
                t.sum(e)
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

#[test]
fn backward_of_sum_is_all_ones_and_requires_scalar() {
    let mut t = Tape::new();
    let x = t.var(Tensor::from_slice(&[1.0, 2.0, 3.0]));
    let s = t.sum(x).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
}

fn sigmoid_matmul_tape(a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let mut t = Tape::new();
    let av = t.var(a.clone());
    let bv = t.var(b.clone());
    let p = t.matmul(av, bv).unwrap();
    let s = t.activation(Activation::Sigmoid, p).unwrap();
    let m = t.mean(s).unwrap();
    let g = t.backward(m).unwrap();
    (g.get(av).unwrap().clone(), g.get(bv).unwrap().clone())
}

#[test]
fn composed_gradients_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let r = check_gradients(
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let s = t.activation(Activation::Sigmoid, p)?;
            t.mean(s)
        },
        &[a.clone(), b.clone()],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5);

    let (ga1, gb1) = sigmoid_matmul_tape(&a, &b);
    let (ga2, gb2) = sigmoid_matmul_tape(&a, &b);
    assert_eq!(ga1.data(), ga2.data());
    assert_eq!(gb1.data(), gb2.data());
}

#[test]
fn reductions_reshape_bias_and_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[2, 3, 4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let r = check_gradients(
            |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                let m = t.mean_axis1(y)?;
                let r = t.reshape(m, &[8])?;
                let l1 = t.bce_with_logits(r, 1.0)?;
                let l0 = t.bce_with_logits(y, 0.0)?;
                let s = t.add(l1, l0)?;
                let sq = t.square(y)?;
                let mm = t.mean(sq)?;
                t.add(s, mm)
            },
            &[x, bias],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    // bce at probability one half
    let mut t = Tape::new();
    let z = t.var(Tensor::zeros(vec![4]));
    let l = t.bce_with_logits(z, 1.0).unwrap();
    assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
}
