use proptest::prelude::*;

use super::*;

fn rand_f64(dims: &[usize], seed: u64) -> Tensor<f64> {
    rng::uniform(&mut rng::seeded(seed), dims, -1.0, 1.0)
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = a.shape2().unwrap();
    let (_, n) = b.shape2().unwrap();
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(i, p) * b.at(p, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

#[test]
fn matmul_identity_and_hand_cases() {
    let a = Tensor::<f32>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
    let r = Tensor::<f32>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
    let c = Tensor::<f32>::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
    assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = rand_f64(&[8, 8], 1);
    let b = rand_f64(&[8, 8], 2);
    let oracle = naive_matmul(&a, &b);
    assert!(matmul(&a, &b).unwrap().max_abs_diff(&oracle) < 1e-6);
    let got32 = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
    assert!(got32.cast::<f64>().max_abs_diff(&oracle) < 1e-5);
}

#[test]
fn matmul_rejects_mismatch() {
    let a = Tensor::<f32>::zeros(&[2, 3]);
    let b = Tensor::<f32>::zeros(&[2, 3]);
    assert!(matches!(matmul(&a, &b), Err(crate::ApexError::Shape(_))));
}

#[test]
fn softmax_cases() {
    let s = softmax_rows(&Tensor::<f32>::from_f64(&[1, 2], &[0.0, 0.0]).unwrap()).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax_rows(&Tensor::<f32>::from_f64(&[1, 2], &[1000.0, 1000.0]).unwrap()).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax_rows(&Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((s.data()[i] - v.exp() / z).abs() < 1e-12);
    }
}

#[test]
fn rms_norm_cases() {
    let zero = Tensor::<f32>::zeros(&[1, 4]);
    let ones = Tensor::<f32>::full(&[4], 1.0);
    assert_eq!(rms_norm(&zero, &ones, 1e-5).unwrap(), zero);
    let x = Tensor::<f32>::from_f64(&[1, 4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
    let out = rms_norm(&x, &Tensor::zeros(&[4]), 1e-5).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    let x = Tensor::<f64>::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
    let out = rms_norm(&x, &Tensor::full(&[2], 1.0), 0.0).unwrap();
    let rms = 12.5f64.sqrt();
    assert!((out.data()[0] - 3.0 / rms).abs() < 1e-12);
    assert!((out.data()[0] - 0.84853).abs() < 1e-5);
    assert!((out.data()[1] - 1.13137).abs() < 1e-5);
}

#[test]
fn silu_cases() {
    let x = Tensor::<f64>::from_f64(&[3], &[0.0, 100.0, 1.0]).unwrap();
    let y = silu(&x);
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 100.0).abs() < 1e-9);
    assert!((y.data()[2] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    assert!((y.data()[2] - 0.731059).abs() < 1e-6);
    assert_eq!(gelu(&Tensor::<f64>::zeros(&[1])).data(), &[0.0]);
}

#[test]
fn cross_entropy_cases() {
    let uniform = Tensor::<f64>::zeros(&[3, 4]);
    let l = cross_entropy_mean(&uniform, &[0, 1, 3]).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-12);

    let mut peaked = Tensor::<f32>::zeros(&[1, 5]);
    peaked.set(0, 2, 40.0);
    assert!(cross_entropy_mean(&peaked, &[2]).unwrap() < 1e-6);

    let logits = rand_f64(&[5, 7], 9).map(|v| 3.0 * v);
    let targets = [0, 6, 3, 3, 1];
    let mut oracle = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let z: f64 = (0..7).map(|c| logits.at(r, c).exp()).sum();
        oracle -= (logits.at(r, t).exp() / z).ln();
    }
    oracle /= 5.0;
    let got = cross_entropy_mean(&logits.cast::<f32>(), &targets).unwrap() as f64;
    assert!((got - oracle).abs() < 1e-5);

    assert!(matches!(
        cross_entropy_mean(&uniform, &[0, 1, 4]),
        Err(crate::ApexError::Index(_))
    ));
}

#[test]
fn backward_twice_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    assert!(matches!(tape.backward(y), Err(crate::ApexError::State(_))));
}

#[test]
fn grad_check_quadratic() {
    let err = grad_check(
        |t, v| t.mul(v[0], v[0]).map(|y| t.sum_all(y)),
        &[Tensor::scalar(3.0)],
        1e-5,
        CoordSample::All,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_matmul_sum() {
    let err = grad_check(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum_all(c))
        },
        &[rand_f64(&[4, 5], 3), rand_f64(&[5, 3], 4)],
        1e-5,
        CoordSample::All,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

// A fixed random projection turns any tensor into a scalar with
// non-degenerate gradients.
fn project(t: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var, crate::ApexError> {
    let w = rand_f64(t.value(x).dims(), seed);
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    Ok(t.sum_all(p))
}

#[test]
fn kernel_gradients_agree_with_finite_differences() {
    let h = 1e-5;
    let s = CoordSample::All;
    let cases: Vec<(&str, f64)> = vec![
        (
            "rms_norm",
            grad_check(
                |t, v| {
                    let y = t.rms_norm(v[0], v[1], 1e-5)?;
                    project(t, y, 10)
                },
                &[rand_f64(&[3, 6], 11), rand_f64(&[6], 12)],
                h,
                s,
            )
            .unwrap(),
        ),
        (
            "silu",
            grad_check(|t, v| { let y = t.activate(v[0], Activation::Silu); project(t, y, 13) }, &[rand_f64(&[4, 4], 14)], h, s).unwrap(),
        ),
        (
            "gelu",
            grad_check(|t, v| { let y = t.activate(v[0], Activation::Gelu); project(t, y, 15) }, &[rand_f64(&[4, 4], 16)], h, s).unwrap(),
        ),
        (
            "softmax",
            grad_check(|t, v| { let y = t.softmax_rows(v[0])?; project(t, y, 17) }, &[rand_f64(&[3, 5], 18)], h, s).unwrap(),
        ),
        (
            "cross_entropy",
            grad_check(|t, v| t.cross_entropy(v[0], &[1, 0, 4]), &[rand_f64(&[3, 5], 19)], h, s).unwrap(),
        ),
        (
            "attention",
            grad_check(
                |t, v| {
                    let y = t.attention(v[0], v[1], v[2], 2, 3, true)?;
                    project(t, y, 20)
                },
                &[rand_f64(&[6, 4], 21), rand_f64(&[6, 4], 22), rand_f64(&[6, 4], 23)],
                h,
                s,
            )
            .unwrap(),
        ),
        (
            "embed",
            grad_check(|t, v| { let y = t.embed(v[0], &[2, 0, 2])?; project(t, y, 24) }, &[rand_f64(&[3, 4], 25)], h, s).unwrap(),
        ),
        (
            "group_sq_norms",
            grad_check(|t, v| { let y = t.group_sq_norms(v[0], 2, 2)?; project(t, y, 26) }, &[rand_f64(&[4, 6], 27)], h, s).unwrap(),
        ),
        (
            "col_mean_std",
            grad_check(|t, v| t.col_mean_std(v[0]), &[rand_f64(&[3, 5], 28)], h, s).unwrap(),
        ),
        (
            "scale_add",
            grad_check(
                |t, v| {
                    let a = t.scale(v[0], 0.3);
                    let b = t.add(a, v[1])?;
                    project(t, b, 29)
                },
                &[rand_f64(&[2, 3], 30), rand_f64(&[2, 3], 31)],
                h,
                s,
            )
            .unwrap(),
        ),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: rel err {err}");
    }
}

#[test]
fn kernels_are_deterministic() {
    let q = rand_f64(&[8, 4], 40).cast::<f32>();
    let run = || {
        let mut t = Tape::<f32>::new();
        let v = t.constant(q.clone());
        let a = t.attention(v, v, v, 2, 4, true).unwrap();
        t.value(a).clone()
    };
    assert!(run().bits_eq(&run()));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let x = Tensor::<f64>::from_f64(&[3, 4], &vals).unwrap();
        let y = softmax_rows(&x).unwrap();
        for row in y.data().chunks(4) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn matmul_gradient_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let err = grad_check(
            |t, v| { let c = t.matmul(v[0], v[1])?; project(t, c, seed + 1) },
            &[rand_f64(&[m, k], seed), rand_f64(&[k, n], seed + 7)],
            1e-5,
            CoordSample::All,
        ).unwrap();
        prop_assert!(err < 1e-3);
    }
}
