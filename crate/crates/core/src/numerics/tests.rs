use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum with fixed random weights, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

fn check(point: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>) {
    let report = grad_check(f, &point, 1e-4).unwrap();
    assert!(
        report.max_relative_error < 1e-4,
        "max rel err {} at {:?}",
        report.max_relative_error,
        report.worst
    );
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap();
    let i = tape.constant(Tensor::identity(2));
    let av = tape.constant(a.clone());
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
    let y = tape.softmax(x).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[4, 7]).map(|v| v * 30.0));
        let y = tape.softmax(x).unwrap();
        for r in 0..4 {
            let row = tape.value(y).row(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match &err {
        Error::Shape { op, lhs, rhs } => {
            assert_eq!(*op, "matmul");
            assert_eq!(lhs, &[2, 3]);
            assert_eq!(rhs, &[2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn cosine_sim_examples() {
    let v = [0.3f64, -1.2, 2.0];
    let rows = Tensor::from_rows(&[v.to_vec(), v.iter().map(|x| -x).collect()]).unwrap();
    let s = cosine_sim(&v, &rows).unwrap();
    assert!((s[0] - 1.0).abs() < 1e-15);
    assert!((s[1] + 1.0).abs() < 1e-15);

    let rows = Tensor::from_rows(&[vec![0.0, 1.0], vec![3.0, 0.0]]).unwrap();
    assert_eq!(cosine_sim(&[1.0, 0.0], &rows).unwrap(), vec![0.0, 1.0]);

    assert!(cosine_sim(&[0.0, 0.0], &rows).is_err());
    let zero_row = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
    assert!(cosine_sim(&[1.0, 0.0], &zero_row).is_err());
}

#[test]
fn grad_check_sum_of_squares() {
    let point = vec![Tensor::vector(vec![1.0, 2.0])];
    let report = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert_eq!(report.analytic[0].data(), &[2.0, 4.0]);
    assert!(report.max_relative_error < 1e-6);
}

#[test]
fn grad_check_rejects_bad_epsilon_and_nonfinite() {
    let point = vec![Tensor::vector(vec![1.0])];
    assert!(grad_check(|t, v| t.sum(v[0]), &point, 0.5).is_err());
    let err = grad_check(
        |t, v| {
            let s = t.scale(v[0], f64::INFINITY)?;
            t.sum(s)
        },
        &point,
        1e-4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s);

    check(vec![r(&mut rng, &[3, 4]), r(&mut rng, &[4, 2])], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        Ok(project(t, y, 1))
    });
    check(vec![r(&mut rng, &[3, 4])], |t, v| {
        let y = t.transpose(v[0])?;
        Ok(project(t, y, 2))
    });
    check(vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])], |t, v| {
        let y = t.add(v[0], v[1])?;
        Ok(project(t, y, 3))
    });
    check(vec![r(&mut rng, &[3, 4]), r(&mut rng, &[3, 4])], |t, v| {
        let y = t.mul(v[0], v[1])?;
        Ok(project(t, y, 4))
    });
    check(vec![r(&mut rng, &[3, 4]), r(&mut rng, &[4])], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        Ok(project(t, y, 5))
    });
    check(vec![r(&mut rng, &[3, 4])], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        Ok(project(t, y, 6))
    });
    check(vec![r(&mut rng, &[3, 5])], |t, v| {
        let y = t.softmax(v[0])?;
        Ok(project(t, y, 7))
    });
    check(vec![r(&mut rng, &[3, 5])], |t, v| {
        let mask: Arc<[bool]> = (0..15).map(|i| i % 5 <= i / 5 + 1).collect();
        let y = t.masked_softmax(v[0], mask)?;
        Ok(project(t, y, 8))
    });
    check(vec![r(&mut rng, &[3, 5])], |t, v| {
        let y = t.log_softmax(v[0])?;
        Ok(project(t, y, 9))
    });
    check(vec![r(&mut rng, &[3, 4]).map(|x| x.abs() + 0.5)], |t, v| {
        let y = t.log(v[0])?;
        Ok(project(t, y, 10))
    });
    check(vec![r(&mut rng, &[3, 4])], |t, v| {
        let y = t.exp(v[0])?;
        Ok(project(t, y, 11))
    });
    check(
        vec![r(&mut rng, &[3, 6]), r(&mut rng, &[6]), r(&mut rng, &[6])],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            Ok(project(t, y, 12))
        },
    );
    check(vec![r(&mut rng, &[3, 4])], |t, v| {
        let y = t.activation(v[0], Activation::Gelu)?;
        Ok(project(t, y, 13))
    });
    // ReLU away from the kink.
    check(
        vec![r(&mut rng, &[3, 4]).map(|x| if x.abs() < 0.1 { 0.5 } else { x })],
        |t, v| {
            let y = t.activation(v[0], Activation::Relu)?;
            Ok(project(t, y, 14))
        },
    );
    check(
        vec![r(&mut rng, &[17, 2]), r(&mut rng, &[3, 2, 5]), r(&mut rng, &[3])],
        |t, v| {
            let y = t.conv1d(v[0], v[1], v[2], 2)?;
            Ok(project(t, y, 15))
        },
    );
    check(vec![r(&mut rng, &[4, 3])], |t, v| {
        let y = t.gather_rows(v[0], &[3, 0, 3])?;
        Ok(project(t, y, 16))
    });
    check(vec![r(&mut rng, &[4, 3])], |t, v| {
        let y = t.pick(v[0], &[(0, 1), (3, 2), (0, 1)])?;
        Ok(project(t, y, 17))
    });
    check(vec![r(&mut rng, &[3, 4]), r(&mut rng, &[5, 4])], |t, v| {
        let y = t.cosine_rows(v[0], v[1])?;
        Ok(project(t, y, 18))
    });
    check(vec![r(&mut rng, &[3, 2]), r(&mut rng, &[3, 4])], |t, v| {
        let y = t.concat(&[v[0], v[1], v[0]])?;
        Ok(project(t, y, 19))
    });
    check(vec![r(&mut rng, &[3, 6])], |t, v| {
        let y = t.slice_cols(v[0], 2, 3)?;
        Ok(project(t, y, 20))
    });
    check(vec![r(&mut rng, &[5, 3]), r(&mut rng, &[3])], |t, v| {
        let y = t.replace_rows(v[0], v[1], &[1, 4])?;
        Ok(project(t, y, 21))
    });
}

#[test]
fn fan_out_accumulates_branch_gradients() {
    // f(x) = sum(2x) + sum(x * x): df/dx = 2 + 2x
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.0, 3.0]));
    let a = tape.scale(x, 2.0).unwrap();
    let a = tape.sum(a).unwrap();
    let b = tape.mul(x, x).unwrap();
    let b = tape.sum(b).unwrap();
    let f = tape.add(a, b).unwrap();
    let g = tape.backward(f).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[3.0, 0.0, 8.0]);
}

#[test]
fn replay_is_bit_identical() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&mut rng, &[4, 6]));
        let w = tape.leaf(rand_tensor(&mut rng, &[6, 6]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.activation(h, Activation::Gelu).unwrap();
        let h = tape.softmax(h).unwrap();
        let l = project(&mut tape, h, 9);
        let g = tape.backward(l).unwrap();
        (tape.value(l).item(), g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
    };
    let (l1, gx1, gw1) = build();
    let (l2, gx2, gw2) = build();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
    let y = tape.mul(c, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn conv_output_length_is_floor_of_input_over_stride() {
    let mut tape = Tape::<f64>::new();
    let w = tape.constant(Tensor::full([1, 1, 4], 1.0));
    let b = tape.constant(Tensor::zeros([1]));
    for n in [4usize, 7, 8, 16, 33] {
        let x = tape.constant(Tensor::zeros([n, 1]));
        let y = tape.conv1d(x, w, b, 2).unwrap();
        assert_eq!(tape.shape(y), &[n / 2, 1]);
    }
    let x = tape.constant(Tensor::zeros([1, 1]));
    assert!(tape.conv1d(x, w, b, 2).is_err());
}

#[test]
fn f32_tape_works() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::vector(vec![1.0f32, 2.0]));
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0f32, 4.0]);
}
