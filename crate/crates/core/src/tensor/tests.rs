use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::gradcheck::check_tape_fn;
use crate::rng;

fn t(shape: &[usize], data: &[Scalar]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng::seeded(seed);
    rng::normal_tensor(&mut r, shape, 1.0)
}

#[test]
fn matmul_identity_and_hand_cases() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::identity(2));
    let m = tape.constant(t(&[2, 2], &[5., 6., 7., 8.]));
    let p = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(p).data(), &[5., 6., 7., 8.]);

    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let ones = tape.constant(t(&[2, 1], &[1., 1.]));
    let p = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(p).data(), &[3., 7.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(1, &[3, 4]);
    let b = random(2, &[4, 2]);
    let mut expected = [0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            for k in 0..4 {
                expected[i * 2 + j] += a.get(&[i, k]) * b.get(&[k, j]);
            }
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let p = tape.matmul(va, vb).unwrap();
    for (x, y) in tape.value(p).data().iter().zip(expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(crate::Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0., 0., 0.]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[(2.0 as Scalar).ln(), 0.]));
    let y = tape.softmax(x, 0).unwrap();
    assert!((tape.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
    let x = tape.constant(t(&[2], &[1000., 1000.]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rows_sum_to_one_on_any_axis() {
    let x = random(3, &[2, 3, 4]);
    for axis in 0..3 {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.softmax(v, axis).unwrap();
        let s = tape.mean(y, axis).unwrap();
        let n = x.shape()[axis] as Scalar;
        for v in tape.value(s).data() {
            assert!((v * n - 1.0).abs() < 1e-12);
        }
    }
    let mut tape = Tape::new();
    let v = tape.constant(x);
    assert!(tape.softmax(v, 3).is_err());
}

#[test]
fn bilinear_resize_examples() {
    let w = random(4, &[4, 4]);
    assert_eq!(bilinear_resize_values(&w, 4, 4).unwrap(), w);

    let w = t(&[2, 2], &[0., 1., 2., 3.]);
    let r = bilinear_resize_values(&w, 3, 3).unwrap();
    assert_eq!(r.data(), &[0., 0.5, 1., 1., 1.5, 2., 2., 2.5, 3.]);

    let c = Tensor::full(&[3, 5], 1.25);
    for (rows, cols) in [(1, 1), (7, 2), (3, 9), (32, 32)] {
        let r = bilinear_resize_values(&c, rows, cols).unwrap();
        assert!(r.data().iter().all(|&v| (v - 1.25).abs() < 1e-14));
    }

    assert!(bilinear_resize_values(&w, 0, 3).is_err());
    let mut tape = Tape::new();
    let v = tape.constant(w);
    assert!(tape.bilinear_resize(v, 3, 0).is_err());
}

#[test]
fn bilinear_resize_on_tape_matches_values_and_is_identity_when_same_shape() {
    let w = random(5, &[5, 3]);
    let mut tape = Tape::new();
    let v = tape.leaf(w.clone(), true);
    let same = tape.bilinear_resize(v, 5, 3).unwrap();
    assert_eq!(tape.value(same), &w);
    let r = tape.bilinear_resize(v, 7, 4).unwrap();
    let expected = bilinear_resize_values(&w, 7, 4).unwrap();
    assert!(tape.value(r).max_abs_diff(&expected) < 1e-14);
}

#[test]
fn single_extent_axis_broadcasts() {
    let col = t(&[3, 1], &[1., 2., 3.]);
    let r = bilinear_resize_values(&col, 3, 4).unwrap();
    assert_eq!(r.data(), &[1., 1., 1., 1., 2., 2., 2., 2., 3., 3., 3., 3.]);
}

#[test]
fn pointwise_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);

    let x = tape.constant(random(6, &[3, 4]));
    let l = tape.mse(x, x).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);

    // delta kernel: only the centre tap carries the identity
    let (c, l) = (4, 5);
    let mut kernel = Tensor::zeros(&[3, c, c]);
    for i in 0..c {
        kernel.data_mut()[c * c + i * c + i] = 1.0;
    }
    let xin = random(7, &[2, l, 3, c]);
    let xv = tape.constant(xin.clone());
    let k = tape.constant(kernel);
    let y = tape.conv1d_k3(xv, k, None).unwrap();
    assert_eq!(tape.value(y), &xin);
}

#[test]
fn layer_norm_normalises_rows() {
    let mut tape = Tape::new();
    let x = tape.constant(random(8, &[4, 6]));
    let g = tape.constant(Tensor::full(&[6], 1.0));
    let b = tape.constant(Tensor::zeros(&[6]));
    let y = tape.layer_norm(x, g, b).unwrap();
    for row in tape.value(y).data().chunks(6) {
        let mu: Scalar = row.iter().sum::<Scalar>() / 6.0;
        let var: Scalar = row.iter().map(|v| (v - mu) * (v - mu)).sum::<Scalar>() / 6.0;
        assert!(mu.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn split_then_concat_recovers_input() {
    let x = random(9, &[2, 7, 3]);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let parts = tape.split(v, 1, &[2, 4, 1]).unwrap();
    assert_eq!(tape.shape(parts[1]), &[2, 4, 3]);
    let back = tape.concat(&parts, 1).unwrap();
    assert_eq!(tape.value(back), &x);
    assert!(tape.split(v, 1, &[2, 2]).is_err());
}

#[test]
fn permute_round_trip() {
    let x = random(10, &[2, 3, 4, 5]);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let p = tape.permute(v, &[0, 2, 3, 1]).unwrap();
    assert_eq!(tape.shape(p), &[2, 4, 5, 3]);
    assert_eq!(tape.value(p).get(&[1, 2, 3, 0]), x.get(&[1, 0, 2, 3]));
    let back = tape.permute(p, &[0, 3, 1, 2]).unwrap();
    assert_eq!(tape.value(back), &x);
    assert!(tape.permute(v, &[0, 0, 1, 2]).is_err());
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2., 4., 6.]);
}

#[test]
fn backward_contract_and_state_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1., 2.]), true);
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(crate::Error::Contract(_))));
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(crate::Error::State(_))));
    tape.reset();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2., 2.]);
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let logits = random(11, &[4, 5]);
    let err = check_tape_fn(&[logits], 1e-5, |tape, v| {
        let p = tape.softmax(v[0], 1)?;
        let l = tape.scale(p, 3.0);
        tape.cross_entropy(l, &[0, 3, 4, 1])
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn matmul_mse_gradient_matches_finite_differences() {
    let a = random(12, &[3, 4]);
    let b = random(13, &[4, 2]);
    let target = random(14, &[3, 2]);
    let err = check_tape_fn(&[a, b], 1e-5, |tape, v| {
        let p = tape.matmul(v[0], v[1])?;
        let y = tape.constant(target.clone());
        tape.mse(p, y)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn every_op_gradient_matches_finite_differences() {
    type Case = (&'static str, Vec<Tensor>, fn(&mut Tape, &[Var]) -> crate::Result<Var>);
    let cases: Vec<Case> = vec![
        ("add_sub_mul", vec![random(20, &[2, 3]), random(21, &[2, 3])], |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[1])?;
            let m = t.mul(s, v[1])?;
            Ok(t.sum(m))
        }),
        ("sigmoid_gelu", vec![random(22, &[5])], |t, v| {
            let s = t.sigmoid(v[0]);
            let g = t.gelu(v[0]);
            let m = t.mul(s, g)?;
            Ok(t.sum(m))
        }),
        ("mean_softmax", vec![random(23, &[2, 3, 4])], |t, v| {
            let s = t.softmax(v[0], 1)?;
            let w = t.constant(random(99, &[2, 3, 4]));
            let p = t.mul(s, w)?;
            let m = t.mean(p, 2)?;
            Ok(t.sum(m))
        }),
        ("bmm", vec![random(24, &[2, 3, 4]), random(25, &[2, 4, 2])], |t, v| {
            let p = t.bmm(v[0], v[1], false)?;
            let q = t.mul(p, p)?;
            Ok(t.sum(q))
        }),
        ("bmm_nt", vec![random(26, &[2, 3, 4]), random(27, &[2, 5, 4])], |t, v| {
            let p = t.bmm(v[0], v[1], true)?;
            let q = t.mul(p, p)?;
            Ok(t.sum(q))
        }),
        ("linear", vec![random(28, &[2, 3, 4]), random(29, &[4, 5]), random(30, &[5])], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            let q = t.mul(y, y)?;
            Ok(t.sum(q))
        }),
        ("layer_norm", vec![random(31, &[3, 6]), random(32, &[6]), random(33, &[6])], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            let w = t.constant(random(98, &[3, 6]));
            let q = t.mul(y, w)?;
            Ok(t.sum(q))
        }),
        ("conv1d", vec![random(34, &[2, 4, 2, 3]), random(35, &[3, 3, 5]), random(36, &[5])], |t, v| {
            let y = t.conv1d_k3(v[0], v[1], Some(v[2]))?;
            let q = t.mul(y, y)?;
            Ok(t.sum(q))
        }),
        ("token_mix", vec![random(37, &[3, 4]), random(38, &[3]), random(39, &[2, 4, 2, 3])], |t, v| {
            let y = t.token_mix(v[0], Some(v[1]), v[2])?;
            let q = t.mul(y, y)?;
            Ok(t.sum(q))
        }),
        ("resize", vec![random(40, &[3, 4])], |t, v| {
            let r = t.bilinear_resize(v[0], 5, 2)?;
            let q = t.mul(r, r)?;
            Ok(t.sum(q))
        }),
        ("layout", vec![random(41, &[2, 1, 3]), random(42, &[2, 2, 3])], |t, v| {
            let r = t.repeat(v[0], 1, 2)?;
            let c = t.concat(&[r, v[1]], 1)?;
            let p = t.permute(c, &[2, 0, 1])?;
            let s = t.slice(p, 2, 1, 2)?;
            let r2 = t.reshape(s, &[12])?;
            let w = t.constant(random(97, &[12]));
            let q = t.mul(r2, w)?;
            let q = t.mul(q, r2)?;
            Ok(t.sum(q))
        }),
        ("select", vec![random(43, &[4]), random(44, &[4])], |t, v| {
            let s = t.select(&[true, false, false, true], v[0], v[1])?;
            let q = t.mul(s, s)?;
            Ok(t.sum(q))
        }),
        ("sq_dist_ce", vec![random(45, &[3, 4]), random(46, &[2, 4])], |t, v| {
            let d = t.sq_dist(v[0], v[1])?;
            let l = t.scale(d, -1.0);
            t.cross_entropy(l, &[1, 0, 1])
        }),
        ("mse_both_sides", vec![random(47, &[6]), random(48, &[6])], |t, v| t.mse(v[0], v[1])),
    ];
    for (name, inputs, f) in cases {
        let err = check_tape_fn(&inputs, 1e-5, f).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn determinism_bit_identical() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.leaf(random(50, &[3, 4]), true);
        let b = tape.leaf(random(51, &[4, 3]), true);
        let p = tape.matmul(a, b).unwrap();
        let s = tape.softmax(p, 1).unwrap();
        let l = tape.sum(s);
        let q = tape.mul(s, s).unwrap();
        let l2 = tape.sum(q);
        let tot = tape.add(l, l2).unwrap();
        tape.backward(tot).unwrap();
        (tape.value(p).clone(), tape.grad(a).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
