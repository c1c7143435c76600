mod common;

use common::{gradcheck, rand_tensor};
use localmim::tensor::RowMix;
use localmim::{Tape, Tensor};
use std::rc::Rc;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

const TOL: f64 = 1e-5;

#[test]
fn matmul_examples() {
    let tape = Tape::<f64>::new();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let v = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(i.matmul(v).unwrap().value().data(), &[3.0, 4.0]);

    let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]), true);
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = a.matmul(b).unwrap();
    assert_eq!(c.value().data(), &[11.0]);
    c.sum().backward().unwrap();
    assert_eq!(a.grad().unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = a.matmul(b).err().unwrap().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let s = tape.constant(t(&[2], &[0.0, 0.0])).softmax(0).unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);
    let s = tape
        .constant(t(&[2], &[1000.0, 1000.0]))
        .softmax(0)
        .unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);
    let s = tape
        .constant(t(&[2], &[0.0, 3f64.ln()]))
        .softmax(0)
        .unwrap();
    assert!((s.value().data()[0] - 0.25).abs() < 1e-12);
    assert!((s.value().data()[1] - 0.75).abs() < 1e-12);
}

#[test]
fn layernorm_examples() {
    let tape = Tape::<f64>::new();
    let g = tape.constant(t(&[2], &[1.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let c = tape
        .constant(t(&[2], &[3.0, 3.0]))
        .layernorm(g, b, 1e-6)
        .unwrap();
    assert_eq!(c.value().data(), &[0.0, 0.0]);
    let y = tape
        .constant(t(&[2], &[1.0, -1.0]))
        .layernorm(g, b, 1e-6)
        .unwrap();
    let expect = 1.0 / (1.0f64 + 1e-6).sqrt();
    assert!((y.value().data()[0] - expect).abs() < 1e-12);
    assert!((y.value().data()[1] + expect).abs() < 1e-12);
}

#[test]
fn layernorm_gradcheck_random_vector() {
    let err = gradcheck(
        &[
            rand_tensor(&[4], 1),
            rand_tensor(&[4], 2),
            rand_tensor(&[4], 3),
            rand_tensor(&[4], 4),
        ],
        |_, v| {
            let y = v[0].layernorm(v[1], v[2], 1e-6).unwrap();
            y.mul(v[3]).unwrap().sum()
        },
    );
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn gelu_and_cross_entropy_values() {
    let tape = Tape::<f64>::new();
    assert_eq!(tape.constant(t(&[1], &[0.0])).gelu().value().data(), &[0.0]);
    let ce = tape
        .constant(t(&[1, 4], &[0.0; 4]))
        .cross_entropy(&[2])
        .unwrap();
    assert!((ce.value().data()[0] - 4f64.ln()).abs() < 1e-12);
    assert!(tape
        .constant(t(&[1, 4], &[0.0; 4]))
        .cross_entropy(&[4])
        .is_err());
}

#[test]
fn scatter_of_gather_is_identity_on_gathered_rows() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&[5, 3], 9));
    let idx = [4, 1, 2];
    let g = x.gather(&idx).unwrap();
    let zeros = tape.constant(Tensor::zeros(&[5, 3]));
    let back = zeros.scatter(g, &idx).unwrap();
    for &r in &idx {
        for c in 0..3 {
            assert_eq!(back.value().at(&[r, c]), x.value().at(&[r, c]));
        }
    }
    assert!(zeros.scatter(g, &[1, 1, 2]).is_err());
}

#[test]
fn backward_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let loss = x.mul(x).unwrap().sum();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    loss.backward().unwrap();
    assert_eq!(
        x.grad().unwrap().data(),
        &[4.0, 8.0],
        "repeated calls accumulate"
    );

    assert!(x.backward().is_err(), "non-scalar loss");
}

#[test]
fn unused_leaf_gets_no_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let unused = tape.leaf(t(&[2], &[5.0, 6.0]), true);
    x.sum().backward().unwrap();
    assert!(unused
        .grad()
        .is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn per_op_gradchecks() {
    let checks: Vec<(&str, f64)> = vec![
        (
            "add_broadcast",
            gradcheck(&[rand_tensor(&[3, 4], 1), rand_tensor(&[4], 2)], |_, v| {
                v[0].add(v[1]).unwrap().mul(v[0]).unwrap().sum()
            }),
        ),
        (
            "sub_mul_broadcast",
            gradcheck(
                &[rand_tensor(&[2, 3, 1], 3), rand_tensor(&[1, 4], 4)],
                |_, v| {
                    let d = v[0].sub(v[1]).unwrap();
                    d.mul(d).unwrap().mul(v[1]).unwrap().sum()
                },
            ),
        ),
        (
            "batched_matmul",
            gradcheck(
                &[rand_tensor(&[2, 3, 4], 5), rand_tensor(&[4, 2], 6)],
                |_, v| {
                    let c = v[0].matmul(v[1]).unwrap();
                    c.mul(c).unwrap().sum()
                },
            ),
        ),
        (
            "matmul_batched_both",
            gradcheck(
                &[rand_tensor(&[2, 3, 4], 7), rand_tensor(&[2, 4, 5], 8)],
                |_, v| v[0].matmul(v[1]).unwrap().gelu().sum(),
            ),
        ),
        (
            "softmax_axis1",
            gradcheck(
                &[rand_tensor(&[2, 3, 4], 9), rand_tensor(&[2, 3, 4], 10)],
                |_, v| v[0].softmax(1).unwrap().mul(v[1]).unwrap().sum(),
            ),
        ),
        (
            "layernorm",
            gradcheck(
                &[
                    rand_tensor(&[3, 5], 11),
                    rand_tensor(&[5], 12),
                    rand_tensor(&[5], 13),
                    rand_tensor(&[3, 5], 14),
                ],
                |_, v| {
                    v[0].layernorm(v[1], v[2], 1e-6)
                        .unwrap()
                        .mul(v[3])
                        .unwrap()
                        .sum()
                },
            ),
        ),
        (
            "gelu",
            gradcheck(
                &[rand_tensor(&[6], 15).reshape(&[2, 3]).unwrap()],
                |_, v| v[0].gelu().mul(v[0]).unwrap().sum(),
            ),
        ),
        (
            "permute_reshape",
            gradcheck(
                &[rand_tensor(&[2, 3, 4], 16), rand_tensor(&[4, 6], 17)],
                |_, v| {
                    let p = v[0].permute(&[2, 0, 1]).unwrap().reshape(&[4, 6]).unwrap();
                    p.mul(v[1]).unwrap().sum()
                },
            ),
        ),
        (
            "mean_sum_axis",
            gradcheck(&[rand_tensor(&[3, 4], 18)], |_, v| {
                let s = v[0].sum_axis(0).unwrap();
                s.mul(s).unwrap().mean()
            }),
        ),
        (
            "gather_scatter_concat",
            gradcheck(
                &[rand_tensor(&[4, 3], 19), rand_tensor(&[2, 3], 20)],
                |_, v| {
                    let g = v[0].gather(&[3, 0, 3]).unwrap();
                    let s = v[0].scatter(v[1], &[2, 1]).unwrap();
                    let c = localmim::Var::concat(&[g, s]).unwrap();
                    c.mul(c).unwrap().sum()
                },
            ),
        ),
        (
            "row_mix",
            gradcheck(&[rand_tensor(&[3, 2], 21)], |_, v| {
                let mix = Rc::new(RowMix {
                    in_rows: 3,
                    rows: vec![vec![(0, 0.25), (2, 0.75)], vec![(1, 1.0)]],
                });
                let y = v[0].row_mix(mix).unwrap();
                y.mul(y).unwrap().sum()
            }),
        ),
        (
            "cross_entropy",
            gradcheck(&[rand_tensor(&[3, 4], 22)], |_, v| {
                v[0].cross_entropy(&[0, 3, 1]).unwrap()
            }),
        ),
        (
            "smooth_l1_scale",
            gradcheck(
                &[rand_tensor(&[8], 23).reshape(&[2, 4]).unwrap()],
                |_, v| v[0].scale(3.0).smooth_l1(1.0).sum(),
            ),
        ),
    ];
    for (name, err) in &checks {
        assert!(*err <= TOL, "{name}: rel err {err}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let tape = Tape::<f64>::new();
    let s = tape
        .constant(rand_tensor(&[4, 7], 3).cast::<f64>())
        .softmax(1)
        .unwrap();
    let v = s.value();
    for r in 0..4 {
        let sum: f64 = (0..7).map(|c| v.at(&[r, c])).sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!((0..7).all(|c| v.at(&[r, c]) >= 0.0));
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn permute_roundtrip_preserves_values(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
            let x = rand_tensor(&[a, b, c], seed);
            let y = x.permute(&[1, 2, 0]).unwrap().permute(&[2, 0, 1]).unwrap();
            prop_assert_eq!(y, x.clone());
            let flat = x.clone().reshape(&[a * b * c]).unwrap().reshape(&[a, b, c]).unwrap();
            prop_assert_eq!(flat, x);
        }

        #[test]
        fn softmax_is_a_distribution(vals in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let n = vals.len();
            let tape = Tape::<f64>::new();
            let s = tape.constant(Tensor::new(vec![n], vals).unwrap()).softmax(0).unwrap();
            let sum: f64 = s.value().data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }
}
