use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{gradcheck, FD_STEP};
use super::*;
use crate::error::Error;

fn t(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(data.to_vec(), shape).unwrap()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn check<F>(seeds: u64, tol: f64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&[Tensor]) -> crate::Result<Tensor>,
{
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let err = gradcheck(&f, &inputs, FD_STEP).unwrap();
        assert!(err < tol, "seed {seed}: relative error {err:e}");
    }
}

/// Weighted sum so that gradients are not all ones.
fn probe(x: &Tensor, w: &Tensor) -> crate::Result<Tensor> {
    Ok(x.mul(w)?.sum())
}

#[test]
fn matmul_identity_and_hand_values() {
    let id = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let m = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
    assert_eq!(id.matmul(&m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

    let a = t(&[1.0, 0.0, 0.0, 0.0], &[2, 2]);
    let b = t(&[5.0, 7.0], &[2, 1]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.to_vec(), vec![5.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    check(
        20,
        1e-6,
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])],
        |x| Ok(x[0].matmul(&x[1])?.sum()),
    );
}

#[test]
fn softmax_hand_values() {
    let s = t(&[0.0, 0.0, 0.0], &[1, 3])
        .softmax_rows()
        .unwrap()
        .to_vec();
    for v in s {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = t(&[2f64.ln(), 0.0], &[1, 2])
        .softmax_rows()
        .unwrap()
        .to_vec();
    assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_rejects_nan() {
    let x = t(&[0.0, f64::NAN], &[1, 2]);
    assert!(matches!(x.softmax_rows(), Err(Error::Numeric(_))));
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    check(
        20,
        1e-6,
        |r| vec![rand_t(r, &[3, 5]), rand_t(r, &[3, 5])],
        |x| probe(&x[0].softmax_rows()?, &x[1]),
    );
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-1e3f64..1e3, 12)) {
        let s = t(&vals, &[3, 4]).softmax_rows().unwrap();
        for row in s.to_vec().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn add_then_sub_roundtrips(vals in prop::collection::vec(-10f64..10.0, 6),
                               other in prop::collection::vec(-10f64..10.0, 6)) {
        let a = t(&vals, &[2, 3]);
        let b = t(&other, &[2, 3]);
        let back = a.add(&b).unwrap().sub(&b).unwrap().to_vec();
        for (x, y) in back.iter().zip(&vals) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_hand_values() {
    let x = Tensor::new(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
    let k = Tensor::new(vec![1.0; 9], &[1, 1, 3, 3]).unwrap();
    let y = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.to_vec(), vec![9.0]);

    let mut delta = vec![0.0; 25];
    delta[12] = 1.0;
    let x = Tensor::new(delta.clone(), &[1, 1, 5, 5]).unwrap();
    let mut ident = vec![0.0; 9];
    ident[4] = 1.0;
    let k = Tensor::new(ident, &[1, 1, 3, 3]).unwrap();
    assert_eq!(x.conv2d(&k, 1, 1).unwrap().to_vec(), delta);
}

#[test]
fn conv_output_size_and_errors() {
    let x = Tensor::zeros(&[2, 3, 8, 8]);
    let k = Tensor::zeros(&[4, 3, 3, 3]);
    assert_eq!(x.conv2d(&k, 2, 1).unwrap().shape(), &[2, 4, 4, 4]);
    let big = Tensor::zeros(&[1, 3, 9, 9]);
    assert!(matches!(x.conv2d(&big, 1, 0), Err(Error::Dimension { .. })));
    let wrong_c = Tensor::zeros(&[1, 2, 3, 3]);
    assert!(matches!(
        x.conv2d(&wrong_c, 1, 0),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn conv_gradient_matches_finite_differences() {
    check(
        20,
        1e-5,
        |r| {
            vec![
                rand_t(r, &[2, 2, 5, 5]),
                rand_t(r, &[3, 2, 3, 3]),
                rand_t(r, &[2, 3, 3, 3]),
            ]
        },
        |x| probe(&x[0].conv2d(&x[1], 2, 1)?, &x[2]),
    );
}

#[test]
fn backward_of_sum_is_ones() {
    let w = Tensor::param(vec![0.3, -1.0, 2.0], &[3]).unwrap();
    w.sum().backward().unwrap();
    assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_self_mse_is_zero() {
    let a = Tensor::param(vec![0.3, -1.0, 2.0, 4.0], &[2, 2]).unwrap();
    a.mse(&a).unwrap().backward().unwrap();
    assert!(a.grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_requires_scalar() {
    let a = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(matches!(a.backward(), Err(Error::Contract(_))));
}

#[test]
fn backward_twice_accumulates_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_t(&mut rng, &[3, 3]);
    a.set_requires_grad(true);
    let loss = a.matmul(&a).unwrap().gelu().sum();
    loss.backward().unwrap();
    let once = a.grad().unwrap();
    loss.backward().unwrap();
    let twice = a.grad().unwrap();
    for (x, y) in once.iter().zip(&twice) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn frozen_registry_entries_stay_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut reg = ParamRegistry::new();
    let mut b = ParamBuilder::new(&mut reg, &mut rng, "m");
    let w1 = b.normal("w1", &[3, 3], 1.0).unwrap();
    let w2 = b.normal("w2", &[3, 3], 1.0).unwrap();
    reg.set_trainable("m.w1", false).unwrap();
    let loss = w1.matmul(&w2).unwrap().relu().sum();
    loss.backward().unwrap();
    assert!(reg.grad("m.w1").unwrap().iter().all(|g| g.to_bits() == 0));
    assert!(reg.grad("m.w2").unwrap().iter().any(|&g| g != 0.0));
    assert_eq!(reg.trainable_count(""), 9);
}

#[test]
fn registry_rejects_duplicate_names() {
    let mut reg = ParamRegistry::new();
    reg.register("a", Tensor::zeros(&[1]), true).unwrap();
    assert!(reg.register("a", Tensor::zeros(&[1]), true).is_err());
}

#[test]
fn elementwise_and_activation_gradients() {
    check(
        20,
        1e-5,
        |r| vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3]), rand_t(r, &[2, 3])],
        |x| {
            let y = x[0].add(&x[1])?.mul(&x[2])?.sub(&x[0])?.gelu();
            let z = x[1].relu().scale(0.7);
            Ok(y.add(&z)?.mul(&y)?.sum())
        },
    );
}

#[test]
fn layer_norm_gradient() {
    check(
        20,
        1e-5,
        |r| {
            vec![
                rand_t(r, &[3, 6]),
                rand_t(r, &[6]),
                rand_t(r, &[6]),
                rand_t(r, &[3, 6]),
            ]
        },
        |x| probe(&x[0].layer_norm(&x[1], &x[2], 1e-5)?, &x[3]),
    );
}

#[test]
fn reshaping_gathering_and_concat_gradients() {
    check(
        20,
        1e-6,
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[2, 4]), rand_t(r, &[5, 2])],
        |x| {
            let rows = Tensor::concat(&[x[0].clone(), x[1].clone()], 0)?; // 5×4
            let cols = Tensor::concat(&[rows.clone(), x[2].clone()], 1)?; // 5×6
            let tt = cols.transpose()?.reshape(&[3, 10])?;
            let idx: Rc<[usize]> = vec![0, 3, 3, 7, 29, 11].into();
            let g = tt.gather(idx, &[2, 3])?;
            let st = Tensor::stack(&[g.clone(), g.scale(2.0)])?;
            Ok(st
                .mul(&st)?
                .sum()
                .add(&rows.mean_rows()?.mul(&rows.mean_rows()?)?.sum())?)
        },
    );
}

#[test]
fn normalization_and_cosine_gradients() {
    check(
        20,
        1e-5,
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
        |x| {
            let n = x[0].l2_normalize_rows(1e-12)?;
            let c = x[0].cosine_rows(&x[1])?;
            Ok(probe(&n, &x[2])?.add(&c.sum())?)
        },
    );
}

#[test]
fn bias_and_loss_gradients() {
    check(
        20,
        1e-5,
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4]), rand_t(r, &[3, 4])],
        |x| {
            let y = x[0].add_bias(&x[1])?;
            y.mse(&x[2])
        },
    );
    check(
        20,
        1e-5,
        |r| vec![rand_t(r, &[1, 2, 3, 3]), rand_t(r, &[2])],
        |x| {
            let y = x[0].add_channel_bias(&x[1])?;
            Ok(y.mul(&y)?.sum())
        },
    );
}

#[test]
fn arc_margin_and_cross_entropy_gradients() {
    check(
        20,
        1e-5,
        |r| vec![rand_t(r, &[5])],
        |x| {
            let c = x[0].scale(0.9);
            c.arc_margin(2, 0.5)?.scale(8.0).cross_entropy(2)
        },
    );
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let x = Tensor::zeros(&[3]);
    assert!(matches!(x.cross_entropy(3), Err(Error::Contract(_))));
    assert!(matches!(x.arc_margin(5, 0.5), Err(Error::Contract(_))));
}

#[test]
fn composite_graph_passes_gradcheck() {
    check(
        20,
        1e-5,
        |r| vec![rand_t(r, &[4, 3]), rand_t(r, &[3, 3]), rand_t(r, &[3])],
        |x| {
            let h = x[0].matmul(&x[1])?.add_bias(&x[2])?.relu();
            let a = h.matmul(&h.transpose()?)?.softmax_rows()?;
            let out = a.matmul(&x[0])?;
            Ok(out.mul(&out)?.mean())
        },
    );
}

#[test]
fn tensor_constructor_validates_length() {
    assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
    assert!(Tensor::new(vec![], &[0]).is_err());
}
