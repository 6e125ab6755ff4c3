use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxpart_autodiff::{grad_check, AttentionLayout, AutodiffError, Tape, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn positive(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, &mut rng(seed))
}

fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Weighted sum so that every output element gets a distinct cotangent.
fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let w = tape.constant(randn(y.shape(), seed));
    y.mul(w).unwrap().sum()
}

#[test]
fn sum_gradient_is_ones() {
    let tape = Tape::new();
    let x = tape.leaf(randn(vec![2, 3], 1));
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::ones(vec![2, 3]));
}

#[test]
fn square_sum_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0, 3.0]));
    let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(randn(vec![3], 2));
    let err = tape.backward(x).unwrap_err();
    assert!(matches!(err, AutodiffError::LossNotScalar));
    assert_eq!(err.to_string(), "loss must be scalar");
}

#[test]
fn tape_is_consumed_once() {
    let tape = Tape::new();
    let x = tape.leaf(randn(vec![3], 2));
    let loss = x.sum();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(AutodiffError::TapeConsumed)));
}

#[test]
fn detached_and_unreachable_are_absent() {
    let tape = Tape::new();
    let x = tape.leaf(randn(vec![3], 3));
    let unused = tape.leaf(randn(vec![3], 4));
    let d = x.detach();
    let loss = x.sum().add(d.sum()).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).is_some());
    assert!(g.get(d).is_none());
    assert!(g.get(unused).is_none());
}

#[test]
fn composite_matmul_silu_conv3d_matches_finite_differences() {
    let inputs = vec![randn(vec![1, 3, 3, 3], 10), randn(vec![2, 1, 3, 3, 3], 11), randn(vec![27, 2], 12)];
    let err = grad_check(
        |tape, v| {
            let y = v[0].conv3d(v[1], 1, 1)?.silu();
            let flat = y.reshape(&[2, 27])?;
            let z = flat.matmul(v[2])?.silu();
            Ok(project(tape, z, 13))
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "max rel err {err}");
}

macro_rules! check_unary {
    ($name:ident, $gen:expr, |$x:ident: Var| $body:expr) => {
        #[test]
        fn $name() {
            fn op<'t>($x: Var<'t>) -> Var<'t> {
                $body
            }
            let err = grad_check(|tape, v| Ok(project(tape, op(v[0]), 99)), &[$gen], EPS).unwrap();
            assert!(err < TOL, "max rel err {err}");
        }
    };
}

check_unary!(grad_exp, randn(vec![3, 4], 20), |x: Var| x.exp());
check_unary!(grad_log, positive(vec![3, 4], 21), |x: Var| x.log());
check_unary!(grad_sqrt, positive(vec![3, 4], 22), |x: Var| x.sqrt());
check_unary!(grad_silu, randn(vec![3, 4], 23), |x: Var| x.silu());
check_unary!(grad_sigmoid, randn(vec![3, 4], 24), |x: Var| x.sigmoid());
check_unary!(grad_softplus, randn(vec![3, 4], 25), |x: Var| x.softplus());
check_unary!(grad_softmax, randn(vec![3, 4], 26), |x: Var| x.softmax());
check_unary!(grad_scale, randn(vec![3, 4], 27), |x: Var| x.scale(-2.5).add_scalar(1.0));
check_unary!(grad_cumprod, positive(vec![3, 5], 28), |x: Var| x.cumprod_exclusive());
check_unary!(grad_group_norm, randn(vec![4, 2, 2, 2], 29), |x: Var| x.group_norm(2, 1e-5).unwrap());
check_unary!(grad_reshape_permute, randn(vec![2, 3, 4], 30), |x: Var| x
    .reshape(&[6, 4])
    .unwrap()
    .permute(&[1, 0])
    .unwrap());
check_unary!(grad_sum_mean, randn(vec![2, 5], 31), |x: Var| x.sum().add(x.mean()).unwrap());
check_unary!(grad_sum_channels, randn(vec![3, 2, 2], 32), |x: Var| x.sum_channels());
check_unary!(grad_sum_last, randn(vec![3, 4], 33), |x: Var| x.sum_last());
check_unary!(grad_narrow, randn(vec![3, 4], 34), |x: Var| x.narrow(1, 1, 2).unwrap());
check_unary!(grad_gather, randn(vec![4, 3], 35), |x: Var| x.gather_rows(&[2, 0, 2, 3]).unwrap());
check_unary!(grad_resize, randn(vec![2, 2, 3, 2], 36), |x: Var| x.resize_trilinear([4, 5, 3]).unwrap());

#[test]
fn cumprod_gradient_at_zero() {
    let mut x = positive(vec![2, 4], 37);
    x.data_mut()[1] = 0.0;
    let err = grad_check(|tape, v| Ok(project(tape, v[0].cumprod_exclusive(), 3)), &[x], EPS).unwrap();
    assert!(err < TOL);
}

#[test]
fn binary_ops() {
    let inputs = vec![randn(vec![3, 4], 40), randn(vec![3, 4], 41)];
    let err = grad_check(
        |tape, v| {
            let y = v[0].add(v[1])?.mul(v[0])?.sub(v[1])?;
            Ok(project(tape, y, 42))
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn broadcast_and_channel_ops() {
    let inputs = vec![randn(vec![3, 2, 4], 43), randn(vec![2, 4], 44), randn(vec![3], 45)];
    let err = grad_check(
        |tape, v| {
            let y = v[0].add_broadcast(v[1])?.mul_broadcast(v[1])?;
            let y = y.add_channel(v[2])?.mul_channel(v[2])?;
            Ok(project(tape, y, 46))
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn matmul_and_concat() {
    let inputs = vec![randn(vec![3, 4], 50), randn(vec![4, 2], 51), randn(vec![3, 1], 52)];
    let err = grad_check(
        |tape, v| {
            let y = v[0].matmul(v[1])?;
            let y = Var::concat(&[y, v[2]], 1)?;
            Ok(project(tape, y, 53))
        },
        &inputs,
        EPS,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn conv3d_strided() {
    let inputs = vec![randn(vec![2, 4, 4, 3], 60), randn(vec![3, 2, 3, 3, 3], 61)];
    let err = grad_check(|tape, v| Ok(project(tape, v[0].conv3d(v[1], 2, 1)?, 62)), &inputs, EPS).unwrap();
    assert!(err < TOL);
}

#[test]
fn trilinear_sample_grid_gradient() {
    let coords = Tensor::new(vec![4, 3], vec![0.3, 1.7, 0.2, 2.0, 0.0, 1.0, -1.0, 5.0, 0.5, 1.5, 1.5, 1.5]).unwrap();
    let err = grad_check(
        |tape, v| Ok(project(tape, v[0].trilinear_sample(&coords)?, 63)),
        &[randn(vec![2, 3, 3, 2], 64)],
        EPS,
    )
    .unwrap();
    assert!(err < TOL);
}

#[test]
fn mse_and_cross_entropy() {
    let target = randn(vec![8], 70);
    let err = grad_check(
        |tape, v| v[0].mse(tape.constant(target.clone())),
        &[randn(vec![8], 71)],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "mse err {err}");

    let labels = [0, 3, 1, 2];
    let err = grad_check(|_, v| v[0].softmax_cross_entropy(&labels), &[randn(vec![4, 4], 72)], EPS).unwrap();
    assert!(err < TOL, "ce err {err}");
}

#[test]
fn mse_gradient_matches_closed_form() {
    let x = randn(vec![6], 80);
    let c = randn(vec![6], 81);
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = xv.mse(tape.constant(c.clone())).unwrap();
    let g = tape.backward(loss).unwrap();
    for i in 0..6 {
        let expect = 2.0 * (x.data()[i] - c.data()[i]) / 6.0;
        assert!((g.get(xv).unwrap().data()[i] - expect).abs() < 1e-14);
    }
}

#[test]
fn attention_and_segment_sum() {
    let inputs = vec![randn(vec![4, 4], 90), randn(vec![4, 4], 91), randn(vec![4, 2], 92)];
    for layout in [AttentionLayout::Full, AttentionLayout::Blocked(2)] {
        let err = grad_check(
            |tape, v| Ok(project(tape, v[0].attention(v[1], v[2], 2, layout)?, 93)),
            &inputs,
            EPS,
        )
        .unwrap();
        assert!(err < TOL, "{layout:?}: {err}");
    }
    let inputs = vec![randn(vec![2, 3], 94), randn(vec![6, 2], 95)];
    let err = grad_check(|tape, v| Ok(project(tape, v[0].segment_weighted_sum(v[1])?, 96)), &inputs, EPS).unwrap();
    assert!(err < TOL);
}

#[test]
fn grad_check_of_sum_is_exact() {
    let err = grad_check(|_, v| Ok(v[0].sum()), &[randn(vec![5], 100)], EPS).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn grad_check_rejects_non_scalar() {
    assert!(grad_check(|_, v| Ok(v[0]), &[randn(vec![2], 1)], EPS).is_err());
}

fn grads_for(seed: u64) -> Vec<f64> {
    let tape = Tape::new();
    let x = tape.leaf(randn(vec![1, 3, 3, 3], seed));
    let w = tape.leaf(randn(vec![2, 1, 3, 3, 3], seed + 1));
    let y = x.conv3d(w, 1, 1).unwrap().group_norm(2, 1e-5).unwrap().silu().square().mean();
    let g = tape.backward(y).unwrap();
    let mut out = g.get(x).unwrap().data().to_vec();
    out.extend_from_slice(g.get(w).unwrap().data());
    out
}

#[test]
fn repeated_passes_are_bit_identical() {
    assert_eq!(grads_for(5), grads_for(5));
}

proptest! {
    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let x0 = randn(vec![2, 3], seed);
        let grad = |wa: f64, wb: f64| {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let l1 = x.silu().sum();
            let l2 = x.mul(x).unwrap().exp().mean();
            let loss = l1.scale(wa).add(l2.scale(wb)).unwrap();
            tape.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let combined = grad(a, b);
        let g1 = grad(1.0, 0.0);
        let g2 = grad(0.0, 1.0);
        for i in 0..6 {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() < 1e-10);
        }
    }
}
