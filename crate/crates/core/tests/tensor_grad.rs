//! Finite-difference verification of every differentiable operation.
//!
//! The numeric gradient re-runs the forward computation on an inactive tape,
//! so it shares nothing with the backward rules under test.

use avfm_core::gradcheck::{assert_close, finite_diff};
use avfm_core::rng::{derive_stream, uniform};
use avfm_core::tensor::{ops, GradTape, Tensor};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = derive_stream(97, "tensor-grad", seed);
    Tensor::from_fn(shape, |_| uniform(&mut rng, lo, hi))
}

/// Checks d(sum f(inputs))/d(inputs[k]) for every k against central
/// differences.
fn check_op(
    name: &str,
    inputs: &[Tensor],
    f: impl Fn(&[Tensor], &mut GradTape) -> Tensor,
) {
    let mut tape = GradTape::new();
    let mut tracked: Vec<Tensor> = inputs.to_vec();
    for t in tracked.iter_mut() {
        tape.watch(t);
    }
    let y = f(&tracked, &mut tape);
    let loss = ops::sum(&y, &mut tape).unwrap();
    tape.backward(&loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad_or_zeros(&tracked[k]);
        let numeric = finite_diff(
            |coords| {
                let mut probe: Vec<Tensor> = inputs.to_vec();
                probe[k] = Tensor::from_vec(input.shape(), coords.to_vec()).unwrap();
                let mut quiet = GradTape::inactive();
                let y = f(&probe, &mut quiet);
                y.data().iter().sum()
            },
            input.data(),
            STEP,
        );
        assert_close(analytic.data(), &numeric, TOL, &format!("{name} input {k}"));
    }
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let a = rand_tensor(&[3, 4], -1.5, 1.5, 1);
    let b = rand_tensor(&[3, 4], -1.5, 1.5, 2);
    check_op("add", &[a.clone(), b.clone()], |t, tape| {
        ops::add(&t[0], &t[1], tape).unwrap()
    });
    check_op("sub", &[a.clone(), b.clone()], |t, tape| {
        ops::sub(&t[0], &t[1], tape).unwrap()
    });
    check_op("mul", &[a.clone(), b.clone()], |t, tape| {
        ops::mul(&t[0], &t[1], tape).unwrap()
    });
    check_op("scale", &[a.clone()], |t, tape| {
        ops::scale(&t[0], -2.5, tape).unwrap()
    });
    check_op("add_scalar", &[a.clone()], |t, tape| {
        ops::add_scalar(&t[0], 0.75, tape).unwrap()
    });
    check_op("abs", &[a.clone()], |t, tape| ops::abs(&t[0], tape).unwrap());
    check_op("exp", &[a.clone()], |t, tape| ops::exp(&t[0], tape).unwrap());
    check_op("sigmoid", &[a.clone()], |t, tape| {
        ops::sigmoid(&t[0], tape).unwrap()
    });
    check_op("softplus", &[a.clone()], |t, tape| {
        ops::softplus(&t[0], tape).unwrap()
    });
    check_op("relu", &[a.clone()], |t, tape| ops::relu(&t[0], tape).unwrap());
    check_op("gelu", &[a.clone()], |t, tape| ops::gelu(&t[0], tape).unwrap());

    let pos = rand_tensor(&[3, 4], 0.2, 2.0, 3);
    check_op("ln", &[pos.clone()], |t, tape| ops::ln(&t[0], tape).unwrap());
    check_op("pow_const", &[pos.clone()], |t, tape| {
        ops::pow_const(&t[0], 2.0, tape).unwrap()
    });
    check_op("pow_const_frac", &[pos], |t, tape| {
        ops::pow_const(&t[0], 1.7, tape).unwrap()
    });
    check_op("clip", &[rand_tensor(&[3, 4], -2.0, 2.0, 4)], |t, tape| {
        ops::clip(&t[0], -1.0, 1.0, tape).unwrap()
    });
}

#[test]
fn reductions_match_finite_differences() {
    let a = rand_tensor(&[2, 5], -1.0, 1.0, 5);
    let b = rand_tensor(&[2, 5], -1.0, 1.0, 6);
    check_op("sum", &[a.clone()], |t, tape| ops::sum(&t[0], tape).unwrap());
    check_op("mean", &[a.clone()], |t, tape| ops::mean(&t[0], tape).unwrap());
    check_op("dot", &[a, b], |t, tape| ops::dot(&t[0], &t[1], tape).unwrap());
}

#[test]
fn linalg_ops_match_finite_differences() {
    let a = rand_tensor(&[3, 3], -1.0, 1.0, 7);
    let b = rand_tensor(&[3, 3], -1.0, 1.0, 8);
    check_op("matmul", &[a.clone(), b.clone()], |t, tape| {
        ops::matmul(&t[0], &t[1], tape).unwrap()
    });
    check_op("matmul_bt", &[a, b], |t, tape| {
        ops::matmul_bt(&t[0], &t[1], tape).unwrap()
    });

    let x = rand_tensor(&[4, 3], -1.0, 1.0, 9);
    let w = rand_tensor(&[2, 3], -1.0, 1.0, 10);
    let bias = rand_tensor(&[2], -0.5, 0.5, 11);
    check_op("linear", &[x, w, bias], |t, tape| {
        ops::linear(&t[0], &t[1], Some(&t[2]), tape).unwrap()
    });
}

#[test]
fn structural_ops_match_finite_differences() {
    let x = rand_tensor(&[3, 6], -1.0, 1.0, 12);
    check_op("slice_cols", &[x.clone()], |t, tape| {
        ops::slice_cols(&t[0], 1, 3, tape).unwrap()
    });
    check_op("slice_rows", &[x.clone()], |t, tape| {
        ops::slice_rows(&t[0], 1, 2, tape).unwrap()
    });
    let a = rand_tensor(&[3, 2], -1.0, 1.0, 13);
    let b = rand_tensor(&[3, 4], -1.0, 1.0, 14);
    check_op("concat_cols", &[a.clone(), b.clone()], |t, tape| {
        ops::concat_cols(&[&t[0], &t[1]], tape).unwrap()
    });
    let c = rand_tensor(&[1, 2], -1.0, 1.0, 15);
    check_op("concat_rows", &[c, a], |t, tape| {
        ops::concat_rows(&t[0], &t[1], tape).unwrap()
    });
    check_op("scale_rows", &[x.clone()], |t, tape| {
        ops::scale_rows(&t[0], &[0.5, -1.5, 2.0], tape).unwrap()
    });
    check_op("tokens_to_grid", &[rand_tensor(&[6, 4], -1.0, 1.0, 16)], |t, tape| {
        ops::tokens_to_grid(&t[0], 2, 3, tape).unwrap()
    });
    check_op("slice_channels", &[rand_tensor(&[4, 2, 2], -1.0, 1.0, 17)], |t, tape| {
        ops::slice_channels(&t[0], 1, 2, tape).unwrap()
    });
}

#[test]
fn nn_ops_match_finite_differences() {
    check_op("softmax_rows", &[rand_tensor(&[3, 5], -2.0, 2.0, 18)], |t, tape| {
        ops::softmax_rows(&t[0], tape).unwrap()
    });

    let x = rand_tensor(&[2, 4], -1.0, 1.0, 19);
    let gamma = rand_tensor(&[4], 0.5, 1.5, 20);
    let beta = rand_tensor(&[4], -0.5, 0.5, 21);
    check_op("layernorm", &[x, gamma, beta], |t, tape| {
        ops::layernorm(&t[0], &t[1], &t[2], 1e-5, tape).unwrap()
    });

    let g = rand_tensor(&[4, 3, 3], -1.0, 1.0, 22);
    let ggamma = rand_tensor(&[4], 0.5, 1.5, 23);
    let gbeta = rand_tensor(&[4], -0.5, 0.5, 24);
    check_op("groupnorm", &[g, ggamma, gbeta], |t, tape| {
        ops::groupnorm(&t[0], 2, &t[1], &t[2], 1e-5, tape).unwrap()
    });

    let img = rand_tensor(&[2, 4, 4], -1.0, 1.0, 25);
    let kern = rand_tensor(&[3, 2, 2, 2], -1.0, 1.0, 26);
    let cbias = rand_tensor(&[3], -0.5, 0.5, 27);
    check_op("conv2d", &[img.clone(), kern, cbias], |t, tape| {
        ops::conv2d(&t[0], &t[1], &t[2], (1, 1), tape).unwrap()
    });

    check_op("bilinear_up", &[img.clone()], |t, tape| {
        ops::bilinear_resize(&t[0], 7, 5, tape).unwrap()
    });
    check_op("bilinear_down", &[img], |t, tape| {
        ops::bilinear_resize(&t[0], 2, 3, tape).unwrap()
    });
}

#[test]
fn layernorm_random_four_vector_matches_finite_differences() {
    // gradient wrt the input of a single 4-vector layer norm
    let x = rand_tensor(&[1, 4], -1.0, 1.0, 28);
    let gamma = Tensor::full(&[4], 1.0);
    let beta = Tensor::zeros(&[4]);
    check_op("layernorm_4vec", &[x], move |t, tape| {
        ops::layernorm(&t[0], &gamma, &beta, 1e-6, tape).unwrap()
    });
}

#[test]
fn matmul_gradient_vs_finite_differences_3x3() {
    let a = rand_tensor(&[3, 3], -1.0, 1.0, 29);
    let b = rand_tensor(&[3, 3], -1.0, 1.0, 30);
    check_op("matmul_3x3", &[a, b], |t, tape| {
        ops::matmul(&t[0], &t[1], tape).unwrap()
    });
}

#[test]
fn conv2d_kernel_gradient_on_4x4_input() {
    let x = rand_tensor(&[1, 4, 4], -1.0, 1.0, 31);
    let k = rand_tensor(&[1, 1, 2, 2], -1.0, 1.0, 32);
    let bias = Tensor::zeros(&[1]);
    check_op("conv2d_2x2_kernel", &[k], move |t, tape| {
        ops::conv2d(&x, &t[0], &bias, (0, 0), tape).unwrap()
    });
}

#[test]
fn backward_is_deterministic_bitwise() {
    let build = || {
        let mut tape = GradTape::new();
        let mut x = rand_tensor(&[4, 4], -1.0, 1.0, 33);
        let mut w = rand_tensor(&[4, 4], -1.0, 1.0, 34);
        tape.watch(&mut x);
        tape.watch(&mut w);
        let y = ops::matmul(&x, &w, tape_ref(&mut tape)).unwrap();
        let s = ops::sigmoid(&y, tape_ref(&mut tape)).unwrap();
        let loss = ops::mean(&s, tape_ref(&mut tape)).unwrap();
        tape.backward(&loss).unwrap();
        (tape.grad(&x).unwrap(), tape.grad(&w).unwrap())
    };
    let (gx1, gw1) = build();
    let (gx2, gw2) = build();
    assert!(gx1.bit_equal(&gx2));
    assert!(gw1.bit_equal(&gw2));
}

fn tape_ref(t: &mut GradTape) -> &mut GradTape {
    t
}
