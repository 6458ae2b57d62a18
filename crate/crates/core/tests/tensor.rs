use dgsct::tensor::{finite_diff_check, rnn_forward, sigmoid, RnnParams, DEFAULT_STEP};
use dgsct::{Error, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).unwrap()
}

/// Values with magnitude in `[0.1, 2)` and random sign, clear of kinks at 0.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .unwrap()
}

fn eval(f: impl for<'t> Fn(&'t Tape) -> Result<Var<'t>>) -> Tensor {
    let tape = Tape::new();
    (*f(&tape).unwrap().value()).clone()
}

/// Max relative error of `sum(w * op(x))` with positive weights `w`.
fn op_error(x: &Tensor, weights_seed: u64, op: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>>) -> f64 {
    let probe = eval(|tape| op(tape.constant(x)));
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = random(probe.shape(), 0.5, 1.5, &mut rng);
    finite_diff_check(x, DEFAULT_STEP, |tape, leaf| {
        op(leaf)?.hadamard(&tape.constant(&w))?.sum_all()
    })
    .unwrap()
    .max_rel_error
}

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let out = eval(|tape| tape.constant(&a).matmul(&tape.constant(&Tensor::eye(2))));
    assert_eq!(out, a);
    let out = eval(|tape| tape.constant(&t(&[1, 2], &[1.0, 2.0])).matmul(&tape.constant(&t(&[2, 1], &[3.0, 4.0]))));
    assert_eq!(out, t(&[1, 1], &[11.0]));
    let out = eval(|tape| tape.constant(&t(&[1, 2], &[0.0, 0.0])).matmul(&tape.constant(&t(&[2, 1], &[5.0, 7.0]))));
    assert_eq!(out, t(&[1, 1], &[0.0]));
}

#[test]
fn matmul_rejects_mismatched_inner_extent() {
    let tape = Tape::new();
    let err = tape
        .constant(&Tensor::ones(&[2, 3]))
        .matmul(&tape.constant(&Tensor::ones(&[2, 2])))
        .unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}

#[test]
fn hadamard_examples() {
    let x = t(&[2], &[2.0, 3.0]);
    assert_eq!(eval(|tape| tape.constant(&x).hadamard(&tape.constant(&Tensor::ones(&[2])))), x);
    assert_eq!(
        eval(|tape| tape.constant(&x).hadamard(&tape.constant(&t(&[2], &[4.0, 5.0])))),
        t(&[2], &[8.0, 15.0])
    );
    let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let col = t(&[2, 1], &[10.0, -1.0]);
    assert_eq!(
        eval(|tape| tape.constant(&m).hadamard(&tape.constant(&col))),
        t(&[2, 3], &[10.0, 20.0, 30.0, -4.0, -5.0, -6.0])
    );
}

#[test]
fn mean_examples() {
    assert_eq!(eval(|tape| tape.constant(&t(&[3], &[1.0, 2.0, 3.0])).mean_axis(0)).item(), 2.0);
    assert_eq!(eval(|tape| tape.constant(&Tensor::zeros(&[4])).mean_axis(0)).item(), 0.0);
    assert_eq!(eval(|tape| tape.constant(&Tensor::full(&[5], 1.25)).mean_axis(0)).item(), 1.25);
    let tape = Tape::new();
    let err = tape.constant(&Tensor::ones(&[2, 2])).mean_axis(2).unwrap_err();
    assert_eq!(err, Error::AxisOutOfRange { axis: 2, rank: 2 });
}

#[test]
fn sigmoid_examples() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!((sigmoid(1.0) - 0.7310585786).abs() < 1e-10);
    assert!((sigmoid(3.7) + sigmoid(-3.7) - 1.0).abs() < 1e-15);
}

#[test]
fn softmax_examples() {
    let out = eval(|tape| tape.constant(&Tensor::full(&[4], 0.7)).softmax(0));
    assert!(out.data().iter().all(|p| (p - 0.25).abs() < 1e-15));
    let out = eval(|tape| tape.constant(&t(&[2], &[0.0, 2f64.ln()])).softmax(0));
    assert!((out.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((out.data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn conv_examples() {
    let ones = Tensor::ones(&[1, 2, 2]);
    let out = eval(|tape| tape.constant(&ones).conv2d(&tape.constant(&Tensor::full(&[1, 1, 1, 1], 2.0))));
    assert_eq!(out, Tensor::full(&[1, 2, 2], 2.0));
    let x = t(&[1, 2, 2], &[1.0, -2.0, 3.0, 0.5]);
    let out = eval(|tape| tape.constant(&x).conv2d(&tape.constant(&Tensor::zeros(&[3, 1, 3, 3]))));
    assert_eq!(out, Tensor::zeros(&[3, 2, 2]));
    let x = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
    let id = Tensor::eye(2).reshape(&[2, 2, 1, 1]).unwrap();
    assert_eq!(eval(|tape| tape.constant(&x).conv2d(&tape.constant(&id))), x);
    let tape = Tape::new();
    let err = tape
        .constant(&x)
        .conv2d(&tape.constant(&Tensor::zeros(&[1, 2, 2, 2])))
        .unwrap_err();
    assert_eq!(err, Error::EvenKernel(2));
}

#[test]
fn rnn_examples() {
    let scalar = |v: f64| t(&[1, 1], &[v]);
    let params = RnnParams {
        w_ih: scalar(1.0),
        w_hh: scalar(1.0),
        b: t(&[1], &[0.0]),
    };
    let tape = Tape::new();
    let bound = dgsct::param::bind(&params, &tape, false);
    let states = rnn_forward(&tape.constant(&t(&[2, 1], &[1.0, 0.0])), &bound).unwrap();
    let h = states.value();
    assert!((h.data()[0] - 0.76159).abs() < 1e-5);
    assert!((h.data()[1] - 0.64201).abs() < 1e-5);
    assert_eq!(h.data()[1], 1f64.tanh().tanh());
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.param(&Tensor::scalar(2.0));
    let y = tape.param(&Tensor::scalar(5.0));
    let frozen = tape.constant(&Tensor::scalar(3.0));
    let root = x.hadamard(&y).unwrap().hadamard(&frozen).unwrap();
    let grads = tape.backward(root).unwrap();
    assert_eq!(grads.wrt(&x).item(), 15.0);
    assert!(grads.get(&frozen).is_none());

    let tape = Tape::new();
    let z = tape.param(&Tensor::scalar(0.0));
    let grads = tape.backward(z.sigmoid().unwrap()).unwrap();
    assert_eq!(grads.wrt(&z).item(), 0.25);
}

#[test]
fn finite_diff_examples() {
    // With a power-of-two step every perturbed square is representable.
    let square = finite_diff_check(&Tensor::scalar(3.0), 2f64.powi(-14), |_, x| x.hadamard(&x)).unwrap();
    assert_eq!(square.max_rel_error, 0.0);
    assert_eq!(square.numeric.item(), 6.0);
    let square = finite_diff_check(&Tensor::scalar(3.0), DEFAULT_STEP, |_, x| x.hadamard(&x)).unwrap();
    assert!(square.max_rel_error < 1e-10);
    let constant = finite_diff_check(&Tensor::ones(&[3]), DEFAULT_STEP, |tape, _| {
        Ok(tape.constant(&Tensor::scalar(4.0)))
    })
    .unwrap();
    assert_eq!(constant.max_rel_error, 0.0);
    let x = random(&[8], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(8));
    let sig = finite_diff_check(&x, DEFAULT_STEP, |_, x| x.sigmoid()?.sum_all()).unwrap();
    assert!(sig.max_rel_error < 1e-6, "{}", sig.max_rel_error);
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=3)
}

fn config() -> Config {
    Config {
        cases: 48,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

const OP_TOL: f64 = 1e-6;

proptest! {
    #![proptest_config(config())]

    #[test]
    fn elementwise_ops_pass_gradcheck(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = off_zero(&shape, &mut rng);
        let ops: Vec<(&str, Box<dyn for<'t> Fn(Var<'t>) -> Result<Var<'t>>>)> = vec![
            ("sigmoid", Box::new(|x| x.sigmoid())),
            ("tanh", Box::new(|x| x.tanh())),
            ("relu", Box::new(|x| x.relu())),
            ("gelu", Box::new(|x| x.gelu())),
            ("exp", Box::new(|x| x.exp())),
            ("affine", Box::new(|x| x.affine(-1.5, 0.25))),
            ("clamp_max", Box::new(|x| x.clamp_max(0.05))),
            ("square", Box::new(|x| x.hadamard(&x))),
        ];
        for (name, op) in &ops {
            let err = op_error(&x, seed ^ 1, op);
            prop_assert!(err < OP_TOL, "{name}: {err}");
        }
    }

    #[test]
    fn axis_ops_pass_gradcheck(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, -2.0, 2.0, &mut rng);
        let rank = shape.len();
        for axis in 0..rank {
            let err = op_error(&x, seed, |x| x.softmax(axis));
            prop_assert!(err < OP_TOL, "softmax {axis}: {err}");
            let err = op_error(&x, seed, |x| x.log_softmax(axis));
            prop_assert!(err < OP_TOL, "log_softmax {axis}: {err}");
            let err = op_error(&x, seed, |x| x.mean_axis(axis));
            prop_assert!(err < OP_TOL, "mean_axis {axis}: {err}");
            let len = shape[axis].div_ceil(2);
            let err = op_error(&x, seed, |x| x.slice(axis, shape[axis] - len, len));
            prop_assert!(err < OP_TOL, "slice {axis}: {err}");
        }
        let err = op_error(&x, seed, |x| x.reshape(&[x.value().len()]));
        prop_assert!(err < OP_TOL, "reshape: {err}");
        let err = op_error(&x, seed, |x| x.sum_all()?.scale(0.5));
        prop_assert!(err < OP_TOL, "sum_all: {err}");
        if rank >= 2 {
            let err = op_error(&x, seed, |x| x.transpose());
            prop_assert!(err < OP_TOL, "transpose: {err}");
        }
        let err = op_error(&x, seed, |x| x.normalize_rows());
        prop_assert!(err < OP_TOL, "normalize_rows: {err}");
        let rows = x.len() / shape[rank - 1];
        let picks: Vec<usize> = (0..rows).map(|r| r % shape[rank - 1]).collect();
        let err = op_error(&x, seed, |x| x.pick(&picks));
        prop_assert!(err < OP_TOL, "pick: {err}");
    }

    #[test]
    fn binary_ops_pass_gradcheck_in_both_operands(shape in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&shape, -2.0, 2.0, &mut rng);
        let b = random(&shape, -2.0, 2.0, &mut rng);
        // Stretch the last axis of `c` to exercise broadcasting.
        let mut narrow = shape.clone();
        *narrow.last_mut().unwrap() = 1;
        let c = random(&narrow, -2.0, 2.0, &mut rng);
        for (name, other) in [("same", &b), ("broadcast", &c)] {
            let e = op_error(&a, seed, |x| x.hadamard(&x.tape().constant(other)));
            prop_assert!(e < OP_TOL, "hadamard lhs {name}: {e}");
            let e = op_error(&a, seed, |x| x.tape().constant(other).sub(&x));
            prop_assert!(e < OP_TOL, "sub rhs {name}: {e}");
            let e = op_error(&a, seed, |x| x.add(&x.tape().constant(other)));
            prop_assert!(e < OP_TOL, "add lhs {name}: {e}");
        }
        let e = op_error(&c, seed, |x| x.tape().constant(&a).hadamard(&x));
        prop_assert!(e < OP_TOL, "hadamard stretched operand: {e}");
        let e = op_error(&a, seed, |x| x.tape().concat(&[x, x.tape().constant(&b)], 0));
        prop_assert!(e < OP_TOL, "concat: {e}");
    }

    #[test]
    fn matmul_and_conv_pass_gradcheck(m in 1usize..=4, k in 1usize..=4, n in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[m, k], -2.0, 2.0, &mut rng);
        let b = random(&[k, n], -2.0, 2.0, &mut rng);
        let batched = random(&[2, m, k], -2.0, 2.0, &mut rng);
        let e = op_error(&a, seed, |x| x.matmul(&x.tape().constant(&b)));
        prop_assert!(e < OP_TOL, "matmul lhs: {e}");
        let e = op_error(&b, seed, |x| x.tape().constant(&a).matmul(&x));
        prop_assert!(e < OP_TOL, "matmul rhs: {e}");
        let e = op_error(&b, seed, |x| x.tape().constant(&batched).matmul(&x));
        prop_assert!(e < OP_TOL, "batched matmul shared rhs: {e}");

        let input = random(&[k, m, n], -2.0, 2.0, &mut rng);
        let kernel = random(&[2, k, 3, 3], -1.0, 1.0, &mut rng);
        let e = op_error(&input, seed, |x| x.conv2d(&x.tape().constant(&kernel)));
        prop_assert!(e < OP_TOL, "conv input: {e}");
        let e = op_error(&kernel, seed, |x| x.tape().constant(&input).conv2d(&x));
        prop_assert!(e < OP_TOL, "conv kernel: {e}");
    }

    #[test]
    fn rnn_passes_gradcheck(steps in 1usize..=4, width in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = RnnParams::init(width, width, &mut rng);
        let seq = random(&[steps, width], -1.0, 1.0, &mut rng);
        let e = op_error(&seq, seed, |x| {
            let bound = dgsct::param::bind(&params, x.tape(), false);
            rnn_forward(&x, &bound)
        });
        prop_assert!(e < OP_TOL, "rnn input: {e}");
        let e = op_error(&params.w_hh, seed, |w| {
            let tape = w.tape();
            let bound = RnnParams { w_ih: tape.constant(&params.w_ih), w_hh: w, b: tape.constant(&params.b) };
            rnn_forward(&tape.constant(&seq), &bound)
        });
        prop_assert!(e < OP_TOL, "rnn recurrent weight: {e}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(shape in shape_strategy(), shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&shape, -10.0, 10.0, &mut rng);
        let last = shape.len() - 1;
        let p = eval(|tape| tape.constant(&x).softmax(last));
        for row in p.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        let shifted = eval(|tape| tape.constant(&x).add_scalar(shift)?.softmax(last));
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn matmul_by_identity_is_exact(m in 1usize..=6, n in 1usize..=6, seed in any::<u64>()) {
        let a = random(&[m, n], -1e3, 1e3, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = eval(|tape| tape.constant(&a).matmul(&tape.constant(&Tensor::eye(n))));
        prop_assert!(out.max_abs_diff(&a) <= 1e-15);
    }

    #[test]
    fn sigmoid_stays_inside_open_unit_interval(x in prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL) {
        let s = sigmoid(x);
        prop_assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
    }
}
