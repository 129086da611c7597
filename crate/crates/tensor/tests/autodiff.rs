use grlb_tensor::{grad_check, CounterRng, Graph, ParamStore, Tensor, TensorError, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_slice(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], rng: &mut CounterRng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = rng.normal_vec(n);
    Tensor::new(shape.to_vec(), v.into_iter().map(|x| x * scale).collect()).unwrap()
}

#[test]
fn add_is_componentwise() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::from_slice(vec![2], &[1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::from_slice(vec![2], &[3.0, 4.0]).unwrap());
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn all_ones_conv_counts_in_bounds_neighbours() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(v[corner], 4.0);
    }
    for edge in [1, 3, 5, 7] {
        assert_eq!(v[edge], 6.0);
    }
}

#[test]
fn silu_of_zero_is_zero() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.silu(x).unwrap();
    assert_eq!(g.value(y).item(), 0.0);
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2]));
    let b = g.constant(Tensor::zeros(vec![3]));
    match g.add(a, b).unwrap_err() {
        TensorError::ShapeMismatch { op, lhs, rhs } => {
            assert_eq!(op, "add");
            assert_eq!((lhs, rhs), (vec![2], vec![3]));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn log_of_zero_is_rejected_as_non_finite() {
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::zeros(vec![2]));
    assert!(matches!(g.log(a), Err(TensorError::NonFinite { op: "log" })));
}

#[test]
fn mean_of_squares_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.mean(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(x).unwrap().data();
    for (got, want) in gx.iter().zip([2.0 / 3.0, 4.0 / 3.0, 2.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let p = g.param(t(&[3], &[5.0, 6.0, 7.0]));
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::from_slice(vec![2, 2], &[-1.0, 0.5, 3.0, 9.0]).unwrap());
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn second_backward_without_reset_fails() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::full(vec![2], 1.0));
    let loss = g.sum(x).unwrap();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(TensorError::BackwardTwice)));
    g.reset_backward();
    assert!(g.backward(loss).is_ok());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::full(vec![2], 1.0));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss { .. })));
}

#[test]
fn linear_mse_grad_check_is_tight() {
    let mut rng = CounterRng::new(1);
    let mut p = ParamStore::<f64>::new();
    p.insert("w", random(&[4, 6], &mut rng, 0.5));
    p.insert("b", random(&[4], &mut rng, 0.5));
    let x = random(&[5, 6], &mut rng, 1.0);
    let target = random(&[5, 4], &mut rng, 1.0);
    let report = grad_check(
        &p,
        |g, b| {
            let xv = g.constant(x.clone());
            let tv = g.constant(target.clone());
            let y = g.linear(xv, b.var("w")?, Some(b.var("b")?))?;
            g.mse(y, tv)
        },
        64,
        1e-3,
        1e-4,
        &mut rng,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.coords_checked, 64);
}

#[test]
fn constant_loss_has_zero_error() {
    let mut rng = CounterRng::new(2);
    let mut p = ParamStore::<f64>::new();
    p.insert("w", Tensor::zeros(vec![3, 3]));
    let report = grad_check(
        &p,
        |g, b| {
            let w = b.var("w")?;
            let z = g.scale(w, 0.0)?;
            let s = g.sum(z)?;
            g.add_scalar(s, 1.5)
        },
        64,
        1e-3,
        1e-12,
        &mut rng,
    )
    .unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

/// conv → group-norm → silu → conv → pool/upsample → mse: the building
/// blocks of the denoiser.
fn conv_stack(g: &mut Graph<f64>, b: &grlb_tensor::Bound, x: &Tensor<f64>, target: &Tensor<f64>) -> grlb_tensor::Result<Var> {
    let xv = g.constant(x.clone());
    let tv = g.constant(target.clone());
    let h = g.conv2d(xv, b.var("c1.w")?, Some(b.var("c1.b")?))?;
    let h = g.group_norm(h, b.var("gn.g")?, b.var("gn.b")?, 8)?;
    let h = g.silu(h)?;
    let e = g.linear(b.var("emb")?, b.var("proj.w")?, Some(b.var("proj.b")?))?;
    let h = g.add_per_channel(h, e)?;
    let d = g.avg_pool2(h)?;
    let u = g.upsample2(d)?;
    let h = g.concat_channels(&[h, u])?;
    let y = g.conv2d(h, b.var("c2.w")?, Some(b.var("c2.b")?))?;
    g.mse(y, tv)
}

#[test]
fn conv_silu_stack_grad_check() {
    let mut rng = CounterRng::new(3);
    let mut p = ParamStore::<f64>::new();
    p.insert("c1.w", random(&[8, 2, 3, 3], &mut rng, 0.4));
    p.insert("c1.b", random(&[8], &mut rng, 0.1));
    p.insert("gn.g", random(&[8], &mut rng, 0.3).map(|v| v + 1.0));
    p.insert("gn.b", random(&[8], &mut rng, 0.1));
    p.insert("emb", random(&[2, 4], &mut rng, 1.0));
    p.insert("proj.w", random(&[8, 4], &mut rng, 0.3));
    p.insert("proj.b", random(&[8], &mut rng, 0.1));
    p.insert("c2.w", random(&[1, 16, 3, 3], &mut rng, 0.2));
    p.insert("c2.b", random(&[1], &mut rng, 0.1));
    let x = random(&[2, 2, 4, 6], &mut rng, 1.0);
    let target = random(&[2, 1, 4, 6], &mut rng, 1.0);
    let report = grad_check(&p, |g, b| conv_stack(g, b, &x, &target), 128, 1e-3, 1e-3, &mut rng).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let run = || {
        let mut rng = CounterRng::new(5);
        let x: Tensor<f32> = random(&[2, 3, 8, 8], &mut rng, 1.0).cast();
        let w: Tensor<f32> = random(&[8, 3, 3, 3], &mut rng, 0.3).cast();
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x);
        let wv = g.param(w);
        let y = g.conv2d(xv, wv, None).unwrap();
        let y = g.silu(y).unwrap();
        let l = g.mean(y).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(y).data().to_vec(), grads.get(wv).unwrap().data().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = CounterRng::new(6);
    let x0 = random(&[1, 2, 4, 4], &mut rng, 1.0);
    let w0 = random(&[2, 2, 3, 3], &mut rng, 0.5);
    let grad_of = |alpha: f64, beta: f64| {
        let mut g = Graph::<f64>::new();
        let x = g.constant(x0.clone());
        let w = g.param(w0.clone());
        let y = g.conv2d(x, w, None).unwrap();
        let a = g.abs(y).unwrap();
        let l1 = g.mean(a).unwrap();
        let s = g.sigmoid(y).unwrap();
        let l2 = g.sum(s).unwrap();
        let l1s = g.scale(l1, alpha).unwrap();
        let l2s = g.scale(l2, beta).unwrap();
        let l = g.add(l1s, l2s).unwrap();
        g.backward(l).unwrap().get(w).unwrap().clone()
    };
    let combined = grad_of(0.7, -1.3);
    let g1 = grad_of(1.0, 0.0);
    let g2 = grad_of(0.0, 1.0);
    for i in 0..combined.numel() {
        let want = 0.7 * g1.data()[i] - 1.3 * g2.data()[i];
        assert!((combined.data()[i] - want).abs() < 1e-12);
    }
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Silu,
    Sigmoid,
    Abs,
    Square,
    LogSigmoid,
    Clamp,
}

fn apply(g: &mut Graph<f64>, op: Unary, v: Var) -> grlb_tensor::Result<Var> {
    match op {
        Unary::Silu => g.silu(v),
        Unary::Sigmoid => g.sigmoid(v),
        Unary::Abs => g.abs(v),
        Unary::Square => g.mul(v, v),
        Unary::LogSigmoid => {
            let s = g.sigmoid(v)?;
            g.log(s)
        }
        Unary::Clamp => g.clamp(v, -0.8, 0.8),
    }
}

fn unary() -> impl Strategy<Value = Unary> {
    prop_oneof![
        Just(Unary::Silu),
        Just(Unary::Sigmoid),
        Just(Unary::Abs),
        Just(Unary::Square),
        Just(Unary::LogSigmoid),
        Just(Unary::Clamp),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Random conv → unary → crop → combination chains agree with finite
    /// differences.
    #[test]
    fn random_compositions_match_finite_differences(
        seed in 0u64..1_000_000,
        first in unary(),
        second in unary(),
        cout in 1usize..4,
        k in prop_oneof![Just(1usize), Just(3usize)],
    ) {
        let mut rng = CounterRng::new(seed);
        let mut p = ParamStore::<f64>::new();
        p.insert("w", random(&[cout, 2, k, k], &mut rng, 0.5));
        p.insert("b", random(&[cout], &mut rng, 0.3));
        p.insert("s", random(&[1, cout, 4, 4], &mut rng, 1.0));
        let x = random(&[1, 2, 4, 4], &mut rng, 1.0);
        let report = grad_check(&p, |g, b| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, b.var("w")?, Some(b.var("b")?))?;
            let y = apply(g, first, y)?;
            let y = g.mul(y, b.var("s")?)?;
            let y = apply(g, second, y)?;
            let c = g.crop(y, 1..4, 0..3)?;
            let m = g.mean_per_sample(c)?;
            let z = g.sub(m, m)?;
            let z = g.add(z, m)?;
            g.sum(z)
        }, 64, 1e-3, 1e-3, &mut rng).unwrap();
        prop_assert!(report.passed, "{:?}", report);
    }
}
