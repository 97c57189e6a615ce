//! Every primitive's backward rule against central finite differences.

use proptest::prelude::*;
use unmix::autodiff::{grad_check, Graph, Primitive, Tensor, Var};
use unmix::Result;

const TOL: f64 = 1e-5;
const EPS: f64 = 1e-5;

/// Reduces `out` to a scalar with fixed, uneven weights.
fn weighted_sum(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n = g.value(out).numel();
    let w = Tensor::new(shape, (0..n).map(|k| 1.0 + 0.37 * (k % 5) as f64).collect())?;
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn check_op(op: Primitive, inputs: Vec<Tensor>) -> std::result::Result<(), TestCaseError> {
    let report = grad_check(
        |g, vars| {
            let out = g.apply(op.clone(), vars)?;
            weighted_sum(g, out)
        },
        &inputs,
        EPS,
    )
    .map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(
        report.passes(TOL),
        "{}: rel error {:e} at {:?} (analytic {}, numeric {})",
        op.name(),
        report.max_rel_error,
        report.worst,
        report.analytic_at_worst,
        report.numeric_at_worst
    );
    Ok(())
}

fn matrix(r: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, r * c).prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..4, 1usize..5)
}

fn same_shape_pair(lo: f64, hi: f64) -> impl Strategy<Value = (Tensor, Tensor)> {
    dims().prop_flat_map(move |(r, c)| (matrix(r, c, lo, hi), matrix(r, c, lo, hi)))
}

fn single(lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    dims().prop_flat_map(move |(r, c)| matrix(r, c, lo, hi))
}

/// Values bounded away from zero with random sign.
fn away_from_zero() -> impl Strategy<Value = Tensor> {
    dims().prop_flat_map(|(r, c)| signed(r, c))
}

fn signed(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
    matrix(r, c, 0.5, 2.0).prop_flat_map(|t| {
        let n = t.numel();
        prop::collection::vec(any::<bool>(), n).prop_map(move |signs| {
            let data = t
                .data()
                .iter()
                .zip(&signs)
                .map(|(v, s)| if *s { *v } else { -v })
                .collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn add((a, b) in same_shape_pair(-3.0, 3.0)) { check_op(Primitive::Add, vec![a, b])?; }

    #[test]
    fn sub((a, b) in same_shape_pair(-3.0, 3.0)) { check_op(Primitive::Sub, vec![a, b])?; }

    #[test]
    fn mul((a, b) in dims().prop_flat_map(|(r, c)| (signed(r, c), signed(r, c)))) { check_op(Primitive::Mul, vec![a, b])?; }

    #[test]
    fn div(a in single(-3.0, 3.0), seed in any::<u64>()) {
        let b = Tensor::new(
            a.shape().to_vec(),
            (0..a.numel()).map(|k| if (seed >> (k % 64)) & 1 == 0 { 0.7 + 0.1 * k as f64 } else { -1.1 - 0.05 * k as f64 }).collect(),
        ).unwrap();
        check_op(Primitive::Div, vec![a, b])?;
    }

    #[test]
    fn scalar_broadcast(a in single(-3.0, 3.0), s in 0.5f64..2.0) {
        check_op(Primitive::Mul, vec![a.clone(), Tensor::scalar(s)])?;
        check_op(Primitive::Add, vec![Tensor::scalar(s), a])?;
    }

    #[test]
    fn matmul((a, b) in (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(r, k, c)| (matrix(r, k, 0.2, 2.0), matrix(k, c, 0.2, 2.0)))) {
        check_op(Primitive::MatMul, vec![a, b])?;
    }

    #[test]
    fn transpose(a in single(-3.0, 3.0)) { check_op(Primitive::Transpose, vec![a])?; }

    #[test]
    fn reduce_sum(a in single(-3.0, 3.0)) { check_op(Primitive::ReduceSum, vec![a])?; }

    #[test]
    fn reduce_mean(a in single(-3.0, 3.0)) { check_op(Primitive::ReduceMean, vec![a])?; }

    #[test]
    fn exp(a in single(-2.0, 2.0)) { check_op(Primitive::Exp, vec![a])?; }

    #[test]
    fn log(a in single(0.3, 3.0)) { check_op(Primitive::Log, vec![a])?; }

    #[test]
    fn tanh(a in single(-2.0, 2.0)) { check_op(Primitive::Tanh, vec![a])?; }

    #[test]
    fn sigmoid(a in single(-4.0, 4.0)) { check_op(Primitive::Sigmoid, vec![a])?; }

    #[test]
    fn square(a in away_from_zero()) { check_op(Primitive::Square, vec![a])?; }

    #[test]
    fn sqrt(a in single(0.3, 3.0)) { check_op(Primitive::Sqrt, vec![a])?; }

    #[test]
    fn negate(a in single(-3.0, 3.0)) { check_op(Primitive::Negate, vec![a])?; }

    #[test]
    fn broadcast_add_row((r, c) in dims(), seed in 0u64..1000) {
        let a = Tensor::new(vec![r, c], (0..r * c).map(|i| ((i as f64 + seed as f64) * 1.3).cos()).collect()).unwrap();
        let row = Tensor::vector((0..c).map(|i| (i as f64 * 0.9 + seed as f64).sin()).collect());
        check_op(Primitive::BroadcastAddRow, vec![a, row])?;
    }

    #[test]
    fn gather(a in single(-3.0, 3.0), picks in prop::collection::vec(any::<prop::sample::Index>(), 1..8)) {
        let n = a.numel();
        let indices: Vec<usize> = picks.iter().map(|p| p.index(n)).collect();
        check_op(Primitive::Gather { shape: vec![indices.len()], indices }, vec![a])?;
    }

    #[test]
    fn clamp(a in away_from_zero()) {
        check_op(Primitive::Clamp { lo: -1.0, hi: 1.0 }, vec![a.map(|v| if v.abs() > 0.9 && v.abs() < 1.1 { v * 1.5 } else { v })])?;
    }

    #[test]
    fn gp_kl(
        mu in (2usize..10).prop_flat_map(|t| signed(t, 1)),
        var in 0.05f64..2.0,
        ls_steps in 0.7f64..3.0,
    ) {
        let t = mu.numel();
        let grid: Vec<f64> = (0..t).map(|i| i as f64 / t as f64).collect();
        let ls = ls_steps / t as f64;
        check_op(
            Primitive::GpKl { grid, base_jitter: 1e-3 },
            vec![Tensor::vector(mu.data().to_vec()), Tensor::scalar(var), Tensor::scalar(ls)],
        )?;
    }
}

#[test]
fn unreachable_leaves_get_zero_gradient() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let b = g.param(Tensor::vector(vec![3.0, 4.0]));
    let _unused = g.exp(b).unwrap();
    let loss = g.sum(a).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(b).data(), &[0.0, 0.0]);
    assert_eq!(grads.wrt(a).data(), &[1.0, 1.0]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let a = g.param(Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1]]).unwrap());
        let b = g.param(Tensor::from_rows(&[vec![1.5], vec![-0.7]]).unwrap());
        let p = g.matmul(a, b).unwrap();
        let t = g.tanh(p).unwrap();
        let loss = g.sum(t).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).clone(), grads.wrt(a), grads.wrt(b))
    };
    assert_eq!(run(), run());
}
