use bnnps_core::autodiff::{finite_diff_check, AdError, Graph, NodeId, Param, Tensor};
use bnnps_core::rng::RngStream;
use proptest::prelude::*;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn normal(shape: &[usize], seed: u64) -> Tensor {
    RngStream::new(seed, 0).standard_normal(shape)
}

/// Values bounded away from zero, for ops with a kink or a pole there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    normal(shape, seed).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    normal(shape, seed).map(|v| v.abs() + 0.5)
}

/// Reduces `out` to a scalar through fixed random weights so every output
/// entry gets a distinct adjoint.
fn weigh(g: &mut Graph, out: NodeId) -> Result<NodeId, AdError> {
    let shape = g.shape(out).to_vec();
    let c = g.constant(normal(&shape, 99));
    let p = g.mul(out, c)?;
    g.sum_all(p)
}

fn check<F>(params: &[Tensor], op: F)
where
    F: Fn(&mut Graph, &[Param]) -> Result<NodeId, AdError>,
{
    let err = finite_diff_check(
        |g, ps| {
            let out = op(g, ps)?;
            weigh(g, out)
        },
        params,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "relative error {err}");
}

#[test]
fn matmul_plain_batched_and_shared() {
    check(&[normal(&[3, 4], 1), normal(&[4, 2], 2)], |g, p| g.matmul(p[0].node, p[1].node));
    check(&[normal(&[2, 3, 4], 3), normal(&[2, 4, 5], 4)], |g, p| g.matmul(p[0].node, p[1].node));
    check(&[normal(&[2, 3, 4], 5), normal(&[4, 5], 6)], |g, p| g.matmul(p[0].node, p[1].node));
    check(&[normal(&[3, 4], 7), normal(&[2, 4, 5], 8)], |g, p| g.matmul(p[0].node, p[1].node));
}

#[test]
fn linear_shared_and_batched() {
    check(&[normal(&[5, 3], 1), normal(&[4, 4], 2)], |g, p| g.linear(p[0].node, p[1].node));
    check(&[normal(&[2, 5, 3], 3), normal(&[4, 4], 4)], |g, p| g.linear(p[0].node, p[1].node));
    check(&[normal(&[2, 5, 3], 5), normal(&[2, 4, 4], 6)], |g, p| g.linear(p[0].node, p[1].node));
    // large enough to take the blocked gemm path
    check(&[normal(&[3, 20, 17], 7), normal(&[3, 19, 18], 8)], |g, p| g.linear(p[0].node, p[1].node));
}

#[test]
fn binary_ops_with_broadcasting() {
    let shapes: [(&[usize], &[usize]); 4] = [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[4]), (&[3, 1], &[1, 4]), (&[2, 3, 4], &[3, 1])];
    for (i, (a, b)) in shapes.iter().enumerate() {
        let s = 10 * i as u64;
        check(&[normal(a, s), normal(b, s + 1)], |g, p| g.add(p[0].node, p[1].node));
        check(&[normal(a, s + 2), normal(b, s + 3)], |g, p| g.sub(p[0].node, p[1].node));
        check(&[normal(a, s + 4), normal(b, s + 5)], |g, p| g.mul(p[0].node, p[1].node));
        check(&[normal(a, s + 6), away_from_zero(b, s + 7)], |g, p| g.div(p[0].node, p[1].node));
    }
}

#[test]
fn unary_ops() {
    let x = normal(&[3, 5], 11);
    check(&[away_from_zero(&[3, 5], 12)], |g, p| g.relu(p[0].node));
    check(std::slice::from_ref(&x), |g, p| g.tanh(p[0].node));
    check(std::slice::from_ref(&x), |g, p| g.exp(p[0].node));
    check(&[positive(&[3, 5], 13)], |g, p| g.log(p[0].node));
    check(std::slice::from_ref(&x), |g, p| g.square(p[0].node));
    check(&[positive(&[3, 5], 14)], |g, p| g.sqrt(p[0].node));
    check(std::slice::from_ref(&x), |g, p| g.neg(p[0].node));
    check(std::slice::from_ref(&x), |g, p| g.scale(p[0].node, -2.5));
    check(&[x], |g, p| g.add_scalar(p[0].node, 3.0));
}

#[test]
fn soft_clip_both_regions() {
    let x = Tensor::vector(vec![-13.0, -9.1, -4.0, 0.3, 2.0, 7.5, 8.6, 20.0]);
    check(&[x], |g, p| g.soft_clip(p[0].node, 8.0, 10.0));
}

#[test]
fn reductions() {
    let x = normal(&[2, 3, 4], 21);
    for axis in 0..3 {
        check(std::slice::from_ref(&x), |g, p| g.sum_axis(p[0].node, axis));
        check(std::slice::from_ref(&x), |g, p| g.mean_axis(p[0].node, axis));
        check(std::slice::from_ref(&x), |g, p| g.logsumexp_axis(p[0].node, axis));
    }
    check(&[x], |g, p| g.sum_all(p[0].node));
}

#[test]
fn shape_ops() {
    let a = normal(&[2, 3, 4], 31);
    let b = normal(&[2, 3, 2], 32);
    check(&[a.clone(), b], |g, p| g.concat(&[p[0].node, p[1].node], 2));
    check(&[a.clone(), normal(&[1, 3, 4], 33)], |g, p| g.concat(&[p[0].node, p[1].node], 0));
    check(std::slice::from_ref(&a), |g, p| g.slice(p[0].node, 1, 1, 3));
    check(std::slice::from_ref(&a), |g, p| g.reshape(p[0].node, &[6, 4]));
    check(std::slice::from_ref(&a), |g, p| g.transpose(p[0].node));
    check(&[normal(&[3, 1], 34)], |g, p| g.broadcast_to(p[0].node, &[2, 3, 4]));
    check(&[normal(&[5, 2], 35)], |g, p| g.gather(p[0].node, &[4, 0, 0, 2, 4, 4]));
    check(&[normal(&[5], 36)], |g, p| g.gather(p[0].node, &[1, 1, 3]));
}

#[test]
fn composite_network() {
    // two-layer tanh net with a gaussian log-likelihood head
    let params = [normal(&[4, 3], 41), normal(&[2, 6, 3], 42), normal(&[2, 1, 7], 43), normal(&[1], 44)];
    check(&params, |g, p| {
        let x = g.constant(normal(&[2, 4, 2], 45));
        let h = g.linear(x, p[1].node)?;
        let h = g.tanh(h)?;
        let o = g.linear(h, p[2].node)?;
        let y = g.constant(normal(&[2, 4, 1], 46));
        let d = g.sub(o, y)?;
        let d2 = g.square(d)?;
        let var = g.exp(p[3].node)?;
        let q = g.div(d2, var)?;
        let t = g.transpose(p[0].node)?;
        let m = g.matmul(p[0].node, t)?;
        let m = g.sum_all(m)?;
        let s = g.logsumexp_axis(q, 0)?;
        let s = g.sum_all(s)?;
        g.add(s, m)
    });
}

#[test]
fn non_scalar_root_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x.node), Err(AdError::NotScalar { .. })));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let b = g.param(Tensor::vector(vec![3.0]));
    let s = g.sum_all(a.node).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(&a).data(), &[1.0, 1.0]);
    assert_eq!(grads.get(&b).data(), &[0.0]);
}

#[test]
fn reused_node_accumulates() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![3.0]));
    let m = g.mul(a.node, a.node).unwrap();
    let s = g.add(m, a.node).unwrap();
    let s = g.sum_all(s).unwrap();
    assert_eq!(g.backward(s).unwrap().get(&a).data(), &[7.0]);
}

proptest! {
    #[test]
    fn logsumexp_shift_invariance(xs in prop::collection::vec(-50.0f64..50.0, 1..20), c in -500.0f64..500.0) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(xs.clone()));
        let b = g.constant(Tensor::vector(xs.iter().map(|v| v + c).collect()));
        let la = g.logsumexp_axis(a, 0).unwrap();
        let lb = g.logsumexp_axis(b, 0).unwrap();
        let (va, vb) = (g.value(la).item(), g.value(lb).item());
        prop_assert!((vb - va - c).abs() <= 1e-9 * (1.0 + c.abs() + va.abs()));
    }

    #[test]
    fn logsumexp_bounds(xs in prop::collection::vec(-700.0f64..700.0, 1..30)) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(xs.clone()));
        let l = g.logsumexp_axis(a, 0).unwrap();
        let v = g.value(l).item();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= max - 1e-9);
        prop_assert!(v <= max + (xs.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn broadcast_add_gradient_counts_copies(rows in 1usize..6, cols in 1usize..6) {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[rows, cols]));
        let b = g.param(Tensor::zeros(&[cols]));
        let s = g.add(a.node, b.node).unwrap();
        let s = g.sum_all(s).unwrap();
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.get(&b).data().iter().all(|&v| v == rows as f64));
        prop_assert!(grads.get(&a).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn linear_matches_matmul_plus_bias(b in 1usize..4, rows in 1usize..6, fan_in in 1usize..5, out in 1usize..5, seed in 0u64..1000) {
        let mut s = RngStream::new(seed, 0);
        let h = s.standard_normal(&[b, rows, fan_in]);
        let w = s.standard_normal(&[b, out, fan_in + 1]);
        let mut g = Graph::new();
        let hn = g.constant(h.clone());
        let wn = g.constant(w.clone());
        let y = g.linear(hn, wn).unwrap();
        let y = g.value(y).clone();
        for k in 0..b {
            for r in 0..rows {
                for j in 0..out {
                    let wrow = &w.data()[(k * out + j) * (fan_in + 1)..(k * out + j + 1) * (fan_in + 1)];
                    let hrow = &h.data()[(k * rows + r) * fan_in..(k * rows + r + 1) * fan_in];
                    let want: f64 = hrow.iter().zip(wrow).map(|(a, c)| a * c).sum::<f64>() + wrow[fan_in];
                    let got = y.data()[(k * rows + r) * out + j];
                    prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
                }
            }
        }
    }

    #[test]
    fn soft_clip_is_bounded_and_monotone(xs in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(sorted.clone()));
        let y = g.soft_clip(x, 8.0, 10.0).unwrap();
        let y = g.value(y).data().to_vec();
        for (i, (&v, &xv)) in y.iter().zip(&sorted).enumerate() {
            prop_assert!(v.abs() <= 10.0);
            if xv.abs() <= 8.0 { prop_assert_eq!(v, xv); }
            if i > 0 { prop_assert!(v >= y[i - 1]); }
        }
    }
}
