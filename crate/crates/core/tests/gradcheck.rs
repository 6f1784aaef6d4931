//! Reverse-mode gradients of every graph op against central differences.

mod common;

use std::rc::Rc;

use common::{gradcheck, params, seeded, FD_TOL};
use hwlab_core::numerics::{Mask, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn dim() -> impl Strategy<Value = usize> {
    1usize..=4
}

proptest! {
    #![proptest_config(seeded(24, 11))]

    #[test]
    fn elementwise_binary(r in dim(), c in dim(), seed in any::<u64>()) {
        let a = rand_t(&[r, c], seed);
        let b = rand_t(&[r, c], seed ^ 1);
        let ps = params(vec![("a", a), ("b", b.map(|x| 2.0 + x.abs()))]);
        prop_assert!(gradcheck(&ps, |g, v| g.add(v[0], v[1])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.sub(v[0], v[1])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.mul(v[0], v[1])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.div(v[0], v[1])) < FD_TOL);
    }

    #[test]
    fn broadcasting_binary(r in dim(), c in dim(), seed in any::<u64>()) {
        let ps = params(vec![("a", rand_t(&[r, c], seed)), ("row", rand_t(&[c], seed ^ 2).map(|x| 1.5 + x.abs()))]);
        prop_assert!(gradcheck(&ps, |g, v| g.add(v[0], v[1])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.mul(v[0], v[1])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.div(v[0], v[1])) < FD_TOL);
    }

    #[test]
    fn elementwise_unary(r in dim(), c in dim(), k in -2.0f64..2.0, seed in any::<u64>()) {
        let ps = params(vec![("x", rand_t(&[r, c], seed))]);
        prop_assert!(gradcheck(&ps, |g, v| g.scale(v[0], k)) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.offset(v[0], k)) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.square(v[0])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.exp(v[0])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.silu(v[0])) < FD_TOL);
    }

    #[test]
    fn matmul_batched_and_broadcast(b in 1usize..=3, m in dim(), k in dim(), n in dim(), seed in any::<u64>()) {
        let ps = params(vec![("a", rand_t(&[b, m, k], seed)), ("w", rand_t(&[k, n], seed ^ 3))]);
        prop_assert!(gradcheck(&ps, |g, v| g.matmul(v[0], v[1])) < FD_TOL);
        let ps = params(vec![("a", rand_t(&[b, m, k], seed)), ("c", rand_t(&[b, k, n], seed ^ 4))]);
        prop_assert!(gradcheck(&ps, |g, v| g.matmul(v[0], v[1])) < FD_TOL);
        let ps = params(vec![("x", rand_t(&[m, k], seed)), ("w", rand_t(&[n, k], seed ^ 5))]);
        prop_assert!(gradcheck(&ps, |g, v| g.linear(v[0], v[1])) < FD_TOL);
    }

    #[test]
    fn shape_ops(a in dim(), b in dim(), c in dim(), seed in any::<u64>()) {
        let ps = params(vec![("x", rand_t(&[a, b, c], seed))]);
        prop_assert!(gradcheck(&ps, |g, v| g.permute(v[0], &[2, 0, 1])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.transpose_last(v[0])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.reshape(v[0], &[a * b, c])) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.narrow(v[0], 1, 0, b)) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.concat(&[v[0], g.square(v[0])?], 2)) < FD_TOL);
    }

    #[test]
    fn reductions(a in dim(), b in dim(), seed in any::<u64>()) {
        let ps = params(vec![("x", rand_t(&[a, b], seed))]);
        prop_assert!(gradcheck(&ps, |g, v| g.sum(g.square(v[0])?)) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.mean(g.exp(v[0])?)) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.sum_last(g.silu(v[0])?)) < FD_TOL);
    }

    #[test]
    fn softmax_family(a in dim(), b in 2usize..=5, seed in any::<u64>()) {
        let ps = params(vec![("x", rand_t(&[a, b], seed))]);
        prop_assert!(gradcheck(&ps, |g, v| g.softmax(v[0])) < FD_TOL);
        // keep the diagonal (or column 0) so no row is fully masked
        let mask = Rc::new(Mask::from_fn(a, b, |i, j| j == i % b || (i + j) % 2 == 0));
        prop_assert!(gradcheck(&ps, |g, v| g.masked_softmax(v[0], mask.clone())) < FD_TOL);
        prop_assert!(gradcheck(&ps, |g, v| g.masked_fill(v[0], mask.clone(), -3.0)) < FD_TOL);
    }

    #[test]
    fn rmsnorm_and_gather(a in dim(), b in 2usize..=6, seed in any::<u64>()) {
        let ps = params(vec![("x", rand_t(&[a, b], seed))]);
        prop_assert!(gradcheck(&ps, |g, v| g.rmsnorm(v[0], 1e-6)) < FD_TOL);
        let idx: Vec<usize> = (0..b + 2).map(|i| (i * 7 + 1) % b).collect();
        let idx = Rc::new(idx);
        prop_assert!(gradcheck(&ps, |g, v| g.gather(v[0], 1, idx.clone())) < FD_TOL);
    }
}

#[test]
fn reused_node_accumulates() {
    let ps = params(vec![("x", rand_t(&[3, 2], 9))]);
    let err = gradcheck(&ps, |g, v| {
        let y = g.mul(v[0], v[0])?;
        let gram = g.sum(g.matmul(v[0], g.transpose_last(v[0])?)?)?;
        g.add(y, gram)
    });
    assert!(err < FD_TOL, "{err}");
}
