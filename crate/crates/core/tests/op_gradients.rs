//! Backprop against central differences for every graph op.

use clorae_core::gradcheck::finite_diff_check;
use clorae_core::rng::gaussian;
use clorae_core::{AttentionSpec, Graph, NodeId, ParamId, ParamStore, Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RTOL: f64 = 1e-6;
/// Roundoff floor for near-zero entries: the loss is a sum of O(10) unit
/// terms, so the five-point stencil carries about 18·2e-15 / (12·EPS).
const ATOL: f64 = 1e-9;
const EPS: f64 = 1e-5;

/// Random inputs as trainable parameters; the loss is `Σ r ⊙ op(inputs)`
/// with a fixed random probe `r` so every output entry contributes.
fn check<F>(seed: u64, shapes: &[Vec<usize>], op: F) -> Result<(), String>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            // keep entries clear of kinks by more than the stencil width
            let x = gaussian::<f64>(&mut rng, s.clone(), 1.0).map(|v| if v.abs() < 0.1 { v + 0.2f64.copysign(v) } else { v });
            store.add(format!("x{i}"), x, false).unwrap()
        })
        .collect();
    let probe_seed: u64 = rng.gen();
    let report = finite_diff_check(&mut store, &ids, EPS, |st, g| {
        let xs: Vec<NodeId> = ids.iter().map(|&id| g.param(st, id)).collect();
        let out = op(g, &xs)?;
        let shape = g.value(out).shape().to_vec();
        let probe = gaussian(&mut ChaCha8Rng::seed_from_u64(probe_seed), shape, 1.0);
        let p = g.constant(probe);
        let weighted = g.mul(out, p)?;
        Ok(g.sum(weighted))
    })
    .unwrap();
    match report.params.iter().find(|p| !p.allclose(RTOL, ATOL)) {
        None => Ok(()),
        Some(p) => Err(format!("{}: max rel error {:e}", p.name, p.max_rel_error)),
    }
}

fn shifted_away_from_zero(g: &mut Graph<f64>, x: NodeId) -> NodeId {
    // keep x² + 0.25 ≥ 0.25 so kinks and poles are never crossed by a probe step
    let sq = g.square(x);
    let c = g.constant(Tensor::full(g.value(x).shape().to_vec(), 0.25));
    g.add(sq, c).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        { let e = check(seed, &[vec![m, k], vec![k, n]], |g, x| g.matmul(x[0], x[1])); prop_assert!(e.is_ok(), "{:?}", e); };
    }

    #[test]
    fn matmul_nt(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        { let e = check(seed, &[vec![m, k], vec![n, k]], |g, x| g.matmul_nt(x[0], x[1])); prop_assert!(e.is_ok(), "{:?}", e); };
    }

    #[test]
    fn elementwise_binary(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let s = vec![vec![m, n], vec![m, n]];
        { let e = check(seed, &s, |g, x| g.add(x[0], x[1])); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &s, |g, x| g.sub(x[0], x[1])); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &s, |g, x| g.mul(x[0], x[1])); prop_assert!(e.is_ok(), "{:?}", e); };
    }

    #[test]
    fn row_and_column_broadcasts(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        { let e = check(seed, &[vec![m, n], vec![n]], |g, x| g.add_row(x[0], x[1])); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &[vec![m, n], vec![n]], |g, x| {
            let d = shifted_away_from_zero(g, x[1]);
            g.div_row(x[0], d)
        }); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &[vec![m, n], vec![m, 1]], |g, x| g.mul_col(x[0], x[1])); prop_assert!(e.is_ok(), "{:?}", e); };
    }

    #[test]
    fn unary(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let s = vec![vec![m, n]];
        { let e = check(seed, &s, |g, x| Ok(g.scale(x[0], -1.7))); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &s, |g, x| Ok(g.softplus(x[0]))); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &s, |g, x| Ok(g.square(x[0]))); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &s, |g, x| {
            let p = shifted_away_from_zero(g, x[0]);
            Ok(g.ln(p))
        }); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &s, |g, x| Ok(g.relu(x[0]))); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &s, |g, x| Ok(g.mean(x[0]))); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &s, |g, x| Ok(g.sum(x[0]))); prop_assert!(e.is_ok(), "{:?}", e); };
    }

    #[test]
    fn softmax_both_axes(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        { let e = check(seed, &[vec![m, n]], |g, x| g.softmax(x[0], 1)); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &[vec![m, n]], |g, x| g.softmax(x[0], 0)); prop_assert!(e.is_ok(), "{:?}", e); };
    }

    #[test]
    fn layer_norm(seed in any::<u64>(), m in 1usize..4, n in 3usize..7) {
        { let e = check(seed, &[vec![m, n]], |g, x| Ok(g.layer_norm(x[0], 1e-5))); prop_assert!(e.is_ok(), "{:?}", e); };
    }

    #[test]
    fn cross_entropy(seed in any::<u64>(), m in 1usize..5, v in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let targets: Vec<usize> = (0..m).map(|i| if i == 0 && m > 1 { v } else { rng.gen_range(0..v) }).collect();
        { let e = check(seed, &[vec![m, v]], |g, x| g.cross_entropy(x[0], &targets, v)); prop_assert!(e.is_ok(), "{:?}", e); };
    }

    #[test]
    fn gather_concat_column(seed in any::<u64>(), rows in 2usize..5, n in 1usize..4) {
        let ids = vec![rows - 1, 0, rows - 1];
        { let e = check(seed, &[vec![rows, n]], |g, x| g.gather(x[0], &ids)); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &[vec![rows, n], vec![1, n]], |g, x| g.concat_rows(&[x[0], x[1]])); prop_assert!(e.is_ok(), "{:?}", e); };
        { let e = check(seed, &[vec![rows, n]], |g, x| g.column(x[0], n - 1)); prop_assert!(e.is_ok(), "{:?}", e); };
    }

    #[test]
    fn segmented_attention(seed in any::<u64>(), causal in any::<bool>(), heads in 1usize..3) {
        let d = 2 * heads;
        let spec = AttentionSpec {
            heads,
            causal,
            q_segments: vec![(0, 3), (3, 2)],
            k_segments: vec![(0, 3), (3, 2)],
        };
        let s = vec![vec![5, d], vec![5, d], vec![5, d]];
        { let e = check(seed, &s, |g, x| g.attention(x[0], x[1], x[2], spec.clone())); prop_assert!(e.is_ok(), "{:?}", e); };
    }
}
