//! Low-rank factor pairs and the plain / vanilla-LoRA linear layers.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::rng;
use crate::routing::RoutingStats;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// State threaded through one forward pass.
pub struct ForwardCtx<'a> {
    pub training: bool,
    /// Source of dropout masks; required when training with dropout.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Gate statistics sink; `None` disables collection.
    pub routing: Option<&'a mut RoutingStats>,
    /// Expert outputs of every adapted layer that carries a MIM head.
    pub expert_pairs: Vec<crate::mim::ExpertPair>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout_rng: None,
            routing: None,
            expert_pairs: Vec::new(),
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            training: true,
            dropout_rng: Some(rng),
            routing: None,
            expert_pairs: Vec::new(),
        }
    }

    pub fn with_routing(mut self, stats: &'a mut RoutingStats) -> Self {
        self.routing = Some(stats);
        self
    }

    /// Applies inverted dropout to `x` when training with `p > 0`.
    pub(crate) fn dropout<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId, p: f64) -> Result<NodeId> {
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let rng = self
            .dropout_rng
            .as_deref_mut()
            .ok_or_else(|| CoreError::Config("training with dropout needs a dropout rng".into()))?;
        let mask = rng::dropout_mask::<T>(rng, g.value(x).shape().to_vec(), p);
        let m = g.constant(mask);
        g.mul(x, m)
    }
}

/// One low-rank pair: `A [rank × d_in]`, `B [d_out × rank]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraFactors {
    /// Registers `{prefix}.a` ~ N(0, 1/rank) and `{prefix}.b` = 0.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(CoreError::Config(format!(
                "{prefix}: rank {rank} must lie in 1..={}",
                d_in.min(d_out)
            )));
        }
        let a_name = format!("{prefix}.a");
        let mut r = rng::stream(seed, &a_name);
        let a = store.add(&a_name, rng::gaussian(&mut r, [rank, d_in], (1.0 / rank as f64).sqrt()), false)?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros([d_out, rank]), false)?;
        Ok(Self {
            a,
            b,
            rank,
            d_in,
            d_out,
        })
    }

    /// `B·(A·x)` for row-stacked tokens `x [T × d_in]` (already dropped out).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let cols = g.value(x).cols();
        if cols != self.d_in {
            return Err(CoreError::ShapeMismatch {
                op: "lora_delta",
                left: g.value(x).shape().to_vec(),
                right: vec![self.rank, self.d_in],
            });
        }
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let ax = g.matmul_nt(x, a)?;
        g.matmul_nt(ax, b)
    }

    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.a, self.b]
    }
}

/// `B·(A·drop(x))` for a single token vector.
pub fn lora_delta<T: Scalar>(
    store: &ParamStore<T>,
    factors: &LoraFactors,
    x: &[T],
    ctx: &mut ForwardCtx<'_>,
    dropout_p: f64,
) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let xn = g.constant(Tensor::new([1, x.len()], x.to_vec())?);
    let xd = ctx.dropout(&mut g, xn, dropout_p)?;
    let out = factors.forward(&mut g, store, xd)?;
    Ok(g.value(out).data().to_vec())
}

/// A bias-free linear map `y = W·x` with `W [d_out × d_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Registers `{name}.base` with N(0, 1/d_in) entries.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, frozen: bool, seed: u64) -> Result<Self> {
        let wname = format!("{name}.base");
        let mut r = rng::stream(seed, &wname);
        let w = rng::gaussian(&mut r, [d_out, d_in], (1.0 / d_in as f64).sqrt());
        let weight = store.add(wname, w, frozen)?;
        Ok(Self { weight, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        g.matmul_nt(x, w)
    }
}

/// Vanilla LoRA: `y = W0·x + (α/r)·B·A·drop(x)`.
///
/// Its factors use the same names as the universal expert of
/// [`crate::clorae::CloraeLinear`], so both draw identical initial values.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    pub base: Linear,
    pub factors: LoraFactors,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraLinear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        base: Linear,
        name: &str,
        rank: usize,
        alpha: f64,
        dropout: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(alpha > 0.0) || !(0.0..1.0).contains(&dropout) {
            return Err(CoreError::Config(format!("{name}: alpha {alpha} / dropout {dropout} out of range")));
        }
        let factors = LoraFactors::new(store, &format!("{name}.universal"), base.d_in, base.d_out, rank, seed)?;
        Ok(Self {
            base,
            factors,
            alpha,
            dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId, ctx: &mut ForwardCtx<'_>) -> Result<NodeId> {
        let base = self.base.forward(g, store, x)?;
        let xd = ctx.dropout(g, x, self.dropout)?;
        let delta = self.factors.forward(g, store, xd)?;
        let scaled = g.scale(delta, T::of(self.alpha / self.factors.rank as f64));
        g.add(base, scaled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn set<T: Scalar>(store: &mut ParamStore<T>, id: ParamId, data: &[f64]) {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::from_f64(shape, data).unwrap();
    }

    #[test]
    fn zero_init_gives_zero_delta() {
        let mut store = ParamStore::<f64>::new();
        let f = LoraFactors::new(&mut store, "l", 4, 3, 2, 7).unwrap();
        let out = lora_delta(&store, &f, &[1.0, -2.0, 0.5, 3.0], &mut ForwardCtx::eval(), 0.1).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn hand_computed_rank_one_delta() {
        let mut store = ParamStore::<f64>::new();
        let f = LoraFactors::new(&mut store, "l", 2, 2, 1, 0).unwrap();
        set(&mut store, f.a, &[1.0, 1.0]);
        set(&mut store, f.b, &[2.0, 3.0]);
        let out = lora_delta(&store, &f, &[1.0, 2.0], &mut ForwardCtx::eval(), 0.0).unwrap();
        assert_eq!(out, vec![6.0, 9.0]);
    }

    #[test]
    fn factored_product_matches_dense_ba() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let f = LoraFactors::new(&mut store, "l", 6, 5, 3, 1).unwrap();
        let b: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        set(&mut store, f.b, &b);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ba = store.value(f.b).matmul(store.value(f.a)).unwrap();
        let dense: Vec<f64> = (0..5).map(|i| (0..6).map(|j| ba.get2(i, j) * x[j]).sum()).collect();
        let out = lora_delta(&store, &f, &x, &mut ForwardCtx::eval(), 0.0).unwrap();
        for (o, d) in out.iter().zip(&dense) {
            assert!((o - d).abs() <= 1e-10);
        }
    }

    #[test]
    fn rank_bounds_are_enforced() {
        let mut store = ParamStore::<f64>::new();
        assert!(LoraFactors::new(&mut store, "z", 4, 4, 0, 0).is_err());
        assert!(LoraFactors::new(&mut store, "big", 4, 2, 3, 0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let f = LoraFactors::new(&mut store, "l", 3, 3, 1, 0).unwrap();
        assert!(lora_delta(&store, &f, &[1.0, 2.0], &mut ForwardCtx::eval(), 0.0).is_err());
    }

    #[test]
    fn dropout_is_identity_at_eval_and_inverted_in_training() {
        let mut store = ParamStore::<f64>::new();
        let f = LoraFactors::new(&mut store, "l", 4, 4, 4, 2).unwrap();
        set(&mut store, f.b, &[1.0; 16]);
        let x = [1.0, 1.0, 1.0, 1.0];
        let eval = lora_delta(&store, &f, &x, &mut ForwardCtx::eval(), 0.5).unwrap();
        assert_eq!(eval, lora_delta(&store, &f, &x, &mut ForwardCtx::eval(), 0.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::<f64>::new();
        let xn = g.constant(Tensor::new([64, 4], vec![1.0; 256]).unwrap());
        let dropped = ForwardCtx::train(&mut rng).dropout(&mut g, xn, 0.5).unwrap();
        let v = g.value(dropped).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        assert!(v.iter().any(|&e| e == 0.0) && v.iter().any(|&e| e == 2.0));
    }
}
