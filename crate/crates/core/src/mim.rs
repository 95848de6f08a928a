//! Variational mutual-information term between task-expert and universal
//! expert outputs.
//!
//! The universal expert acts as teacher: a Gaussian with learned mean
//! `mean_map(D)` and per-channel variance `σ²` predicts its output `U`
//! from the task expert's output `D`. Minimizing the negative
//! log-likelihood (constant dropped)
//!
//! ```text
//! ½·log σ_c² + (U_c − mean_map(D)_c)² / (2σ_c²)
//! ```
//!
//! averaged over tokens and channels tightens a lower bound on `I(D; U)`.
//! `U` is detached, so the term never moves the universal expert.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Raw variance parameter giving `softplus(ρ) = 1`.
pub const UNIT_VARIANCE_RHO: f64 = 0.541_324_854_612_918_1;

/// Gaussian predictor of the teacher output.
#[derive(Clone, Debug, PartialEq)]
pub struct VidHead {
    /// `[d × d]`
    pub mean_weight: ParamId,
    /// `[d]`
    pub mean_bias: ParamId,
    /// `[d]`, mapped through softplus to the variance.
    pub log_var: ParamId,
    pub dim: usize,
}

impl VidHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, seed: u64) -> Result<Self> {
        let wname = format!("{prefix}.mean_weight");
        let mut r = rng::stream(seed, &wname);
        let mean_weight = store.add(&wname, rng::gaussian(&mut r, [dim, dim], (1.0 / dim as f64).sqrt()), false)?;
        let mean_bias = store.add(format!("{prefix}.mean_bias"), Tensor::zeros([dim]), false)?;
        let log_var = store.add(
            format!("{prefix}.log_var"),
            Tensor::full([dim], T::of(UNIT_VARIANCE_RHO)),
            false,
        )?;
        Ok(Self {
            mean_weight,
            mean_bias,
            log_var,
            dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.dim * self.dim + 2 * self.dim
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.mean_weight, self.mean_bias, self.log_var]
    }

    /// Per-channel variance `softplus(ρ)`.
    pub fn variance<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<T> {
        store
            .value(self.log_var)
            .data()
            .iter()
            .map(|&r| crate::graph::softplus(r))
            .collect()
    }
}

/// Universal and task-expert outputs of one adapted layer, for the MIM term.
#[derive(Clone, Debug)]
pub struct ExpertPair {
    pub layer: String,
    pub universal: NodeId,
    pub task: NodeId,
    pub head: VidHead,
}

/// Mean Gaussian negative log-likelihood of `universal` given `task`.
pub fn mim_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    task: NodeId,
    universal: NodeId,
    head: &VidHead,
) -> Result<NodeId> {
    let (ts, us) = (g.value(task).shape().to_vec(), g.value(universal).shape().to_vec());
    if ts != us || g.value(task).cols() != head.dim {
        return Err(CoreError::ShapeMismatch {
            op: "mim_loss",
            left: ts,
            right: us,
        });
    }
    let teacher = g.detach(universal);
    let w = g.param(store, head.mean_weight);
    let b = g.param(store, head.mean_bias);
    let rho = g.param(store, head.log_var);
    let projected = g.matmul_nt(task, w)?;
    let mean = g.add_row(projected, b)?;
    let diff = g.sub(teacher, mean)?;
    let sq = g.square(diff);
    let var = g.softplus(rho);
    let ratio = g.div_row(sq, var)?;
    let fit = g.mean(ratio);
    let log_var = g.ln(var);
    let spread = g.mean(log_var);
    let total = g.add(fit, spread)?;
    Ok(g.scale(total, T::of(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn head_with(store: &mut ParamStore<f64>, dim: usize, w: &[f64], b: &[f64], rho: &[f64]) -> VidHead {
        let h = VidHead::new(store, "h", dim, 0).unwrap();
        *store.value_mut(h.mean_weight) = Tensor::new([dim, dim], w.to_vec()).unwrap();
        *store.value_mut(h.mean_bias) = Tensor::new([dim], b.to_vec()).unwrap();
        *store.value_mut(h.log_var) = Tensor::new([dim], rho.to_vec()).unwrap();
        h
    }

    fn eval(store: &ParamStore<f64>, h: &VidHead, d: Tensor<f64>, u: Tensor<f64>) -> f64 {
        let mut g = Graph::new();
        let dn = g.constant(d);
        let un = g.constant(u);
        let l = mim_loss(&mut g, store, dn, un, h).unwrap();
        g.value(l).item()
    }

    #[test]
    fn unit_variance_rho_is_exact_enough() {
        assert!((crate::graph::softplus(UNIT_VARIANCE_RHO) - 1.0f64).abs() < 1e-15);
    }

    #[test]
    fn perfect_prediction_with_unit_variance_is_zero() {
        let mut store = ParamStore::new();
        let eye = Tensor::<f64>::eye(3);
        let h = head_with(&mut store, 3, eye.data(), &[0.0; 3], &[UNIT_VARIANCE_RHO; 3]);
        let d = Tensor::new([2, 3], vec![0.3, -1.0, 2.0, 0.0, 1.5, -0.7]).unwrap();
        assert!(eval(&store, &h, d.clone(), d).abs() < 1e-15);
    }

    #[test]
    fn unit_error_with_unit_variance_is_half() {
        let mut store = ParamStore::new();
        let eye = Tensor::<f64>::eye(2);
        let h = head_with(&mut store, 2, eye.data(), &[0.0; 2], &[UNIT_VARIANCE_RHO; 2]);
        let d = Tensor::new([3, 2], vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.25]).unwrap();
        let u = d.map(|x| x + 1.0);
        assert!((eval(&store, &h, d, u) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn matches_per_channel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t, c) = (5, 4);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect() };
        let (w, b, rho, d, u) = (r(c * c), r(c), r(c), r(t * c), r(t * c));
        let mut store = ParamStore::new();
        let h = head_with(&mut store, c, &w, &b, &rho);
        let got = eval(&store, &h, Tensor::new([t, c], d.clone()).unwrap(), Tensor::new([t, c], u.clone()).unwrap());

        let mut acc = 0.0;
        for i in 0..t {
            for ch in 0..c {
                let mu = b[ch] + (0..c).map(|k| w[ch * c + k] * d[i * c + k]).sum::<f64>();
                let var = (1.0 + rho[ch].exp()).ln();
                acc += 0.5 * var.ln() + (u[i * c + ch] - mu).powi(2) / (2.0 * var);
            }
        }
        assert!((got - acc / (t * c) as f64).abs() <= 1e-10);
    }

    #[test]
    fn universal_side_gets_no_gradient() {
        let mut store = ParamStore::new();
        let h = VidHead::new(&mut store, "h", 2, 1).unwrap();
        let mut g = Graph::new();
        let d = g.input(Tensor::new([1, 2], vec![0.4, -0.2]).unwrap());
        let u = g.input(Tensor::new([1, 2], vec![1.0, 0.3]).unwrap());
        let l = mim_loss(&mut g, &store, d, u, &h).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(u).is_none());
        assert!(grads.wrt(d).unwrap().norm() > 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        let h = VidHead::new(&mut store, "h", 2, 1).unwrap();
        let mut g = Graph::<f64>::new();
        let d = g.constant(Tensor::zeros([2, 2]));
        let u = g.constant(Tensor::zeros([3, 2]));
        assert!(mim_loss(&mut g, &store, d, u, &h).is_err());
    }
}
