//! Fourth-order central finite differences against the analytic gradients of a graph.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Worst element of one parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub frozen: bool,
    pub max_rel_error: f64,
    /// Largest |analytic| entry; exactly 0 for frozen parameters.
    pub max_abs_analytic: f64,
    /// `(analytic, numeric)` per entry; empty for frozen parameters.
    pub entries: Vec<(f64, f64)>,
}

impl ParamCheck {
    /// Whether every entry satisfies `|a − n| ≤ atol + rtol·max(|a|, |n|)`.
    pub fn allclose(&self, rtol: f64, atol: f64) -> bool {
        self.entries
            .iter()
            .all(|&(a, n)| (a - n).abs() <= atol + rtol * a.abs().max(n.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// Maximum over all non-frozen parameters.
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backprop gradients of `loss_fn` with the five-point central
/// difference of step `eps` for every entry of `params`.
///
/// `loss_fn` must be deterministic (no dropout) and build its whole graph
/// from the store it is handed. Frozen parameters report an analytic
/// gradient of exactly zero and are excluded from the maximum.
pub fn finite_diff_check<T, F>(store: &mut ParamStore<T>, params: &[ParamId], eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>, &mut Graph<T>) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let loss = loss_fn(store, &mut graph)?;
    let grads = graph.backward(loss)?;

    let mut eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(store, &mut g)?;
        Ok(g.value(l).item().to_f64_lossless())
    };

    let mut report = GradCheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
    };
    for &id in params {
        let (name, frozen, n) = {
            let p = store.get(id);
            (p.name.clone(), p.frozen, p.value.len())
        };
        if frozen {
            report.params.push(ParamCheck {
                name,
                frozen,
                max_rel_error: 0.0,
                max_abs_analytic: 0.0,
                entries: Vec::new(),
            });
            continue;
        }
        let analytic: Vec<f64> = match grads.param(id) {
            Some(g) => g.data().iter().map(|x| x.to_f64_lossless()).collect(),
            None => vec![0.0; n],
        };
        let mut worst = 0.0f64;
        let mut entries = Vec::with_capacity(n);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[i];
            let mut at = |store: &mut ParamStore<T>, k: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[i] = orig + T::of(k * eps);
                eval(store)
            };
            let (p1, m1, p2, m2) = (at(store, 1.0)?, at(store, -1.0)?, at(store, 2.0)?, at(store, -2.0)?);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            worst = worst.max(relative_error(a, numeric));
            entries.push((a, numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.params.push(ParamCheck {
            name,
            frozen,
            max_rel_error: worst,
            max_abs_analytic: analytic.iter().fold(0.0, |m, x| m.max(x.abs())),
            entries,
        });
    }
    Ok(report)
}
