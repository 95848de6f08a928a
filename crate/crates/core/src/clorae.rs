//! Collaborative multi-LoRA expert layer.
//!
//! A frozen base map `W0` plus a rank-`r` universal expert shared by every
//! task, `N` task experts of rank `r/N` each, and a per-token two-way gate:
//!
//! ```text
//! (g¹, g²) = softmax(W_g · x)
//! h        = g¹ · U(x) + g² · D_task(x)
//! y        = W0 · x + (α / r) · h
//! ```
//!
//! Only the expert selected by the task id enters the graph, so the other
//! task experts receive exactly zero gradient from that forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::lora::{ForwardCtx, Linear, LoraFactors, LoraLinear};
use crate::mim::{ExpertPair, VidHead};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the universal and task branches are mixed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateMode {
    /// Learned per-token softmax router.
    Learned,
    /// Constant weights `(universal, task)`; `(1, 1)` is plain addition.
    Fixed(f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloraeConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Universal rank `r`; each task expert has rank `r / n_tasks`.
    pub rank: usize,
    pub n_tasks: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub universal: bool,
    pub task_experts: bool,
    pub gate: GateMode,
    /// Attach a MIM head (only meaningful with both branches).
    pub mim: bool,
}

impl CloraeConfig {
    /// Full layer with `α = r` and dropout 0.1.
    pub fn new(d_in: usize, d_out: usize, rank: usize, n_tasks: usize) -> Self {
        Self {
            d_in,
            d_out,
            rank,
            n_tasks,
            alpha: rank as f64,
            dropout: 0.1,
            universal: true,
            task_experts: true,
            gate: GateMode::Learned,
            mim: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.rank == 0 {
            return bad("rank must be positive".into());
        }
        if self.n_tasks == 0 {
            return bad("need at least one task expert slot".into());
        }
        if self.rank < self.n_tasks || self.rank % self.n_tasks != 0 {
            return bad(format!(
                "rank {} must be a positive multiple of the {} task experts",
                self.rank, self.n_tasks
            ));
        }
        if !self.universal && !self.task_experts {
            return bad("at least one expert branch is required".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn task_rank(&self) -> usize {
        self.rank / self.n_tasks
    }

    fn has_mim(&self) -> bool {
        self.mim && self.universal && self.task_experts
    }
}

/// The rank-`r` expert trained on every task.
#[derive(Clone, Debug, PartialEq)]
pub struct UniversalExpert {
    pub factors: LoraFactors,
}

/// `N` experts of rank `r/N`, one per task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskExpertSet {
    pub experts: Vec<LoraFactors>,
}

impl TaskExpertSet {
    pub fn n_tasks(&self) -> usize {
        self.experts.len()
    }

    pub fn expert(&self, task: usize) -> Result<&LoraFactors> {
        self.experts.get(task).ok_or(CoreError::TaskOutOfRange {
            task,
            n_tasks: self.experts.len(),
        })
    }
}

/// Linear gate `W_g [2 × d_in]`, zero-initialized so both branches start at ½.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRouter {
    pub weight: ParamId,
    pub d_in: usize,
}

impl GateRouter {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d_in: usize) -> Result<Self> {
        let weight = store.add(format!("{prefix}.gate"), Tensor::zeros([2, d_in]), false)?;
        Ok(Self { weight, d_in })
    }

    /// Gate weights `[T × 2]` for row-stacked tokens.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let logits = g.matmul_nt(x, w)?;
        g.softmax(logits, 1)
    }

    /// `(g¹, g²)` for a single token.
    pub fn route<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Result<(T, T)> {
        let mut g = Graph::new();
        let xn = g.constant(Tensor::new([1, x.len()], x.to_vec())?);
        let out = self.forward(&mut g, store, xn)?;
        let v = g.value(out).data();
        Ok((v[0], v[1]))
    }
}

/// Parameter tally of an adapted layer or a whole model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableCount {
    pub universal: usize,
    pub task_experts: usize,
    pub gate: usize,
    pub mim_head: usize,
    /// Everything else that is trainable (embeddings, output head).
    pub other: usize,
    pub total: usize,
}

impl TrainableCount {
    /// Parameters held in LoRA `A`/`B` matrices.
    pub fn lora_matrices(&self) -> usize {
        self.universal + self.task_experts
    }

    /// Recomputes `total` from the parts.
    pub fn finish(mut self) -> Self {
        self.total = self.universal + self.task_experts + self.gate + self.mim_head + self.other;
        self
    }
}

impl std::ops::Add for TrainableCount {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            universal: self.universal + o.universal,
            task_experts: self.task_experts + o.task_experts,
            gate: self.gate + o.gate,
            mim_head: self.mim_head + o.mim_head,
            other: self.other + o.other,
            total: self.total + o.total,
        }
    }
}

impl std::iter::Sum for TrainableCount {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Frozen base map wrapped with universal and task experts and a gate.
#[derive(Clone, Debug, PartialEq)]
pub struct CloraeLinear {
    pub name: String,
    /// Layer index used for routing statistics.
    pub layer: usize,
    pub base: Linear,
    pub universal: Option<UniversalExpert>,
    pub task_experts: Option<TaskExpertSet>,
    pub gate: Option<GateRouter>,
    pub head: Option<VidHead>,
    pub config: CloraeConfig,
}

impl CloraeLinear {
    /// Wraps `base` (which must be frozen) under `name`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        base: Linear,
        name: &str,
        layer: usize,
        config: CloraeConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if base.d_in != config.d_in || base.d_out != config.d_out {
            return Err(CoreError::ShapeMismatch {
                op: "CloraeLinear::new",
                left: vec![base.d_out, base.d_in],
                right: vec![config.d_out, config.d_in],
            });
        }
        store.set_frozen(base.weight, true);
        let universal = if config.universal {
            Some(UniversalExpert {
                factors: LoraFactors::new(store, &format!("{name}.universal"), config.d_in, config.d_out, config.rank, seed)?,
            })
        } else {
            None
        };
        let task_experts = if config.task_experts {
            let experts = (0..config.n_tasks)
                .map(|n| {
                    LoraFactors::new(
                        store,
                        &format!("{name}.task{n}"),
                        config.d_in,
                        config.d_out,
                        config.task_rank(),
                        seed,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Some(TaskExpertSet { experts })
        } else {
            None
        };
        let gate = match config.gate {
            GateMode::Learned => Some(GateRouter::new(store, name, config.d_in)?),
            GateMode::Fixed(..) => None,
        };
        let head = if config.has_mim() {
            Some(VidHead::new(store, &format!("{name}.mim"), config.d_out, seed)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            layer,
            base,
            universal,
            task_experts,
            gate,
            head,
            config,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    /// Universal expert output `U` for already-dropped-out input.
    pub fn universal_forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, xd: NodeId) -> Result<Option<NodeId>> {
        self.universal.as_ref().map(|u| u.factors.forward(g, store, xd)).transpose()
    }

    /// Task expert output `D` for already-dropped-out input.
    pub fn task_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        xd: NodeId,
        task: usize,
    ) -> Result<Option<NodeId>> {
        match &self.task_experts {
            Some(set) => Ok(Some(set.expert(task)?.forward(g, store, xd)?)),
            None => Ok(None),
        }
    }

    /// `Y [T × d_out]` for row-stacked tokens `X [T × d_in]` of one task.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        task: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<NodeId> {
        if task >= self.config.n_tasks {
            return Err(CoreError::TaskOutOfRange {
                task,
                n_tasks: self.config.n_tasks,
            });
        }
        let base = self.base.forward(g, store, x)?;
        let xd = ctx.dropout(g, x, self.config.dropout)?;
        let u = self.universal_forward(g, store, xd)?;
        let d = self.task_forward(g, store, xd, task)?;

        let mixed = match (&self.gate, self.config.gate) {
            (Some(gate), _) => {
                let weights = gate.forward(g, store, x)?;
                if let Some(stats) = ctx.routing.as_deref_mut() {
                    let w = g.value(weights);
                    stats.record(self.layer, task, (0..w.rows()).map(|i| w.get2(i, 1).to_f64_lossless()));
                }
                let g1 = g.column(weights, 0)?;
                let g2 = g.column(weights, 1)?;
                let gu = u.map(|u| g.mul_col(u, g1)).transpose()?;
                let gd = d.map(|d| g.mul_col(d, g2)).transpose()?;
                sum_present(g, gu, gd)?
            }
            (None, GateMode::Fixed(wu, wd)) => {
                let gu = u.map(|u| scale_unless_one(g, u, wu));
                let gd = d.map(|d| scale_unless_one(g, d, wd));
                sum_present(g, gu, gd)?
            }
            (None, GateMode::Learned) => unreachable!("learned gate is always constructed"),
        };

        if let (Some(head), Some(u), Some(d)) = (&self.head, u, d) {
            ctx.expert_pairs.push(ExpertPair {
                layer: self.name.clone(),
                universal: u,
                task: d,
                head: head.clone(),
            });
        }

        let scaled = g.scale(mixed, T::of(self.scaling()));
        g.add(base, scaled)
    }

    /// Parameters by role.
    pub fn count_trainable<T: Scalar>(&self, store: &ParamStore<T>) -> TrainableCount {
        let size = |id: ParamId| {
            let p = store.get(id);
            if p.frozen {
                0
            } else {
                p.value.len()
            }
        };
        let universal = self.universal.iter().flat_map(|u| u.factors.ids()).map(size).sum();
        let task_experts = self
            .task_experts
            .iter()
            .flat_map(|s| s.experts.iter().flat_map(|e| e.ids()))
            .map(size)
            .sum();
        let gate = self.gate.iter().map(|g| size(g.weight)).sum();
        let mim_head = self.head.iter().flat_map(|h| h.ids()).map(size).sum();
        TrainableCount {
            universal,
            task_experts,
            gate,
            mim_head,
            other: 0,
            total: 0,
        }
        .finish()
    }

    /// Every parameter the layer owns besides the frozen base.
    pub fn adapter_params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        if let Some(u) = &self.universal {
            v.extend(u.factors.ids());
        }
        if let Some(s) = &self.task_experts {
            v.extend(s.experts.iter().flat_map(|e| e.ids()));
        }
        if let Some(g) = &self.gate {
            v.push(g.weight);
        }
        if let Some(h) = &self.head {
            v.extend(h.ids());
        }
        v
    }
}

fn scale_unless_one<T: Scalar>(g: &mut Graph<T>, x: NodeId, w: f64) -> NodeId {
    if w == 1.0 {
        x
    } else {
        g.scale(x, T::of(w))
    }
}

fn sum_present<T: Scalar>(g: &mut Graph<T>, a: Option<NodeId>, b: Option<NodeId>) -> Result<NodeId> {
    match (a, b) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(CoreError::Config("no expert branch".into())),
    }
}

/// A projection that may carry an adapter.
#[derive(Clone, Debug, PartialEq)]
pub enum AdaptedLinear {
    Plain(Linear),
    Lora(LoraLinear),
    Clorae(CloraeLinear),
}

impl AdaptedLinear {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        task: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<NodeId> {
        match self {
            Self::Plain(l) => l.forward(g, store, x),
            Self::Lora(l) => l.forward(g, store, x, ctx),
            Self::Clorae(l) => l.forward(g, store, x, task, ctx),
        }
    }

    pub fn base(&self) -> &Linear {
        match self {
            Self::Plain(l) => l,
            Self::Lora(l) => &l.base,
            Self::Clorae(l) => &l.base,
        }
    }

    pub fn count_trainable<T: Scalar>(&self, store: &ParamStore<T>) -> TrainableCount {
        match self {
            Self::Plain(_) => TrainableCount::default(),
            Self::Lora(l) => TrainableCount {
                universal: l.factors.ids().iter().map(|&id| store.value(id).len()).sum(),
                ..TrainableCount::default()
            }
            .finish(),
            Self::Clorae(l) => l.count_trainable(store),
        }
    }

    pub fn as_clorae(&self) -> Option<&CloraeLinear> {
        match self {
            Self::Clorae(l) => Some(l),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(store: &mut ParamStore<f64>, id: ParamId, data: &[f64]) {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::new(shape, data.to_vec()).unwrap();
    }

    fn layer(store: &mut ParamStore<f64>, cfg: CloraeConfig) -> CloraeLinear {
        let base = Linear::new(store, "l", cfg.d_in, cfg.d_out, true, 5).unwrap();
        CloraeLinear::new(store, base, "l", 0, cfg, 5).unwrap()
    }

    fn run(store: &ParamStore<f64>, l: &CloraeLinear, x: Tensor<f64>, task: usize) -> Tensor<f64> {
        let mut g = Graph::new();
        let xn = g.constant(x);
        let y = l.forward(&mut g, store, xn, task, &mut ForwardCtx::eval()).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_init_output_is_base_output() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, CloraeConfig::new(4, 3, 2, 2));
        let x = Tensor::new([2, 4], vec![0.1, -0.4, 2.0, 1.0, 0.0, 3.0, -1.0, 0.5]).unwrap();
        let expect = x.matmul_nt(store.value(l.base.weight)).unwrap();
        for task in 0..2 {
            assert_eq!(run(&store, &l, x.clone(), task), expect);
        }
    }

    #[test]
    fn zero_gate_routes_half_and_half() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, CloraeConfig::new(4, 4, 2, 2));
        let (g1, g2) = l.gate.as_ref().unwrap().route(&store, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((g1, g2), (0.5, 0.5));
    }

    #[test]
    fn identity_gate_on_two_zero() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, CloraeConfig::new(2, 2, 2, 2));
        let gate = l.gate.clone().unwrap();
        set(&mut store, gate.weight, &[1.0, 0.0, 0.0, 1.0]);
        let (g1, g2) = gate.route(&store, &[2.0, 0.0]).unwrap();
        let e2 = 2.0f64.exp();
        assert!((g1 - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((g2 - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        assert!((g1 - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn rank_must_split_evenly() {
        let mut store = ParamStore::<f64>::new();
        let base = Linear::new(&mut store, "l", 8, 8, true, 0).unwrap();
        for (r, n) in [(5, 2), (2, 3), (0, 1)] {
            let cfg = CloraeConfig::new(8, 8, r, n);
            assert!(CloraeLinear::new(&mut store, base.clone(), &format!("x{r}{n}"), 0, cfg, 0).is_err());
        }
    }

    #[test]
    fn task_id_out_of_range_names_n() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, CloraeConfig::new(2, 2, 2, 2));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 2]));
        let err = l.forward(&mut g, &store, x, 2, &mut ForwardCtx::eval()).unwrap_err();
        assert!(err.to_string().contains("2 task experts"), "{err}");
    }

    #[test]
    fn per_expert_shapes_and_counts() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, CloraeConfig::new(8, 7, 6, 3));
        let set = l.task_experts.as_ref().unwrap();
        for e in &set.experts {
            assert_eq!(store.value(e.a).shape(), &[2, 8]);
            assert_eq!(store.value(e.b).shape(), &[7, 2]);
            assert_eq!(e.param_count(), 2 * (8 + 7));
        }
    }

    #[test]
    fn counts_for_sixteen_wide_layer() {
        let mut store = ParamStore::new();
        let mut cfg = CloraeConfig::new(16, 16, 8, 2);
        cfg.mim = false;
        let c = layer(&mut store, cfg).count_trainable(&store);
        assert_eq!((c.universal, c.task_experts, c.gate, c.total), (256, 256, 32, 544));
    }
}
