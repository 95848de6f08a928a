//! Achievement-based multi-task weighting.
//!
//! Each dataset's weight shrinks as its dev score approaches a margin above
//! its target score, focal-loss style:
//!
//! ```text
//! w = clamp(1 − s / (margin · target), 0, 1) ^ γ
//! ```
//!
//! The raw weights are softmax-normalized so no dataset's signal ever drops
//! to zero.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;

/// Unnormalized weight of one dataset.
pub fn raw_weight(score: f64, target: f64, margin: f64, gamma: f64) -> Result<f64> {
    if !(target > 0.0) {
        return Err(CoreError::Config(format!("target score must be positive, got {target}")));
    }
    if !(margin > 1.0) {
        return Err(CoreError::Config(format!("margin must exceed 1, got {margin}")));
    }
    if !(gamma >= 0.0) {
        return Err(CoreError::Config(format!("gamma must be non-negative, got {gamma}")));
    }
    if !(0.0..=1.0).contains(&score) {
        return Err(CoreError::Config(format!("score {score} outside [0, 1]")));
    }
    let base = (1.0 - score / (margin * target)).clamp(0.0, 1.0);
    Ok(base.powf(gamma))
}

/// Normalized per-dataset weights for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub epoch: usize,
    pub weights: Vec<f64>,
}

impl TaskWeights {
    pub fn uniform(m: usize, epoch: usize) -> Self {
        Self {
            epoch,
            weights: vec![1.0 / m as f64; m],
        }
    }

    pub fn get(&self, dataset: usize) -> f64 {
        self.weights[dataset]
    }
}

/// Softmax over raw weights.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = raw.iter().map(|&w| (w - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// `Σ_m w_m·L_m + β·mim` over the datasets present in a batch.
pub fn multitask_step_loss<T: Scalar>(
    g: &mut Graph<T>,
    per_dataset: &[(usize, NodeId)],
    weights: &TaskWeights,
    mim: Option<NodeId>,
    beta: f64,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(per_dataset.len() + 1);
    for &(m, loss) in per_dataset {
        terms.push(g.scale(loss, T::of(weights.get(m))));
    }
    if let Some(mim) = mim {
        if beta != 0.0 {
            terms.push(g.scale(mim, T::of(beta)));
        }
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(g.constant(crate::tensor::Tensor::scalar(T::zero()))),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Plain-number form of [`multitask_step_loss`].
pub fn multitask_loss_value(losses: &[(usize, f64)], weights: &TaskWeights, mim: f64, beta: f64) -> f64 {
    losses.iter().map(|&(m, l)| weights.get(m) * l).sum::<f64>() + beta * mim
}

/// Targets, margin, focusing exponent and the per-epoch score history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AchievementTracker {
    targets: Vec<f64>,
    margin: f64,
    gamma: f64,
    history: Vec<Vec<f64>>,
}

impl AchievementTracker {
    pub fn new(targets: Vec<f64>, margin: f64, gamma: f64) -> Result<Self> {
        if targets.is_empty() {
            return Err(CoreError::Config("achievement tracker needs at least one dataset".into()));
        }
        for &t in &targets {
            if !(t > 0.0 && t <= 1.0) {
                return Err(CoreError::Config(format!("target score {t} outside (0, 1]")));
            }
        }
        // validates margin and gamma
        raw_weight(0.0, 1.0, margin, gamma)?;
        Ok(Self {
            targets,
            margin,
            gamma,
            history: Vec::new(),
        })
    }

    pub fn datasets(&self) -> usize {
        self.targets.len()
    }

    pub fn history(&self) -> &[Vec<f64>] {
        &self.history
    }

    /// Weights before any score exists: uniform.
    pub fn initial_weights(&self) -> TaskWeights {
        TaskWeights::uniform(self.targets.len(), 0)
    }

    /// Records the scores measured after epoch `t` (one per dataset, given
    /// as `(dataset, score)`) and returns the weights for epoch `t + 1`.
    pub fn update_epoch(&mut self, scores: &[(usize, f64)]) -> Result<TaskWeights> {
        let m = self.targets.len();
        let mut row = vec![None; m];
        for &(d, s) in scores {
            if d >= m {
                return Err(CoreError::Config(format!("score for unknown dataset {d}")));
            }
            if !(0.0..=1.0).contains(&s) {
                return Err(CoreError::Config(format!("score {s} for dataset {d} outside [0, 1]")));
            }
            row[d] = Some(s);
        }
        let missing: Vec<usize> = (0..m).filter(|&d| row[d].is_none()).collect();
        if !missing.is_empty() {
            return Err(CoreError::Config(format!("missing scores for datasets {missing:?}")));
        }
        let row: Vec<f64> = row.into_iter().map(|s| s.expect("checked")).collect();
        let raw = row
            .iter()
            .zip(&self.targets)
            .map(|(&s, &p)| raw_weight(s, p, self.margin, self.gamma))
            .collect::<Result<Vec<_>>>()?;
        self.history.push(row);
        Ok(TaskWeights {
            epoch: self.history.len(),
            weights: normalize_weights(&raw),
        })
    }
}
