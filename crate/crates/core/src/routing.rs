//! Gate-mass bookkeeping: how much of each token goes to the task expert.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Tally {
    task_mass: f64,
    tokens: u64,
}

/// Running sums of the task-expert gate weight per `(layer, task)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingStats {
    tallies: BTreeMap<(usize, usize), Tally>,
}

impl RoutingStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the task-expert gate weights `g²` of a batch of tokens.
    pub fn record(&mut self, layer: usize, task: usize, task_gate: impl IntoIterator<Item = f64>) {
        let t = self.tallies.entry((layer, task)).or_default();
        for g in task_gate {
            t.task_mass += g;
            t.tokens += 1;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tallies.values().all(|t| t.tokens == 0)
    }

    /// Mean task-expert mass for one layer and task.
    pub fn mean(&self, layer: usize, task: usize) -> Option<f64> {
        self.tallies
            .get(&(layer, task))
            .filter(|t| t.tokens > 0)
            .map(|t| t.task_mass / t.tokens as f64)
    }

    pub fn tokens(&self, layer: usize, task: usize) -> u64 {
        self.tallies.get(&(layer, task)).map_or(0, |t| t.tokens)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut v: Vec<_> = self.tallies.keys().map(|k| k.0).collect();
        v.dedup();
        v
    }

    pub fn tasks(&self) -> Vec<usize> {
        let mut v: Vec<_> = self.tallies.keys().map(|k| k.1).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        for (k, t) in &other.tallies {
            let e = self.tallies.entry(*k).or_default();
            e.task_mass += t.task_mass;
            e.tokens += t.tokens;
        }
    }
}

/// A named set of layer indices, e.g. the bottom layers of the stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub name: String,
    pub layers: Vec<usize>,
}

/// Splits `n_layers` into bottom / middle / top groups; the outer groups
/// take a third each (at least one layer), the middle takes the rest.
pub fn default_layer_groups(n_layers: usize) -> Vec<LayerGroup> {
    let k = (n_layers / 3).max(1).min(n_layers);
    let top_start = n_layers.saturating_sub(k).max(k);
    vec![
        LayerGroup {
            name: "bottom".into(),
            layers: (0..k).collect(),
        },
        LayerGroup {
            name: "middle".into(),
            layers: (k..top_start).collect(),
        },
        LayerGroup {
            name: "top".into(),
            layers: (top_start..n_layers).collect(),
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub group: String,
    pub task: usize,
    /// Token-weighted mean of `g²` over the group's layers.
    pub task_specific: f64,
    /// `1 − task_specific`.
    pub universal: f64,
    pub tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub rows: Vec<RoutingRow>,
}

impl RoutingReport {
    pub fn get(&self, group: &str, task: usize) -> Option<&RoutingRow> {
        self.rows.iter().find(|r| r.group == group && r.task == task)
    }
}

/// Aggregates statistics per layer group and task. Groups without tokens
/// for a task are omitted.
pub fn routing_report(stats: &RoutingStats, groups: &[LayerGroup]) -> Result<RoutingReport> {
    if stats.is_empty() {
        return Err(CoreError::EmptyStats);
    }
    let mut rows = Vec::new();
    for group in groups {
        for task in stats.tasks() {
            let (mut mass, mut tokens) = (0.0, 0u64);
            for &layer in &group.layers {
                if let Some(t) = stats.tallies.get(&(layer, task)) {
                    mass += t.task_mass;
                    tokens += t.tokens;
                }
            }
            if tokens == 0 {
                continue;
            }
            let task_specific = mass / tokens as f64;
            rows.push(RoutingRow {
                group: group.name.clone(),
                task,
                task_specific,
                universal: 1.0 - task_specific,
                tokens,
            });
        }
    }
    Ok(RoutingReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_proportion() {
        let mut s = RoutingStats::new();
        s.record(0, 0, [0.7]);
        let r = routing_report(&s, &default_layer_groups(1)).unwrap();
        let row = r.get("bottom", 0).unwrap();
        assert!((row.task_specific - 0.7).abs() < 1e-15);
        assert!((row.universal - 0.3).abs() < 1e-15);
    }

    #[test]
    fn empty_stats_error() {
        assert!(matches!(
            routing_report(&RoutingStats::new(), &default_layer_groups(4)),
            Err(CoreError::EmptyStats)
        ));
    }

    #[test]
    fn groups_partition_the_stack() {
        for n in 1..30 {
            let groups = default_layer_groups(n);
            let mut all: Vec<usize> = groups.iter().flat_map(|g| g.layers.clone()).collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>(), "n={n}");
        }
        let g = default_layer_groups(24);
        assert_eq!(g[0].layers, (0..8).collect::<Vec<_>>());
        assert_eq!(g[2].layers, (16..24).collect::<Vec<_>>());
    }
}
