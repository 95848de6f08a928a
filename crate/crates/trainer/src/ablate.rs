//! Variant sweeps over shared data and seeds.

use std::fmt::Write as _;

use clorae_core::TrainableCount;
use clorae_model::Seq2Seq;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, RunConfig};
use crate::eval::EvalReport;
use crate::train::{train_prepared, Prepared};
use crate::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub seeds: Vec<u64>,
    /// Test report per seed.
    pub runs: Vec<EvalReport>,
    pub median_macro_f1: f64,
    pub median_all: f64,
    /// `(dataset, median test F1)`.
    pub median_f1: Vec<(String, f64)>,
    pub trainable: TrainableCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<VariantResult>,
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `base` with the flags of a named variant; the variant replaces the
/// ablation flags and adapter kind of `base`.
pub fn variant_config(base: &RunConfig, variant: &str) -> Result<RunConfig, TrainError> {
    let (flags, adapter) = Ablation::variant(variant)?;
    Ok(RunConfig {
        ablation: Ablation {
            no_gate_weights: base.ablation.no_gate_weights,
            ..flags
        },
        adapter,
        ..base.clone()
    })
}

/// Trains every variant once per seed on the same data. Per-run output
/// directories go under `base.out_dir/<variant>/seed-<seed>`.
pub fn ablate(base: &RunConfig, data: &Prepared, variants: &[&str], seeds: &[u64]) -> Result<AblationReport, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("ablation needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let config = variant_config(base, variant)?;
        let trainable = Seq2Seq::<f64>::new(config.model_config(data.vocab.len()), data.vocab.clone())?.count_trainable();
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run = RunConfig {
                seed,
                out_dir: base.out_dir.as_ref().map(|d| d.join(variant).join(format!("seed-{seed}"))),
                ..config.clone()
            };
            runs.push(train_prepared(&run, data, &mut |_, _| {})?.test);
        }
        out.push(summarize(variant, seeds, runs, trainable));
    }
    Ok(AblationReport { variants: out })
}

/// Medians of a variant's per-seed test reports.
pub fn summarize(variant: &str, seeds: &[u64], runs: Vec<EvalReport>, trainable: TrainableCount) -> VariantResult {
    let macros: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
    let alls: Vec<f64> = runs.iter().map(|r| r.all).collect();
    let median_f1 = runs[0]
        .datasets
        .iter()
        .enumerate()
        .map(|(m, d)| {
            let v: Vec<f64> = runs.iter().map(|r| r.datasets[m].f1).collect();
            (d.dataset.clone(), median(&v))
        })
        .collect();
    VariantResult {
        variant: variant.to_string(),
        seeds: seeds.to_vec(),
        median_macro_f1: median(&macros),
        median_all: median(&alls),
        median_f1,
        runs,
        trainable,
    }
}

impl AblationReport {
    pub fn get(&self, variant: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.variant == variant)
    }

    /// Aligned plain-text table; scores in percent.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self
            .variants
            .first()
            .map(|v| v.median_f1.iter().map(|(n, _)| n.as_str()).collect())
            .unwrap_or_default();
        let _ = write!(out, "{:<12} {:>10} {:>10}", "variant", "TP", "lora TP");
        for n in &names {
            let _ = write!(out, " {n:>10}");
        }
        let _ = writeln!(out, " {:>8} {:>8}", "macro", "All");
        for v in &self.variants {
            let _ = write!(out, "{:<12} {:>10} {:>10}", v.variant, v.trainable.total, v.trainable.lora_matrices());
            for (_, f) in &v.median_f1 {
                let _ = write!(out, " {:>10.2}", 100.0 * f);
            }
            let _ = writeln!(out, " {:>8.2} {:>8.2}", 100.0 * v.median_macro_f1, 100.0 * v.median_all);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn variant_config_replaces_flags_and_keeps_gate_weights() {
        let mut base = RunConfig::default();
        base.ablation.no_aml = true;
        base.ablation.no_gate_weights = (1.0, 0.0);
        let c = variant_config(&base, "no_gate").unwrap();
        assert!(c.ablation.no_gate && !c.ablation.no_aml);
        assert_eq!(c.ablation.no_gate_weights, (1.0, 0.0));
        assert!(variant_config(&base, "bogus").is_err());
    }
}
