//! Run configuration and its `key = value` text form.

use std::path::{Path, PathBuf};

use clorae_core::GateMode;
use clorae_data::{DatasetSpec, GeneratorSpec};
use clorae_model::{parse_projections, AdapterKind, AdapterSpec, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::TrainError;

/// Single-module removals; `only_ulora` and `only_tlora` are exclusive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop the task-specific experts (the gate stays).
    pub only_ulora: bool,
    /// Drop the universal expert (the gate stays).
    pub only_tlora: bool,
    /// Replace the learned gate with the fixed weights `no_gate_weights`.
    pub no_gate: bool,
    pub no_aml: bool,
    pub no_mim: bool,
    pub no_gate_weights: (f64, f64),
}

impl Ablation {
    pub fn none() -> Self {
        Self {
            no_gate_weights: (1.0, 1.0),
            ..Self::default()
        }
    }

    /// Names of the variants understood by [`Ablation::variant`].
    pub const VARIANTS: [&'static str; 7] = ["full", "no_mim", "no_aml", "no_gate", "only_tlora", "only_ulora", "lora"];

    /// Flags of a named variant; `lora` selects the vanilla adapter, which
    /// the caller applies through [`RunConfig::adapter`].
    pub fn variant(name: &str) -> Result<(Self, AdapterKind), TrainError> {
        let mut a = Self::none();
        let mut kind = AdapterKind::Clorae;
        match name {
            "full" => {}
            "no_mim" => a.no_mim = true,
            "no_aml" => a.no_aml = true,
            "no_gate" => a.no_gate = true,
            "only_tlora" => a.only_tlora = true,
            "only_ulora" => a.only_ulora = true,
            "lora" => kind = AdapterKind::Lora,
            other => return Err(TrainError::Config(format!("unknown variant `{other}`"))),
        }
        Ok((a, kind))
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.only_ulora && self.only_tlora {
            return Err(TrainError::Config("only_ulora and only_tlora are exclusive".into()));
        }
        let (u, t) = self.no_gate_weights;
        if !(u.is_finite() && t.is_finite()) {
            return Err(TrainError::Config("no_gate weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Model shape; `vocab_size` and `seed` are filled in at run time.
    pub model: ModelConfig,
    pub adapter: AdapterKind,
    /// Synthetic suite to generate when `data_dir` is unset.
    pub generator: GeneratorSpec,
    /// Directory written by `gen-data`.
    pub data_dir: Option<PathBuf>,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    /// MIM weight.
    pub beta: f64,
    /// Focusing exponent of the achievement weight.
    pub gamma: f64,
    /// Margin `∂` of the achievement weight.
    pub margin: f64,
    /// Reference score per dataset; a single value applies to all.
    pub targets: Vec<f64>,
    pub ablation: Ablation,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Samples per task-homogeneous forward group.
    pub group_size: usize,
    /// Forward groups summed into one optimizer step.
    pub groups_per_step: usize,
    /// Dev samples per dataset scored after each epoch; `None` scores all.
    pub dev_limit: Option<usize>,
    /// Samples per decoding group.
    pub eval_group: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::desk(0);
        let generator = GeneratorSpec {
            visual_dim: model.d_model,
            visual_len: model.visual_len,
            ..GeneratorSpec::three_families(0, 2000, 500, 500)
        };
        model.n_tasks = 3;
        Self {
            model,
            adapter: AdapterKind::Clorae,
            generator,
            data_dir: None,
            learning_rate: 1e-4,
            decay_factor: 0.5,
            decay_every: 5,
            epochs: 20,
            beta: 0.01,
            gamma: 2.0,
            margin: 1.1,
            targets: vec![1.0],
            ablation: Ablation::none(),
            seed: 0,
            out_dir: None,
            group_size: 16,
            groups_per_step: 3,
            dev_limit: None,
            eval_group: 32,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| TrainError::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, TrainError> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(TrainError::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, TrainError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    /// Keys accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "d_model", "n_heads", "d_ff", "enc_layers", "dec_layers", "max_text_len", "max_answer_len", "visual_len",
        "rank", "alpha", "dropout", "wrap", "train_embeddings", "adapter", "data_dir", "data_seed", "train", "dev",
        "test", "train_sizes", "vocab_words", "n_fillers", "n_labels", "text_len", "conflict_rate", "visual_rate",
        "visual_noise", "lr", "decay_factor", "decay_every", "epochs", "beta", "gamma", "margin", "targets",
        "only_ulora", "only_tlora", "no_gate", "no_aml", "no_mim", "no_gate_weights", "variant", "seed", "out_dir",
        "group_size", "groups_per_step", "dev_limit", "eval_group",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let value = value.trim();
        let m = &mut self.model;
        let g = &mut self.generator;
        let a = &mut self.ablation;
        match key {
            "d_model" => m.d_model = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "enc_layers" => m.enc_layers = parse(key, value)?,
            "dec_layers" => m.dec_layers = parse(key, value)?,
            "max_text_len" => m.max_text_len = parse(key, value)?,
            "max_answer_len" => m.max_answer_len = parse(key, value)?,
            "visual_len" => m.visual_len = parse(key, value)?,
            "rank" => m.rank = parse(key, value)?,
            "alpha" => m.alpha = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "wrap" => m.wrap = parse_projections(value).map_err(|e| TrainError::Config(e.to_string()))?,
            "train_embeddings" => m.train_embeddings = parse_bool(key, value)?,
            "adapter" => {
                self.adapter = match value {
                    "none" => AdapterKind::None,
                    "lora" => AdapterKind::Lora,
                    "clorae" => AdapterKind::Clorae,
                    _ => return Err(TrainError::Config(format!("`adapter`: expected none, lora or clorae, got `{value}`"))),
                }
            }
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data_seed" => g.seed = parse(key, value)?,
            "train" | "dev" | "test" => {
                let n: usize = parse(key, value)?;
                for d in &mut g.datasets {
                    match key {
                        "train" => d.train = n,
                        "dev" => d.dev = n,
                        _ => d.test = n,
                    }
                }
            }
            "train_sizes" => {
                let sizes: Vec<usize> = parse_list(key, value)?;
                if sizes.len() != g.datasets.len() {
                    return Err(TrainError::Config(format!(
                        "`train_sizes` lists {} sizes for {} datasets",
                        sizes.len(),
                        g.datasets.len()
                    )));
                }
                for (d, n) in g.datasets.iter_mut().zip(sizes) {
                    d.train = n;
                }
            }
            "vocab_words" => g.vocab_words = parse(key, value)?,
            "n_fillers" => g.n_fillers = parse(key, value)?,
            "n_labels" => g.n_labels = parse(key, value)?,
            "text_len" => g.text_len = parse(key, value)?,
            "conflict_rate" => g.conflict_rate = parse(key, value)?,
            "visual_rate" => g.visual_rate = parse(key, value)?,
            "visual_noise" => g.visual_noise = parse(key, value)?,
            "lr" => self.learning_rate = parse(key, value)?,
            "decay_factor" => self.decay_factor = parse(key, value)?,
            "decay_every" => self.decay_every = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "targets" => self.targets = parse_list(key, value)?,
            "only_ulora" => a.only_ulora = parse_bool(key, value)?,
            "only_tlora" => a.only_tlora = parse_bool(key, value)?,
            "no_gate" => a.no_gate = parse_bool(key, value)?,
            "no_aml" => a.no_aml = parse_bool(key, value)?,
            "no_mim" => a.no_mim = parse_bool(key, value)?,
            "no_gate_weights" => {
                let w: Vec<f64> = parse_list(key, value)?;
                if w.len() != 2 {
                    return Err(TrainError::Config("`no_gate_weights` takes two values".into()));
                }
                a.no_gate_weights = (w[0], w[1]);
            }
            "variant" => {
                let (flags, kind) = Ablation::variant(value)?;
                *a = Ablation {
                    no_gate_weights: a.no_gate_weights,
                    ..flags
                };
                self.adapter = kind;
            }
            "seed" => self.seed = parse(key, value)?,
            "out_dir" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "group_size" => self.group_size = parse(key, value)?,
            "groups_per_step" => self.groups_per_step = parse(key, value)?,
            "dev_limit" => self.dev_limit = if value == "all" { None } else { Some(parse(key, value)?) },
            "eval_group" => self.eval_group = parse(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key `{key}`"))),
        }
        if matches!(key, "d_model" | "visual_len") {
            self.sync_visual();
        }
        Ok(())
    }

    /// Applies `key=value` or `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| TrainError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.apply_text(&text)
    }

    /// Adapter layout implied by the adapter kind and ablation flags.
    pub fn adapter_spec(&self) -> AdapterSpec {
        match self.adapter {
            AdapterKind::None => AdapterSpec::none(),
            AdapterKind::Lora => AdapterSpec::lora(),
            AdapterKind::Clorae => {
                let a = &self.ablation;
                let gate = if a.no_gate {
                    GateMode::Fixed(a.no_gate_weights.0, a.no_gate_weights.1)
                } else {
                    GateMode::Learned
                };
                AdapterSpec {
                    kind: AdapterKind::Clorae,
                    universal: !a.only_tlora,
                    task_experts: !a.only_ulora,
                    gate,
                    mim: !a.no_mim,
                }
            }
        }
    }

    /// MIM weight after ablation; zero whenever no MIM heads exist.
    pub fn effective_beta(&self) -> f64 {
        if self.adapter_spec().has_mim() {
            self.beta
        } else {
            0.0
        }
    }

    /// Reference score of every dataset.
    pub fn targets_for(&self, datasets: usize) -> Result<Vec<f64>, TrainError> {
        match self.targets.len() {
            1 => Ok(vec![self.targets[0]; datasets]),
            n if n == datasets => Ok(self.targets.clone()),
            n => Err(TrainError::Config(format!("{n} target scores for {datasets} datasets"))),
        }
    }

    /// Model config for a vocabulary of `vocab_size` tokens.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            adapter: self.adapter_spec(),
            seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.ablation.validate()?;
        if self.group_size == 0 || self.groups_per_step == 0 || self.eval_group == 0 {
            return Err(TrainError::Config("group sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(TrainError::Config(format!("decay factor {} outside (0, 1]", self.decay_factor)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(TrainError::Config(format!("beta {} must be non-negative", self.beta)));
        }
        if self.data_dir.is_none() {
            if self.generator.visual_dim != self.model.d_model || self.generator.visual_len != self.model.visual_len {
                return Err(TrainError::Config(format!(
                    "generator visual shape {} × {} differs from the model's {} × {}",
                    self.generator.visual_len, self.generator.visual_dim, self.model.visual_len, self.model.d_model
                )));
            }
            self.generator.validate()?;
        }
        self.model_config(4).validate()?;
        Ok(())
    }

    /// Keeps the generator's visual shape in step with the model.
    pub fn sync_visual(&mut self) {
        self.generator.visual_dim = self.model.d_model;
        self.generator.visual_len = self.model.visual_len;
    }

    /// Generator spec with one dataset per family and the given sizes.
    pub fn with_sizes(mut self, train: &[usize], dev: usize, test: usize) -> Self {
        for (d, &n) in self.generator.datasets.iter_mut().zip(train) {
            *d = DatasetSpec::new(&d.name.clone(), d.family, n, dev, test);
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clorae_model::Projection;

    #[test]
    fn key_value_text_overrides_defaults() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nepochs = 3\nlr=0.01  # inline\nwrap = q,k,v\nno_gate_weights = 1, 0\ntargets = 0.9,0.8,0.7\n")
            .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.model.wrap, vec![Projection::Q, Projection::K, Projection::V]);
        assert_eq!(c.ablation.no_gate_weights, (1.0, 0.0));
        assert_eq!(c.targets_for(3).unwrap(), vec![0.9, 0.8, 0.7]);
    }

    #[test]
    fn bad_lines_name_their_position() {
        let mut c = RunConfig::default();
        let e = c.apply_text("epochs = 2\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(c.apply_text("epochs 2").is_err());
        assert!(c.set("epochs", "two").is_err());
    }

    #[test]
    fn every_listed_key_is_accepted() {
        for key in RunConfig::KEYS {
            let mut c = RunConfig::default();
            let v = match *key {
                "wrap" => "q,v",
                "adapter" => "lora",
                "variant" => "no_gate",
                "no_gate_weights" => "1,0",
                "train_sizes" => "1,1,1",
                "targets" => "1",
                "data_dir" | "out_dir" => "x",
                "only_ulora" | "only_tlora" | "no_gate" | "no_aml" | "no_mim" | "train_embeddings" => "true",
                _ => "1",
            };
            c.set(key, v).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    #[test]
    fn exclusive_ablation_flags_are_rejected() {
        let mut c = RunConfig::default();
        c.ablation.only_ulora = true;
        c.ablation.only_tlora = true;
        assert!(matches!(c.validate(), Err(TrainError::Config(_))));
    }

    #[test]
    fn variants_map_to_adapter_layouts() {
        let mut c = RunConfig::default();
        c.set("variant", "only_tlora").unwrap();
        let s = c.adapter_spec();
        assert!(!s.universal && s.task_experts && s.gate == GateMode::Learned);
        assert_eq!(c.effective_beta(), 0.0);
        c.set("variant", "no_gate").unwrap();
        assert_eq!(c.adapter_spec().gate, GateMode::Fixed(1.0, 1.0));
        c.set("variant", "full").unwrap();
        assert_eq!(c.adapter_spec(), AdapterSpec::clorae());
        assert_eq!(c.effective_beta(), 0.01);
        c.set("variant", "lora").unwrap();
        assert_eq!(c.adapter_spec(), AdapterSpec::lora());
        assert!(c.set("variant", "nope").is_err());
    }

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }
}
