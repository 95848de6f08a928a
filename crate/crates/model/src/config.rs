use std::fmt;
use std::str::FromStr;

use clorae_core::GateMode;
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// A projection inside a transformer block that may carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 6] = [Self::Q, Self::K, Self::V, Self::O, Self::Up, Self::Down];

    pub fn name(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
            Self::Up => "up",
            Self::Down => "down",
        }
    }
}

impl FromStr for Projection {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ModelError::Config(format!("unknown projection `{s}` (expected q, k, v, o, up, down)")))
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a comma-separated projection list such as `q,v`.
pub fn parse_projections(s: &str) -> Result<Vec<Projection>, ModelError> {
    let mut out: Vec<Projection> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    /// Frozen base only.
    None,
    /// One rank-`r` LoRA pair per wrapped projection.
    Lora,
    Clorae,
}

/// Which parts of the collaborative adapter are present.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    pub universal: bool,
    pub task_experts: bool,
    pub gate: GateMode,
    pub mim: bool,
}

impl AdapterSpec {
    pub fn clorae() -> Self {
        Self {
            kind: AdapterKind::Clorae,
            universal: true,
            task_experts: true,
            gate: GateMode::Learned,
            mim: true,
        }
    }

    pub fn lora() -> Self {
        Self {
            kind: AdapterKind::Lora,
            universal: true,
            task_experts: false,
            gate: GateMode::Fixed(1.0, 0.0),
            mim: false,
        }
    }

    pub fn none() -> Self {
        Self {
            kind: AdapterKind::None,
            ..Self::lora()
        }
    }

    /// Whether a forward pass can produce MIM expert pairs.
    pub fn has_mim(&self) -> bool {
        self.kind == AdapterKind::Clorae && self.mim && self.universal && self.task_experts
    }

    pub fn has_learned_gate(&self) -> bool {
        self.kind == AdapterKind::Clorae && self.gate == GateMode::Learned
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Instruction plus text tokens.
    pub max_text_len: usize,
    /// Decoder cap, including the end token.
    pub max_answer_len: usize,
    pub visual_len: usize,
    pub rank: usize,
    pub n_tasks: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub wrap: Vec<Projection>,
    pub adapter: AdapterSpec,
    /// Train the token embedding and output head alongside the adapters.
    pub train_embeddings: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults for a vocabulary of `vocab_size` tokens.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            max_text_len: 64,
            max_answer_len: 24,
            visual_len: 2,
            rank: 6,
            n_tasks: 3,
            alpha: 6.0,
            dropout: 0.1,
            wrap: vec![Projection::Q, Projection::V],
            adapter: AdapterSpec::clorae(),
            train_embeddings: true,
            seed: 0,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.enc_layers + self.dec_layers
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.vocab_size < 4 {
            return bad(format!("vocabulary of {} tokens is too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("d_ff and layer counts must be positive".into());
        }
        if self.n_tasks == 0 || self.rank == 0 || self.rank % self.n_tasks != 0 {
            return bad(format!("rank {} must be a positive multiple of n_tasks {}", self.rank, self.n_tasks));
        }
        if self.adapter.kind != AdapterKind::None {
            let narrowest = if self.wrap.iter().any(|p| matches!(p, Projection::Up | Projection::Down)) {
                self.d_model.min(self.d_ff)
            } else {
                self.d_model
            };
            if self.rank > narrowest {
                return bad(format!("rank {} exceeds the projection width {narrowest}", self.rank));
            }
        }
        if self.adapter.kind == AdapterKind::Clorae && !self.adapter.universal && !self.adapter.task_experts {
            return bad("collaborative adapter needs a universal or task branch".into());
        }
        if !(self.alpha > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("alpha {} / dropout {} out of range", self.alpha, self.dropout));
        }
        Ok(())
    }
}
