use serde::{Deserialize, Serialize};

use super::ModelError;

/// Fusion strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One image→question attention block; pooled knowledge concatenated.
    A,
    /// Image→question block, then a second block attending over knowledge.
    B,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "a" | "A" => Ok(Variant::A),
            "b" | "B" => Ok(Variant::B),
            _ => Err(format!("unknown variant {s:?} (expected a or b)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub image_dim: usize,
    pub question_dim: usize,
    pub knowledge_dim: usize,
    pub hidden_dim: usize,
    /// Inner width of each block's two-layer MLP.
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub answer_vocab_size: usize,
    pub max_triples: usize,
}

pub const PRESET_NAMES: [&str; 4] = ["model-a-vqa", "model-b-daquar", "model-a-synth", "model-b-synth"];

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        for (name, v) in [
            ("image_dim", self.image_dim),
            ("question_dim", self.question_dim),
            ("knowledge_dim", self.knowledge_dim),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads {} does not divide hidden_dim {}",
                self.num_heads, self.hidden_dim
            ));
        }
        if self.answer_vocab_size < 2 {
            return bad("answer_vocab_size must be at least 2".into());
        }
        Ok(())
    }

    pub fn preset(name: &str) -> Option<Self> {
        let text = match name {
            "model-a-vqa" => include_str!("../../presets/model-a-vqa.json"),
            "model-b-daquar" => include_str!("../../presets/model-b-daquar.json"),
            "model-a-synth" => include_str!("../../presets/model-a-synth.json"),
            "model-b-synth" => include_str!("../../presets/model-b-synth.json"),
            _ => return None,
        };
        Some(serde_json::from_str(text).expect("shipped preset parses"))
    }

    /// Number of fusion blocks.
    pub fn blocks(&self) -> usize {
        match self.variant {
            Variant::A => 1,
            Variant::B => 2,
        }
    }

    /// Width of the classifier's input.
    pub fn classifier_in(&self) -> usize {
        match self.variant {
            Variant::A => 2 * self.hidden_dim,
            Variant::B => self.hidden_dim,
        }
    }
}

/// Exact trainable-scalar count, from the closed form:
/// three input projections, `blocks` fusion blocks, one classifier.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let h = cfg.hidden_dim;
    let f = cfg.ffn_dim;
    let projections = (cfg.image_dim + 1) * h + (cfg.question_dim + 1) * h + (cfg.knowledge_dim + 1) * h;
    // q/k/v/o linear maps, two layer norms (gain + bias), MLP h→f→h
    let block = 4 * (h * h + h) + 2 * 2 * h + (h * f + f) + (f * h + h);
    let classifier = (cfg.classifier_in() + 1) * cfg.answer_vocab_size;
    projections + cfg.blocks() * block + classifier
}
