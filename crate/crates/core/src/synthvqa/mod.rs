//! Deterministic synthetic VQA benchmark: grid scenes, templated questions
//! with structured forms, gold answers from an oracle, and a small knowledge
//! graph consistent with the scene vocabulary.

mod generate;
mod io;
mod kg;

#[cfg(test)]
mod tests;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featstore::FeatError;
use crate::kgstore::KgError;

pub use generate::{build_tables, generate_dataset, Dataset, GenConfig, SyntheticTables, TypeMix};
pub use io::{write_dataset, DatasetFiles, LoadedDataset};
pub use kg::{build_synthetic_kg, location_of};

pub const OBJECT_CLASSES: [&str; 10] = [
    "chair", "table", "desk", "monitor", "keyboard", "lamp", "sofa", "bed", "cabinet", "cup",
];
pub const COLORS: [&str; 8] = ["red", "green", "blue", "yellow", "white", "black", "brown", "gray"];
pub const GRID: usize = 3;
pub const MAX_OBJECTS: usize = 5;
pub const MAX_COUNT: usize = 5;
pub const IMAGE_DIM: usize = 512;
pub const KG_DIM: usize = 300;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("label table lacks vectors for: {}", .0.join(", "))]
    InsufficientLabels(Vec<String>),
    #[error("unanswerable question: {0}")]
    Unanswerable(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{file}: {reason}")]
    Data { file: String, reason: String },
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(format!("unknown split {s:?} (expected train or val)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: String,
    pub color: String,
    pub row: usize,
    pub col: usize,
}

impl SceneObject {
    /// Row-major cell index; also the position order used for ties.
    pub fn cell(&self) -> usize {
        self.row * GRID + self.col
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub split: Split,
    /// Sorted by cell.
    pub objects: Vec<SceneObject>,
    /// Stored in the `images.w2v` sidecar, not in the scene record.
    #[serde(skip)]
    pub image_vec: Vec<f32>,
}

impl Scene {
    pub fn count(&self, class: &str) -> usize {
        self.objects.iter().filter(|o| o.class == class).count()
    }

    /// First object of `class` in position order.
    pub fn first(&self, class: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.class == class)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Existence,
    Counting,
    Color,
    Spatial,
}

impl QuestionType {
    pub const ALL: [QuestionType; 4] = [
        QuestionType::Existence,
        QuestionType::Counting,
        QuestionType::Color,
        QuestionType::Spatial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Existence => "existence",
            QuestionType::Counting => "counting",
            QuestionType::Color => "color",
            QuestionType::Spatial => "spatial",
        }
    }
}

/// Machine-readable form of a question, consumed by the oracle.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructuredQuestion {
    Exists { class: String },
    Count { class: String },
    ColorOf { class: String },
    LeftOf { class: String, other: String },
}

impl StructuredQuestion {
    pub fn question_type(&self) -> QuestionType {
        match self {
            StructuredQuestion::Exists { .. } => QuestionType::Existence,
            StructuredQuestion::Count { .. } => QuestionType::Counting,
            StructuredQuestion::ColorOf { .. } => QuestionType::Color,
            StructuredQuestion::LeftOf { .. } => QuestionType::Spatial,
        }
    }

    /// Natural-language rendering.
    pub fn text(&self) -> String {
        match self {
            StructuredQuestion::Exists { class } => format!("Is there a {class}?"),
            StructuredQuestion::Count { class } => format!("How many {} are there?", plural(class)),
            StructuredQuestion::ColorOf { class } => format!("What color is the {class}?"),
            StructuredQuestion::LeftOf { class, other } => format!("Is the {class} left of the {other}?"),
        }
    }
}

pub fn plural(word: &str) -> String {
    if ["s", "x", "ch", "sh"].iter().any(|s| word.ends_with(s)) {
        format!("{word}es")
    } else {
        format!("{word}s")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaSample {
    pub sample_id: usize,
    pub scene_id: String,
    pub split: Split,
    pub question: String,
    pub question_type: QuestionType,
    pub structured: StructuredQuestion,
    pub answer: String,
    pub gold_answer: usize,
}

/// Fixed answer list; a sample's label is an index into it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    pub fn new(answers: Vec<String>) -> Result<Self, SynthError> {
        let mut index = HashMap::new();
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(SynthError::Config(format!("duplicate answer {a:?}")));
            }
        }
        Ok(Self { answers, index })
    }

    /// yes, no, the counts 0–5, the colors, the object classes.
    pub fn standard() -> Self {
        let answers = ["yes", "no"]
            .iter()
            .map(|s| s.to_string())
            .chain((0..=MAX_COUNT).map(|n| n.to_string()))
            .chain(COLORS.iter().map(|s| s.to_string()))
            .chain(OBJECT_CLASSES.iter().map(|s| s.to_string()))
            .collect();
        Self::new(answers).expect("standard answers are unique")
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn token(&self, i: usize) -> &str {
        &self.answers[i]
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    fn rebuild(mut self) -> Result<Self, SynthError> {
        let answers = std::mem::take(&mut self.answers);
        Self::new(answers)
    }
}

/// Ground-truth answer computed from the scene contents.
pub fn oracle_answer(
    scene: &Scene,
    question: &StructuredQuestion,
    vocab: &AnswerVocabulary,
) -> Result<usize, SynthError> {
    let known = |class: &str| {
        if vocab.index_of(class).is_some() {
            Ok(())
        } else {
            Err(SynthError::Unanswerable(format!("unknown class {class:?}")))
        }
    };
    let yes_no = |b: bool| if b { "yes" } else { "no" };
    let answer = match question {
        StructuredQuestion::Exists { class } => {
            known(class)?;
            yes_no(scene.count(class) > 0).to_string()
        }
        StructuredQuestion::Count { class } => {
            known(class)?;
            scene.count(class).to_string()
        }
        StructuredQuestion::ColorOf { class } => {
            known(class)?;
            scene
                .first(class)
                .ok_or_else(|| SynthError::Unanswerable(format!("no {class} in {}", scene.scene_id)))?
                .color
                .clone()
        }
        StructuredQuestion::LeftOf { class, other } => {
            known(class)?;
            known(other)?;
            if class == other {
                return Err(SynthError::Unanswerable(format!("{class} compared with itself")));
            }
            let missing = || SynthError::Unanswerable(format!("{class} or {other} missing from {}", scene.scene_id));
            let a = scene.first(class).ok_or_else(missing)?;
            let b = scene.first(other).ok_or_else(missing)?;
            yes_no(a.col < b.col).to_string()
        }
    };
    vocab
        .index_of(&answer)
        .ok_or_else(|| SynthError::Unanswerable(format!("answer {answer:?} is outside the vocabulary")))
}
