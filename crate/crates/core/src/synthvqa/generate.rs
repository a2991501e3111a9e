use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::kg::{build_synthetic_kg, kg_vocabulary};
use super::{
    oracle_answer, plural, AnswerVocabulary, QuestionType, Scene, SceneObject, Split, StructuredQuestion, SynthError,
    VqaSample, COLORS, GRID, IMAGE_DIM, KG_DIM, MAX_OBJECTS, OBJECT_CLASSES,
};
use crate::featstore::{random_unit_vector, EmbeddingTable};

const SCENE_STREAM: u64 = 0;
const BACKGROUND_STREAM: u64 = 1;
const TABLE_STREAM: u64 = 2;

/// Non-content words used by the question templates.
const TEMPLATE_WORDS: [&str; 11] = ["is", "there", "a", "how", "many", "are", "what", "color", "the", "left", "of"];

/// Relative weights of the question types.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeMix {
    pub existence: f64,
    pub counting: f64,
    pub color: f64,
    pub spatial: f64,
}

impl Default for TypeMix {
    fn default() -> Self {
        Self {
            existence: 0.3,
            counting: 0.3,
            color: 0.2,
            spatial: 0.2,
        }
    }
}

impl TypeMix {
    fn weights(&self) -> [(QuestionType, f64); 4] {
        [
            (QuestionType::Existence, self.existence),
            (QuestionType::Counting, self.counting),
            (QuestionType::Color, self.color),
            (QuestionType::Spatial, self.spatial),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub questions_per_scene: usize,
    /// Fraction of scenes held out for validation.
    pub val_fraction: f64,
    pub type_mix: TypeMix,
    /// Chance an object takes its class's usual color.
    pub canonical_color_prob: f64,
    /// Chance an additional object repeats a class already in the scene.
    pub repeat_class_prob: f64,
    /// Chance an existence question asks about a class that is present.
    pub existence_present_prob: f64,
    /// Chance a counting question asks about a class that is present.
    pub count_present_prob: f64,
    /// Per-dimension std of the Gaussian noise added to image vectors.
    pub image_noise_std: f64,
    /// Weight of the background vector for each empty cell.
    pub background_weight: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 2000,
            questions_per_scene: 3,
            val_fraction: 0.2,
            type_mix: TypeMix::default(),
            canonical_color_prob: 0.8,
            repeat_class_prob: 0.4,
            existence_present_prob: 0.5,
            count_present_prob: 0.75,
            image_noise_std: 0.002,
            background_weight: 0.25,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_scenes == 0 || self.questions_per_scene == 0 {
            return bad("n_scenes and questions_per_scene must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        for p in [
            self.canonical_color_prob,
            self.repeat_class_prob,
            self.existence_present_prob,
            self.count_present_prob,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must be in [0, 1]");
            }
        }
        let w = self.type_mix.weights();
        if w.iter().any(|(_, x)| !(x.is_finite() && *x >= 0.0)) || w.iter().map(|(_, x)| x).sum::<f64>() <= 0.0 {
            return bad("type_mix weights must be non-negative with a positive sum");
        }
        if !(self.image_noise_std.is_finite() && self.image_noise_std >= 0.0) {
            return bad("image_noise_std must be non-negative");
        }
        if !(self.background_weight.is_finite() && self.background_weight > 0.0) {
            return bad("background_weight must be positive");
        }
        Ok(())
    }
}

/// Frozen embedding tables for the synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTables {
    /// Object classes and colors (image space).
    pub labels: EmbeddingTable,
    /// Question words; class and color words reuse the label vectors and
    /// plurals reuse their singular.
    pub words: EmbeddingTable,
    /// Knowledge-graph concepts and relations.
    pub kg: EmbeddingTable,
}

pub fn build_tables(seed: u64) -> SyntheticTables {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TABLE_STREAM);
    let label_tokens: Vec<&str> = OBJECT_CLASSES.iter().chain(COLORS.iter()).copied().collect();
    let labels = EmbeddingTable::random("labels", IMAGE_DIM, &label_tokens, &mut rng);
    let mut words = EmbeddingTable::new("words", IMAGE_DIM);
    for t in TEMPLATE_WORDS {
        words.insert(t, &random_unit_vector(IMAGE_DIM, &mut rng)).expect("unique template words");
    }
    for (t, v) in labels.iter() {
        words.insert(t, v).expect("labels are disjoint from template words");
    }
    for c in OBJECT_CLASSES {
        words
            .insert(plural(c), labels.get(c).expect("class label"))
            .expect("plurals are unique");
    }
    let kg_triples = build_synthetic_kg(&OBJECT_CLASSES, &COLORS);
    let kg_tokens = kg_vocabulary(&kg_triples);
    let kg_refs: Vec<&str> = kg_tokens.iter().map(String::as_str).collect();
    let kg = EmbeddingTable::random("kg300", KG_DIM, &kg_refs, &mut rng);
    SyntheticTables { labels, words, kg }
}

/// Generated scenes and samples with their answer vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub samples: Vec<VqaSample>,
    pub answers: AnswerVocabulary,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &VqaSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

fn canonical_color(class_idx: usize) -> &'static str {
    COLORS[class_idx % COLORS.len()]
}

fn random_scene(rng: &mut ChaCha8Rng, cfg: &GenConfig, id: usize, split: Split) -> Scene {
    let n = rng.random_range(1..=MAX_OBJECTS);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let mut cells = cells[..n].to_vec();
    cells.sort_unstable();
    let mut classes: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..n {
        let c = if !classes.is_empty() && rng.random_bool(cfg.repeat_class_prob) {
            *classes.choose(rng).expect("non-empty")
        } else {
            rng.random_range(0..OBJECT_CLASSES.len())
        };
        classes.push(c);
    }
    // Shuffle so a repeated class is not biased towards later cells.
    classes.shuffle(rng);
    let objects = cells
        .into_iter()
        .zip(classes)
        .map(|(cell, c)| {
            let color = if rng.random_bool(cfg.canonical_color_prob) {
                canonical_color(c)
            } else {
                let others: Vec<&str> = COLORS.iter().copied().filter(|&x| x != canonical_color(c)).collect();
                others[rng.random_range(0..others.len())]
            };
            SceneObject {
                class: OBJECT_CLASSES[c].to_string(),
                color: color.to_string(),
                row: cell / GRID,
                col: cell % GRID,
            }
        })
        .collect();
    Scene {
        scene_id: format!("scene_{id:05}"),
        split,
        objects,
        image_vec: Vec::new(),
    }
}

/// L2-normalized mean over all grid cells, plus Gaussian noise. An occupied
/// cell contributes its object's class vector, an empty one a down-weighted
/// background vector; without the background term, scenes differing only in
/// how many copies of one class they hold would normalize to the same vector.
fn image_vector(scene: &Scene, labels: &EmbeddingTable, background: &[f32], cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut acc = vec![0.0f64; IMAGE_DIM];
    for cell in 0..GRID * GRID {
        let (v, w) = match scene.objects.iter().find(|o| o.cell() == cell) {
            Some(o) => (labels.get(&o.class).expect("coverage checked"), 1.0),
            None => (background, cfg.background_weight),
        };
        acc.iter_mut().zip(v).for_each(|(a, &x)| *a += w * x as f64);
    }
    let noise_std = cfg.image_noise_std;
    for a in acc.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *a = *a / (GRID * GRID) as f64 + noise_std * z;
    }
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    acc.iter().map(|a| (a / norm) as f32).collect()
}

fn draw_type(rng: &mut ChaCha8Rng, mix: &TypeMix) -> QuestionType {
    let w = mix.weights();
    let total: f64 = w.iter().map(|(_, x)| x).sum();
    let mut r = rng.random_range(0.0..total);
    for (t, x) in w {
        if r < x {
            return t;
        }
        r -= x;
    }
    w.iter().rev().find(|(_, x)| *x > 0.0).expect("positive total").0
}

fn pick_class(rng: &mut ChaCha8Rng, scene: &Scene, present: bool) -> String {
    let mut pool: Vec<&str> = OBJECT_CLASSES
        .iter()
        .copied()
        .filter(|c| (scene.count(c) > 0) == present)
        .collect();
    if pool.is_empty() {
        pool = OBJECT_CLASSES.to_vec();
    }
    pool[rng.random_range(0..pool.len())].to_string()
}

fn draw_question(rng: &mut ChaCha8Rng, scene: &Scene, cfg: &GenConfig) -> StructuredQuestion {
    let mut present: Vec<&str> = Vec::new();
    for o in &scene.objects {
        if !present.contains(&o.class.as_str()) {
            present.push(&o.class);
        }
    }
    let mut kind = draw_type(rng, &cfg.type_mix);
    if kind == QuestionType::Spatial && present.len() < 2 {
        kind = QuestionType::Existence;
    }
    match kind {
        QuestionType::Existence => {
            let p = rng.random_bool(cfg.existence_present_prob);
            StructuredQuestion::Exists {
                class: pick_class(rng, scene, p),
            }
        }
        QuestionType::Counting => {
            let p = rng.random_bool(cfg.count_present_prob);
            StructuredQuestion::Count {
                class: pick_class(rng, scene, p),
            }
        }
        QuestionType::Color => StructuredQuestion::ColorOf {
            class: pick_class(rng, scene, true),
        },
        QuestionType::Spatial => {
            let pair: Vec<&&str> = present.choose_multiple(rng, 2).collect();
            StructuredQuestion::LeftOf {
                class: pair[0].to_string(),
                other: pair[1].to_string(),
            }
        }
    }
}

/// Scenes, questions and gold answers for `cfg`. Deterministic in
/// `cfg.seed`; `labels` must cover every object class and color.
pub fn generate_dataset(cfg: &GenConfig, labels: &EmbeddingTable) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    if labels.dim() != IMAGE_DIM {
        return Err(SynthError::Config(format!(
            "label table has dim {}, images need {IMAGE_DIM}",
            labels.dim()
        )));
    }
    let missing: Vec<String> = OBJECT_CLASSES
        .iter()
        .chain(COLORS.iter())
        .filter(|t| !labels.contains(t))
        .map(|t| t.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(SynthError::InsufficientLabels(missing));
    }
    let answers = AnswerVocabulary::standard();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SCENE_STREAM);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    bg_rng.set_stream(BACKGROUND_STREAM);
    let background = random_unit_vector(IMAGE_DIM, &mut bg_rng);

    let n_val = (cfg.n_scenes as f64 * cfg.val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_scenes).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; cfg.n_scenes];
    for &i in &order[..n_val] {
        splits[i] = Split::Val;
    }

    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    let mut samples = Vec::with_capacity(cfg.n_scenes * cfg.questions_per_scene);
    for (id, &split) in splits.iter().enumerate() {
        let mut scene = random_scene(&mut rng, cfg, id, split);
        scene.image_vec = image_vector(&scene, labels, &background, cfg, &mut rng);
        let mut asked: Vec<StructuredQuestion> = Vec::new();
        for _ in 0..cfg.questions_per_scene {
            let mut q = draw_question(&mut rng, &scene, cfg);
            for _ in 0..8 {
                if !asked.contains(&q) {
                    break;
                }
                q = draw_question(&mut rng, &scene, cfg);
            }
            let gold = oracle_answer(&scene, &q, &answers)?;
            samples.push(VqaSample {
                sample_id: samples.len(),
                scene_id: scene.scene_id.clone(),
                split,
                question: q.text(),
                question_type: q.question_type(),
                structured: q.clone(),
                answer: answers.token(gold).to_string(),
                gold_answer: gold,
            });
            asked.push(q);
        }
        scenes.push(scene);
    }
    Ok(Dataset {
        scenes,
        samples,
        answers,
    })
}
