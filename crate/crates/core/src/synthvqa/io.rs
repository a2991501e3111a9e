use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::generate::{Dataset, GenConfig, SyntheticTables};
use super::kg::build_synthetic_kg;
use super::{AnswerVocabulary, Scene, SynthError, VqaSample, COLORS, IMAGE_DIM, OBJECT_CLASSES};
use crate::featstore::EmbeddingTable;
use crate::kgstore::{build_index, DEFAULT_LANGUAGE};

/// File names inside a dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetFiles {
    pub dir: PathBuf,
}

impl DatasetFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn scenes(&self) -> PathBuf {
        self.dir.join("scenes.jsonl")
    }

    pub fn samples(&self) -> PathBuf {
        self.dir.join("samples.jsonl")
    }

    pub fn answers(&self) -> PathBuf {
        self.dir.join("answers.json")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("gen_config.json")
    }

    pub fn images(&self) -> PathBuf {
        self.dir.join("images.w2v")
    }

    pub fn labels(&self) -> PathBuf {
        self.dir.join("labels.w2v")
    }

    pub fn words(&self) -> PathBuf {
        self.dir.join("words.w2v")
    }

    pub fn kg_table(&self) -> PathBuf {
        self.dir.join("kg300.w2v")
    }

    /// ConceptNet-format dump of the synthetic KG.
    pub fn assertions(&self) -> PathBuf {
        self.dir.join("kg_assertions.csv")
    }

    /// Prefix of the prebuilt index (`kg.triples.tsv`, `kg.meta.json`).
    pub fn kg_prefix(&self) -> PathBuf {
        self.dir.join("kg")
    }

    /// Every file `write_dataset` produces, in a fixed order.
    pub fn all(&self) -> Vec<PathBuf> {
        vec![
            self.scenes(),
            self.samples(),
            self.answers(),
            self.config(),
            self.images(),
            self.labels(),
            self.words(),
            self.kg_table(),
            self.assertions(),
            crate::kgstore::ConceptIndex::triples_path(self.kg_prefix()),
            crate::kgstore::ConceptIndex::meta_path(self.kg_prefix()),
        ]
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), SynthError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, SynthError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SynthError::Data {
            file: path.display().to_string(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Timestamp recorded in the generated index metadata. Fixed so that
/// regenerating a dataset reproduces every byte.
fn generated_at() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

pub fn write_dataset(
    dir: impl AsRef<Path>,
    data: &Dataset,
    tables: &SyntheticTables,
    cfg: &GenConfig,
) -> Result<DatasetFiles, SynthError> {
    let files = DatasetFiles::new(dir.as_ref());
    fs::create_dir_all(&files.dir)?;
    write_jsonl(&files.scenes(), &data.scenes)?;
    write_jsonl(&files.samples(), &data.samples)?;
    fs::write(files.answers(), serde_json::to_string_pretty(&data.answers)? + "\n")?;
    fs::write(files.config(), serde_json::to_string_pretty(cfg)? + "\n")?;

    let mut images = EmbeddingTable::new("images", IMAGE_DIM);
    for s in &data.scenes {
        images.insert(&s.scene_id, &s.image_vec)?;
    }
    images.save(files.images())?;
    tables.labels.save(files.labels())?;
    tables.words.save(files.words())?;
    tables.kg.save(files.kg_table())?;

    let triples = build_synthetic_kg(&OBJECT_CLASSES, &COLORS);
    let mut w = BufWriter::new(File::create(files.assertions())?);
    for t in &triples {
        writeln!(w, "{}", t.to_assertion_line(DEFAULT_LANGUAGE))?;
    }
    w.flush()?;
    build_index(triples).save_at(files.kg_prefix(), DEFAULT_LANGUAGE, generated_at())?;
    Ok(files)
}

/// A dataset directory read back into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub tables: SyntheticTables,
    pub config: GenConfig,
}

impl LoadedDataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SynthError> {
        let files = DatasetFiles::new(dir.as_ref());
        let data_err = |file: &Path, reason: String| SynthError::Data {
            file: file.display().to_string(),
            reason,
        };
        let answers: AnswerVocabulary = serde_json::from_str(&fs::read_to_string(files.answers())?)?;
        let answers = answers.rebuild()?;
        let config: GenConfig = serde_json::from_str(&fs::read_to_string(files.config())?)?;
        let images = EmbeddingTable::load(files.images())?;
        let mut scenes: Vec<Scene> = read_jsonl(&files.scenes())?;
        for s in &mut scenes {
            s.image_vec = images
                .get(&s.scene_id)
                .ok_or_else(|| data_err(&files.images(), format!("no vector for {}", s.scene_id)))?
                .to_vec();
        }
        let by_id: HashMap<&str, &Scene> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
        let samples: Vec<VqaSample> = read_jsonl(&files.samples())?;
        for s in &samples {
            let scene = by_id
                .get(s.scene_id.as_str())
                .ok_or_else(|| data_err(&files.samples(), format!("sample {} names unknown scene", s.sample_id)))?;
            if scene.split != s.split {
                return Err(data_err(&files.samples(), format!("sample {} split differs from its scene", s.sample_id)));
            }
            if s.gold_answer >= answers.len() || answers.token(s.gold_answer) != s.answer {
                return Err(data_err(
                    &files.samples(),
                    format!("sample {} gold answer does not match the vocabulary", s.sample_id),
                ));
            }
        }
        let tables = SyntheticTables {
            labels: EmbeddingTable::load(files.labels())?,
            words: EmbeddingTable::load(files.words())?,
            kg: EmbeddingTable::load(files.kg_table())?,
        };
        Ok(Self {
            dataset: Dataset {
                scenes,
                samples,
                answers,
            },
            tables,
            config,
        })
    }
}
