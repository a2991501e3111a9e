//! Frozen embedding tables standing in for pretrained text/image encoders,
//! zero-shot concept detection by cosine similarity, and question keyword
//! extraction.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kgstore::Triple;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("line {line}: duplicate token `{token}`")]
    DuplicateToken { line: usize, token: String },
    #[error("header declares {declared} entries but {found} were read")]
    CountMismatch { declared: usize, found: usize },
    #[error("vector for `{0}` has zero norm; cosine is undefined")]
    ZeroNorm(String),
    #[error("expected a vector of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("label table is empty")]
    EmptyTable,
    #[error("top_k must be at least 1")]
    ZeroTopK,
}

/// Token → vector map in insertion order. Vectors are stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    name: String,
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: &[f32]) -> Result<(), FeatError> {
        let token = token.into();
        let line = self.tokens.len() + 2;
        if vector.len() != self.dim {
            return Err(FeatError::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        if token.is_empty() || token.contains(char::is_whitespace) {
            return Err(FeatError::Format {
                line,
                reason: format!("invalid token {token:?}"),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(FeatError::Format {
                line,
                reason: format!("non-finite component for `{token}`"),
            });
        }
        if self.index.contains_key(&token) {
            return Err(FeatError::DuplicateToken { line, token });
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    /// Seeded Gaussian vectors, each L2-normalized.
    pub fn random<R: Rng>(name: impl Into<String>, dim: usize, tokens: &[&str], rng: &mut R) -> Self {
        let mut table = Self::new(name, dim);
        for t in tokens {
            let v = random_unit_vector(dim, rng);
            table.insert(*t, &v).expect("generated tokens are unique and finite");
        }
        table
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn get(&self, token: &str) -> Option<&[f32]> {
        self.index.get(token).map(|&i| self.vector(i))
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), self.vector(i)))
    }

    /// Reads word2vec text format; the table is named after the file stem.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatError> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read(name, BufReader::new(File::open(path)?))
    }

    pub fn read<R: BufRead>(name: impl Into<String>, reader: R) -> Result<Self, FeatError> {
        let mut lines = reader.lines();
        let header = lines.next().transpose()?.ok_or(FeatError::Format {
            line: 1,
            reason: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str| {
            s.parse::<usize>().map_err(|_| FeatError::Format {
                line: 1,
                reason: format!("header field {s:?} is not a non-negative integer"),
            })
        };
        let (count, dim) = match fields.as_slice() {
            [c, d] => (parse_usize(c)?, parse_usize(d)?),
            _ => {
                return Err(FeatError::Format {
                    line: 1,
                    reason: "header must be `<count> <dim>`".into(),
                })
            }
        };
        if dim == 0 {
            return Err(FeatError::Format {
                line: 1,
                reason: "dimension must be positive".into(),
            });
        }
        let mut table = Self::new(name, dim);
        let mut buf = Vec::with_capacity(dim);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ').filter(|s| !s.is_empty());
            let token = parts.next().unwrap_or_default();
            buf.clear();
            for p in parts {
                let v: f32 = p.parse().map_err(|_| FeatError::Format {
                    line: line_no,
                    reason: format!("bad number {p:?}"),
                })?;
                if !v.is_finite() {
                    return Err(FeatError::Format {
                        line: line_no,
                        reason: format!("non-finite value {p:?}"),
                    });
                }
                buf.push(v);
            }
            if buf.len() != dim {
                return Err(FeatError::Format {
                    line: line_no,
                    reason: format!("expected {dim} values, found {}", buf.len()),
                });
            }
            if table.contains(token) {
                return Err(FeatError::DuplicateToken {
                    line: line_no,
                    token: token.to_string(),
                });
            }
            table.insert(token, &buf).map_err(|e| match e {
                FeatError::Format { reason, .. } => FeatError::Format { line: line_no, reason },
                other => other,
            })?;
        }
        if table.len() != count {
            return Err(FeatError::CountMismatch {
                declared: count,
                found: table.len(),
            });
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{} {}", self.len(), self.dim)?;
        let mut line = String::new();
        for (token, v) in self.iter() {
            line.clear();
            line.push_str(token);
            for &x in v {
                line.push(' ');
                line.push_str(&format_sig9(x));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

pub fn random_unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f32> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v.into_iter().map(|x| x as f32).collect()
}

/// Formats with 9 significant digits (like C's `%.9g`), enough for every
/// `f32` to parse back to the identical bit pattern.
pub fn format_sig9(v: f32) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.8e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, v);
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Cosine similarity accumulated in double precision.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedConcept {
    pub token: String,
    pub score: f64,
}

/// Top labels for one image, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDetection {
    pub concepts: Vec<DetectedConcept>,
}

impl ConceptDetection {
    pub fn tokens(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.token.clone()).collect()
    }
}

/// Zero-shot detection: the `top_k` labels by cosine similarity to the image
/// vector, descending, ties broken by token.
pub fn detect_concepts(
    image_vec: &[f32],
    labels: &EmbeddingTable,
    top_k: usize,
) -> Result<ConceptDetection, FeatError> {
    if top_k == 0 {
        return Err(FeatError::ZeroTopK);
    }
    if labels.is_empty() {
        return Err(FeatError::EmptyTable);
    }
    if image_vec.len() != labels.dim() {
        return Err(FeatError::Dimension {
            expected: labels.dim(),
            got: image_vec.len(),
        });
    }
    if image_vec.iter().all(|&v| v == 0.0) {
        return Err(FeatError::ZeroNorm("<image>".into()));
    }
    let mut scored = Vec::with_capacity(labels.len());
    for (token, v) in labels.iter() {
        let s = cosine(image_vec, v).ok_or_else(|| FeatError::ZeroNorm(token.to_string()))?;
        scored.push((token, s));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    scored.truncate(top_k);
    Ok(ConceptDetection {
        concepts: scored
            .into_iter()
            .map(|(t, s)| DetectedConcept {
                token: t.to_string(),
                score: s,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StopwordSet(HashSet<String>);

impl StopwordSet {
    /// One token per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn english() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Lowercases and splits on anything that is not alphanumeric or `_`.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Content words of a question, in order, stopwords and repeats removed.
pub fn extract_keywords(question: &str, stopwords: &StopwordSet) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize(question)
        .into_iter()
        .filter(|t| !stopwords.contains(t))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedQuestion {
    pub vector: Vec<f32>,
    /// No token of the question was in the table.
    pub out_of_vocabulary: bool,
}

/// Mean of the in-vocabulary token vectors.
pub fn encode_question(question: &str, table: &EmbeddingTable) -> EncodedQuestion {
    let mut acc = vec![0.0f64; table.dim()];
    let mut n = 0usize;
    for t in tokenize(question) {
        if let Some(v) = table.get(&t) {
            acc.iter_mut().zip(v).for_each(|(a, &x)| *a += x as f64);
            n += 1;
        }
    }
    if n == 0 {
        return EncodedQuestion {
            vector: vec![0.0; table.dim()],
            out_of_vocabulary: true,
        };
    }
    EncodedQuestion {
        vector: acc.into_iter().map(|a| (a / n as f64) as f32).collect(),
        out_of_vocabulary: false,
    }
}

/// Per-token vectors of the in-vocabulary tokens, in question order.
pub fn question_token_vectors<'t>(question: &str, table: &'t EmbeddingTable) -> Vec<&'t [f32]> {
    tokenize(question).iter().filter_map(|t| table.get(t)).collect()
}

/// Sinusoidal code for token position `pos`, scaled to unit length.
pub fn position_encoding(pos: usize, dim: usize) -> Vec<f32> {
    let scale = (2.0 / dim.max(1) as f64).sqrt();
    (0..dim)
        .map(|i| {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * freq;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            (v * scale) as f32
        })
        .collect()
}

/// In-vocabulary token vectors with their position code added, so that word
/// order survives attention ("sofa left of lamp" differs from "lamp left of
/// sofa").
pub fn positioned_token_vectors(question: &str, table: &EmbeddingTable) -> Vec<Vec<f32>> {
    question_token_vectors(question, table)
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.iter()
                .zip(position_encoding(i, table.dim()))
                .map(|(&x, p)| x + p)
                .collect()
        })
        .collect()
}

/// Triple vector: mean of the head, relation and tail vectors that exist in
/// the table. `None` if none of the three is present.
pub fn embed_triple(triple: &Triple, table: &EmbeddingTable) -> Option<Vec<f32>> {
    let parts: Vec<&[f32]> = [&triple.head, &triple.relation, &triple.tail]
        .iter()
        .filter_map(|t| table.get(t))
        .collect();
    if parts.is_empty() {
        return None;
    }
    let n = parts.len() as f64;
    Some(
        (0..table.dim())
            .map(|i| (parts.iter().map(|p| p[i] as f64).sum::<f64>() / n) as f32)
            .collect(),
    )
}
