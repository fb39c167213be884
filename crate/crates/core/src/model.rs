//! Shared domain types and the JSONL corpus loaders.
//!
//! Corpus files are JSON Lines. The first line may be a header of the form
//! `{"embedding_dim": 768}` which fixes the embedding dimension for the whole
//! file; without it the dimension is taken from the first embedding seen.
//! Either way every embedding in one file must share a single dimension.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of Sustainable Development Goals.
pub const SDG_COUNT: usize = 17;

/// One of the 17 SDGs, numbered 1 through 17.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SdgId(u8);

impl SdgId {
    pub fn new(value: u8) -> Result<Self> {
        if (1..=SDG_COUNT as u8).contains(&value) {
            Ok(SdgId(value))
        } else {
            Err(Error::invalid(format!("SDG id {value} outside 1..=17")))
        }
    }

    /// Builds an id from a zero-based component index.
    ///
    /// Panics if `index >= 17`.
    pub fn from_index(index: usize) -> Self {
        assert!(index < SDG_COUNT, "SDG index {index} out of range");
        SdgId(index as u8 + 1)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based position in an [`SdgVector`].
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn all() -> impl Iterator<Item = SdgId> {
        (1..=SDG_COUNT as u8).map(SdgId)
    }
}

impl TryFrom<u8> for SdgId {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        SdgId::new(value)
    }
}

impl From<SdgId> for u8 {
    fn from(id: SdgId) -> u8 {
        id.0
    }
}

impl fmt::Display for SdgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A dense embedding vector with finite entries and non-zero norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding has no components"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding has a non-finite component"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 0.0 {
            return Err(Error::invalid("embedding has zero norm"));
        }
        Ok(Embedding { values, norm })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Euclidean norm, computed once at construction.
    pub fn norm(&self) -> f64 {
        self.norm
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Vec<f64> {
        e.values
    }
}

/// The three concept categories shared by patents and scientific documents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Function,
    Solution,
    Application,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Function, Category::Solution, Category::Application];

    pub fn name(self) -> &'static str {
        match self {
            Category::Function => "function",
            Category::Solution => "solution",
            Category::Application => "application",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A concept phrase paired with its embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub text: String,
    pub embedding: Embedding,
}

/// Function, solution and application concepts of one document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    #[serde(default)]
    pub functions: Vec<Concept>,
    #[serde(default)]
    pub solutions: Vec<Concept>,
    #[serde(default)]
    pub applications: Vec<Concept>,
}

impl ConceptSet {
    pub fn get(&self, category: Category) -> &[Concept] {
        match category {
            Category::Function => &self.functions,
            Category::Solution => &self.solutions,
            Category::Application => &self.applications,
        }
    }

    pub fn get_mut(&mut self, category: Category) -> &mut Vec<Concept> {
        match category {
            Category::Function => &mut self.functions,
            Category::Solution => &mut self.solutions,
            Category::Application => &mut self.applications,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Concept> {
        self.functions
            .iter()
            .chain(&self.solutions)
            .chain(&self.applications)
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty() && self.solutions.is_empty() && self.applications.is_empty()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        for category in Category::ALL {
            if self.get(category).iter().any(|c| c.text.trim().is_empty()) {
                return Err(format!("empty concept text in `{category}` concepts"));
            }
        }
        Ok(())
    }
}

/// A patent with its extracted concepts and NPL anchor tags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatentRecord {
    pub patent_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub concepts: ConceptSet,
    /// SDG tags of the cited scientific papers; repeated tags are kept.
    #[serde(default)]
    pub anchor_sdgs: Vec<SdgId>,
    #[serde(default)]
    pub cpc3: Vec<String>,
    #[serde(default)]
    pub inventor_ids: Vec<String>,
    #[serde(default)]
    pub applicant_ids: Vec<String>,
}

impl PatentRecord {
    /// Title and abstract joined by a blank line.
    pub fn text(&self) -> String {
        join_text(&self.title, &self.abstract_text)
    }
}

/// A scientific document pre-annotated with one or more SDGs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdgDocument {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, rename = "abstract")]
    pub abstract_text: String,
    #[serde(default)]
    pub concepts: ConceptSet,
    pub sdg_tags: BTreeSet<SdgId>,
}

impl SdgDocument {
    pub fn text(&self) -> String {
        join_text(&self.title, &self.abstract_text)
    }
}

fn join_text(title: &str, abstract_text: &str) -> String {
    match (title.is_empty(), abstract_text.is_empty()) {
        (false, false) => format!("{title}\n\n{abstract_text}"),
        (false, true) => title.to_string(),
        _ => abstract_text.to_string(),
    }
}

/// Per-SDG relevance of one patent, indexed by [`SdgId`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SdgVector([f64; SDG_COUNT]);

impl SdgVector {
    pub fn zeros() -> Self {
        SdgVector([0.0; SDG_COUNT])
    }

    pub fn from_components(components: [f64; SDG_COUNT]) -> Self {
        SdgVector(components)
    }

    pub fn get(&self, sdg: SdgId) -> f64 {
        self.0[sdg.index()]
    }

    pub fn set(&mut self, sdg: SdgId, value: f64) {
        self.0[sdg.index()] = value;
    }

    pub fn components(&self) -> &[f64; SDG_COUNT] {
        &self.0
    }

    pub fn components_mut(&mut self) -> &mut [f64; SDG_COUNT] {
        &mut self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// SDGs with a strictly positive component.
    pub fn support(&self) -> BTreeSet<SdgId> {
        SdgId::all().filter(|&s| self.get(s) > 0.0).collect()
    }
}

/// A corpus record with a unique id and validity rules beyond its serde schema.
trait CorpusRecord: DeserializeOwned + Serialize {
    fn id(&self) -> &str;
    fn concepts(&self) -> &ConceptSet;
    fn check(&self) -> std::result::Result<(), String>;
}

impl CorpusRecord for PatentRecord {
    fn id(&self) -> &str {
        &self.patent_id
    }

    fn concepts(&self) -> &ConceptSet {
        &self.concepts
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.patent_id.is_empty() {
            return Err("empty patent_id".into());
        }
        self.concepts.validate()
    }
}

impl CorpusRecord for SdgDocument {
    fn id(&self) -> &str {
        &self.doc_id
    }

    fn concepts(&self) -> &ConceptSet {
        &self.concepts
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.doc_id.is_empty() {
            return Err("empty doc_id".into());
        }
        if self.sdg_tags.is_empty() {
            return Err("empty sdg_tags".into());
        }
        self.concepts.validate()
    }
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Header {
    embedding_dim: usize,
}

/// Loads a patent corpus, rejecting malformed lines and duplicate ids.
pub fn load_patents(path: impl AsRef<Path>) -> Result<Vec<PatentRecord>> {
    load_corpus(path.as_ref())
}

/// Loads the SDG-tagged scientific corpus.
pub fn load_sdg_corpus(path: impl AsRef<Path>) -> Result<Vec<SdgDocument>> {
    load_corpus(path.as_ref())
}

pub fn write_patents(path: impl AsRef<Path>, records: &[PatentRecord]) -> Result<()> {
    write_corpus(path.as_ref(), records)
}

pub fn write_sdg_corpus(path: impl AsRef<Path>, docs: &[SdgDocument]) -> Result<()> {
    write_corpus(path.as_ref(), docs)
}

fn load_corpus<T: CorpusRecord>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let schema_err = |line: usize, message: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records: Vec<T> = Vec::new();
    let mut seen = HashSet::new();
    let mut dim: Option<usize> = None;

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 {
            if let Ok(header) = serde_json::from_str::<Header>(trimmed) {
                if header.embedding_dim == 0 {
                    return Err(schema_err(line_no, "embedding_dim must be positive".into()));
                }
                dim = Some(header.embedding_dim);
                continue;
            }
        }

        let record: T =
            serde_json::from_str(trimmed).map_err(|e| schema_err(line_no, e.to_string()))?;
        record.check().map_err(|m| schema_err(line_no, m))?;

        for concept in record.concepts().iter() {
            let d = concept.embedding.dim();
            match dim {
                None => dim = Some(d),
                Some(expected) if expected != d => {
                    return Err(schema_err(
                        line_no,
                        format!("embedding dimension {d} differs from corpus dimension {expected}"),
                    ));
                }
                Some(_) => {}
            }
        }

        if !seen.insert(record.id().to_string()) {
            return Err(Error::DuplicateId {
                id: record.id().to_string(),
                line: line_no,
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn write_corpus<T: CorpusRecord>(path: &Path, records: &[T]) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(format!("writing {}", path.display()), e);

    let dim = records
        .iter()
        .flat_map(|r| r.concepts().iter())
        .map(|c| c.embedding.dim())
        .next();
    if let Some(embedding_dim) = dim {
        serde_json::to_writer(&mut out, &Header { embedding_dim })?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Reads a JSONL file line by line into `T`, skipping blank lines.
pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Shortest round-trip text for a CSV cell, with an exponent for very
/// small or large magnitudes.
pub(crate) fn float_cell(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(format!("writing {}", path.display()), e);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
