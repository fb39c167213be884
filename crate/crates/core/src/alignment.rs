//! The labeling function: per-category concept similarity, threshold
//! filtering, reciprocal rank fusion and top-N SDG vector derivation.
//!
//! Every ranking in this module breaks score ties by ascending `doc_id`.
//! [`SdgCorpus`] stores documents sorted by id, so a document's position in
//! the corpus doubles as its tie-break key.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, ConceptSet, Embedding, PatentRecord, SdgDocument, SdgVector};

/// Free parameters of the labeling function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub tau_function: f64,
    pub tau_solution: f64,
    pub tau_application: f64,
    pub top_n: usize,
    #[serde(default = "default_rrf_k")]
    pub rrf_k: f64,
}

fn default_rrf_k() -> f64 {
    60.0
}

impl HyperParams {
    /// The calibrated optimum reported for the full patent corpus.
    pub fn reference_optimum() -> Self {
        HyperParams {
            tau_function: 0.260,
            tau_solution: 0.165,
            tau_application: 0.873,
            top_n: 30,
            rrf_k: default_rrf_k(),
        }
    }

    pub fn tau(&self, category: Category) -> f64 {
        match category {
            Category::Function => self.tau_function,
            Category::Solution => self.tau_solution,
            Category::Application => self.tau_application,
        }
    }

    pub fn set_tau(&mut self, category: Category, tau: f64) {
        match category {
            Category::Function => self.tau_function = tau,
            Category::Solution => self.tau_solution = tau,
            Category::Application => self.tau_application = tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for category in Category::ALL {
            let tau = self.tau(category);
            if !(-1.0..=1.0).contains(&tau) {
                return Err(Error::invalid(format!("tau_{category} = {tau} outside [-1, 1]")));
            }
        }
        if self.top_n == 0 {
            return Err(Error::invalid("top_n must be at least 1"));
        }
        if !(self.rrf_k > 0.0 && self.rrf_k.is_finite()) {
            return Err(Error::invalid(format!("rrf_k = {} must be positive", self.rrf_k)));
        }
        Ok(())
    }
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams::reference_optimum()
    }
}

/// A non-empty subset of the concept categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CategorySet(u8);

impl CategorySet {
    pub const ALL: CategorySet = CategorySet(0b111);
    /// The configuration used for silver-label production: the application
    /// channel is dropped.
    pub const SILVER: CategorySet = CategorySet(0b011);

    pub fn new(categories: &[Category]) -> Result<Self> {
        let bits = categories.iter().fold(0u8, |acc, &c| acc | Self::bit(c));
        if bits == 0 {
            return Err(Error::invalid("category subset must not be empty"));
        }
        Ok(CategorySet(bits))
    }

    fn bit(category: Category) -> u8 {
        match category {
            Category::Function => 0b001,
            Category::Solution => 0b010,
            Category::Application => 0b100,
        }
    }

    pub fn contains(self, category: Category) -> bool {
        self.0 & Self::bit(category) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Category> {
        Category::ALL.into_iter().filter(move |&c| self.contains(c))
    }

    /// Parses `function+solution` style names, or `all`.
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::ALL);
        }
        let mut categories = Vec::new();
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            let category = match part.to_ascii_lowercase().as_str() {
                "function" | "functions" => Category::Function,
                "solution" | "solutions" => Category::Solution,
                "application" | "applications" => Category::Application,
                other => return Err(Error::invalid(format!("unknown category `{other}`"))),
            };
            categories.push(category);
        }
        Self::new(&categories)
    }
}

impl fmt::Display for CategorySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Category::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl Serialize for CategorySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for CategorySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let categories = Vec::<Category>::deserialize(d)?;
        CategorySet::new(&categories).map_err(serde::de::Error::custom)
    }
}

/// The seven category configurations of the ablation study, full model first.
pub const ABLATION_CONFIGS: [CategorySet; 7] = [
    CategorySet(0b111),
    CategorySet(0b110),
    CategorySet(0b101),
    CategorySet(0b011),
    CategorySet(0b001),
    CategorySet(0b010),
    CategorySet(0b100),
];

/// SDG documents sorted by `doc_id`.
#[derive(Clone, Debug)]
pub struct SdgCorpus {
    docs: Vec<SdgDocument>,
}

impl SdgCorpus {
    pub fn new(mut docs: Vec<SdgDocument>) -> Result<Self> {
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        if let Some(pair) = docs.windows(2).find(|w| w[0].doc_id == w[1].doc_id) {
            return Err(Error::invalid(format!("duplicate doc_id `{}`", pair[0].doc_id)));
        }
        Ok(SdgCorpus { docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[SdgDocument] {
        &self.docs
    }

    pub fn doc(&self, index: usize) -> &SdgDocument {
        &self.docs[index]
    }

    pub fn doc_id(&self, index: usize) -> &str {
        &self.docs[index].doc_id
    }
}

/// Cosine similarity of two embeddings of equal dimension.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

/// Best cosine match between the patent's and the document's concepts in one
/// category, or `None` when either side has no concepts there.
pub fn doc_category_score(
    patent: &ConceptSet,
    doc: &ConceptSet,
    category: Category,
) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for p in patent.get(category) {
        for d in doc.get(category) {
            let s = cosine(&p.embedding, &d.embedding)?;
            best = Some(best.map_or(s, |b| b.max(s)));
        }
    }
    Ok(best)
}

/// A document position in an [`SdgCorpus`] with its score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedDoc {
    pub doc: usize,
    pub score: f64,
}

fn sort_ranked(entries: &mut [RankedDoc]) {
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.doc.cmp(&b.doc)));
}

/// Thresholded similarity ranking for one category; position 0 is rank 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryRanking {
    pub category: Category,
    pub entries: Vec<RankedDoc>,
}

/// Documents ordered by fused reciprocal-rank score.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusedRanking {
    pub entries: Vec<RankedDoc>,
}

/// Similarities of one patent against every document, per category.
///
/// Computing these once lets calibration re-rank under many thresholds
/// without touching embeddings again.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PatentScores {
    by_category: [Vec<RankedDoc>; 3],
}

impl PatentScores {
    /// Builds from explicit per-category `(doc position, score)` lists.
    pub fn from_scores(
        functions: Vec<RankedDoc>,
        solutions: Vec<RankedDoc>,
        applications: Vec<RankedDoc>,
    ) -> Self {
        PatentScores {
            by_category: [functions, solutions, applications],
        }
    }

    pub fn scores(&self, category: Category) -> &[RankedDoc] {
        &self.by_category[category as usize]
    }

    pub fn ranking(&self, category: Category, tau: f64) -> CategoryRanking {
        let mut entries: Vec<RankedDoc> = self
            .scores(category)
            .iter()
            .copied()
            .filter(|r| r.score >= tau)
            .collect();
        sort_ranked(&mut entries);
        CategoryRanking { category, entries }
    }

    pub fn fuse(&self, params: &HyperParams, categories: CategorySet) -> FusedRanking {
        let rankings: Vec<CategoryRanking> = categories
            .iter()
            .map(|c| self.ranking(c, params.tau(c)))
            .collect();
        fuse(&rankings, params.rrf_k)
    }

    pub fn label(
        &self,
        corpus: &SdgCorpus,
        params: &HyperParams,
        categories: CategorySet,
    ) -> Result<Labeling> {
        params.validate()?;
        sdg_vector(&self.fuse(params, categories), corpus, params.top_n)
    }
}

fn category_scores(
    patent: &ConceptSet,
    corpus: &SdgCorpus,
    category: Category,
) -> Result<Vec<RankedDoc>> {
    let mut out = Vec::new();
    for (doc, d) in corpus.docs().iter().enumerate() {
        if let Some(score) = doc_category_score(patent, &d.concepts, category)? {
            out.push(RankedDoc { doc, score });
        }
    }
    Ok(out)
}

pub fn score_patent(patent: &PatentRecord, corpus: &SdgCorpus) -> Result<PatentScores> {
    Ok(PatentScores {
        by_category: [
            category_scores(&patent.concepts, corpus, Category::Function)?,
            category_scores(&patent.concepts, corpus, Category::Solution)?,
            category_scores(&patent.concepts, corpus, Category::Application)?,
        ],
    })
}

/// Documents whose best concept match in `category` reaches `tau`, best first.
pub fn category_ranking(
    patent: &PatentRecord,
    corpus: &SdgCorpus,
    category: Category,
    tau: f64,
) -> Result<CategoryRanking> {
    if corpus.is_empty() {
        return Err(Error::invalid("SDG corpus is empty"));
    }
    let mut entries = category_scores(&patent.concepts, corpus, category)?;
    entries.retain(|r| r.score >= tau);
    sort_ranked(&mut entries);
    Ok(CategoryRanking { category, entries })
}

/// Reciprocal rank fusion with 1-based ranks: each document scores
/// `sum 1/(rrf_k + rank)` over the rankings it appears in.
pub fn rrf_fuse(rankings: &[CategoryRanking], rrf_k: f64) -> Result<FusedRanking> {
    if !(rrf_k > 0.0 && rrf_k.is_finite()) {
        return Err(Error::invalid(format!("rrf_k = {rrf_k} must be positive")));
    }
    Ok(fuse(rankings, rrf_k))
}

fn fuse(rankings: &[CategoryRanking], rrf_k: f64) -> FusedRanking {
    let mut terms: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ranking in rankings {
        for (pos, entry) in ranking.entries.iter().enumerate() {
            let rank = (pos + 1) as f64;
            terms.entry(entry.doc).or_default().push(1.0 / (rrf_k + rank));
        }
    }
    let mut entries: Vec<RankedDoc> = terms
        .into_iter()
        .map(|(doc, mut t)| {
            // Summing in a canonical order makes equal rank multisets tie exactly.
            t.sort_by(f64::total_cmp);
            RankedDoc {
                doc,
                score: t.iter().sum(),
            }
        })
        .collect();
    sort_ranked(&mut entries);
    FusedRanking { entries }
}

/// Output of the labeling function for one patent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Labeling {
    pub vector: SdgVector,
    /// True when no document survived any threshold.
    pub no_match: bool,
}

/// Counts SDG tags over the first `top_n` fused documents, divided by `top_n`.
pub fn sdg_vector(fused: &FusedRanking, corpus: &SdgCorpus, top_n: usize) -> Result<Labeling> {
    if top_n == 0 {
        return Err(Error::invalid("top_n must be at least 1"));
    }
    let mut counts = [0usize; crate::model::SDG_COUNT];
    for entry in fused.entries.iter().take(top_n) {
        for tag in &corpus.doc(entry.doc).sdg_tags {
            counts[tag.index()] += 1;
        }
    }
    let mut vector = SdgVector::zeros();
    for (component, count) in vector.components_mut().iter_mut().zip(counts) {
        *component = count as f64 / top_n as f64;
    }
    Ok(Labeling {
        vector,
        no_match: fused.entries.is_empty(),
    })
}

/// Full labeling function for one patent over the selected categories.
pub fn label_patent(
    patent: &PatentRecord,
    corpus: &SdgCorpus,
    params: &HyperParams,
    categories: CategorySet,
) -> Result<Labeling> {
    params.validate()?;
    let mut rankings = Vec::with_capacity(3);
    for category in categories.iter() {
        rankings.push(category_ranking(patent, corpus, category, params.tau(category))?);
    }
    let fused = rrf_fuse(&rankings, params.rrf_k)?;
    sdg_vector(&fused, corpus, params.top_n)
}

/// One row of the silver-standard output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilverRecord {
    pub patent_id: String,
    pub sdg_vector: SdgVector,
    pub no_match: bool,
    pub params: SilverParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SilverParams {
    #[serde(flatten)]
    pub hyper: HyperParams,
    pub categories: CategorySet,
}

/// Labels every patent in parallel, preserving input order.
pub fn label_corpus(
    patents: &[PatentRecord],
    corpus: &SdgCorpus,
    params: &HyperParams,
    categories: CategorySet,
) -> Result<Vec<SilverRecord>> {
    params.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("SDG corpus is empty"));
    }
    patents
        .par_iter()
        .map(|p| {
            let labeling = score_patent(p, corpus)?.label(corpus, params, categories)?;
            if labeling.no_match {
                log::debug!("patent {} matched no SDG document", p.patent_id);
            }
            Ok(SilverRecord {
                patent_id: p.patent_id.clone(),
                sdg_vector: labeling.vector,
                no_match: labeling.no_match,
                params: SilverParams {
                    hyper: *params,
                    categories,
                },
            })
        })
        .collect()
}

pub fn write_silver(path: &std::path::Path, records: &[SilverRecord]) -> Result<()> {
    crate::model::write_jsonl(path, records)
}

/// Reads silver output, rejecting duplicate patent ids.
pub fn load_silver(path: &std::path::Path) -> Result<Vec<SilverRecord>> {
    let records: Vec<SilverRecord> = crate::model::read_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert(r.patent_id.as_str()) {
            return Err(Error::DuplicateId {
                id: r.patent_id.clone(),
                line: i + 1,
            });
        }
    }
    Ok(records)
}
