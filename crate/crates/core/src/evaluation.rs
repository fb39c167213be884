//! Internal evaluation of labelings: binarized recall against citation
//! anchors, category ablations, a BM25 lexical baseline, SDG co-occurrence
//! matrices and correlation statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{label_corpus, CategorySet, HyperParams, SdgCorpus};
use crate::error::{Error, Result};
use crate::model::{float_cell, PatentRecord, SdgId, SdgVector, SDG_COUNT};

pub type LabelSet = BTreeSet<SdgId>;

/// SDGs with a strictly positive component.
pub fn binarize(v: &SdgVector) -> LabelSet {
    v.support()
}

/// Distinct anchor SDGs of every anchored patent.
pub fn anchor_labels(patents: &[PatentRecord]) -> BTreeMap<String, LabelSet> {
    patents
        .iter()
        .filter(|p| !p.anchor_sdgs.is_empty())
        .map(|p| (p.patent_id.clone(), p.anchor_sdgs.iter().copied().collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SdgRecall {
    pub sdg: SdgId,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallReport {
    /// Unweighted mean over SDGs that occur in the references.
    pub macro_recall: f64,
    /// Pooled `sum TP / sum (TP + FN)` over all (patent, SDG) reference pairs.
    pub micro_recall: f64,
    pub per_sdg: Vec<SdgRecall>,
}

/// Macro and micro recall of `preds` against `refs`.
///
/// Only reference labels count; extra predicted labels are never penalized.
pub fn recall_scores(
    preds: &BTreeMap<String, LabelSet>,
    refs: &BTreeMap<String, LabelSet>,
) -> Result<RecallReport> {
    if refs.is_empty() {
        return Err(Error::invalid("reference label map is empty"));
    }
    let mut tp = [0usize; SDG_COUNT];
    let mut fn_ = [0usize; SDG_COUNT];
    for (id, reference) in refs {
        let predicted = preds
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no prediction for reference id `{id}`")))?;
        for sdg in reference {
            if predicted.contains(sdg) {
                tp[sdg.index()] += 1;
            } else {
                fn_[sdg.index()] += 1;
            }
        }
    }

    let per_sdg: Vec<SdgRecall> = SdgId::all()
        .filter(|s| tp[s.index()] + fn_[s.index()] > 0)
        .map(|s| {
            let (t, f) = (tp[s.index()], fn_[s.index()]);
            SdgRecall {
                sdg: s,
                true_positives: t,
                false_negatives: f,
                recall: t as f64 / (t + f) as f64,
            }
        })
        .collect();
    if per_sdg.is_empty() {
        return Err(Error::invalid("reference labels contain no SDG"));
    }
    let macro_recall = per_sdg.iter().map(|r| r.recall).sum::<f64>() / per_sdg.len() as f64;
    let total_tp: usize = tp.iter().sum();
    let total: usize = total_tp + fn_.iter().sum::<usize>();
    Ok(RecallReport {
        macro_recall,
        micro_recall: total_tp as f64 / total as f64,
        per_sdg,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub categories: String,
    pub macro_recall: f64,
    pub micro_recall: f64,
}

/// Recall of the labeling function for each category subset, against the
/// distinct anchor SDGs of every anchored patent.
pub fn ablation_suite(
    corpus: &SdgCorpus,
    patents: &[PatentRecord],
    params: &HyperParams,
    subsets: &[CategorySet],
) -> Result<Vec<AblationRow>> {
    if subsets.is_empty() {
        return Err(Error::invalid("no category subsets given"));
    }
    let refs = anchor_labels(patents);
    let anchored: Vec<PatentRecord> = patents
        .iter()
        .filter(|p| refs.contains_key(&p.patent_id))
        .cloned()
        .collect();
    subsets
        .iter()
        .map(|&subset| {
            let preds = label_corpus(&anchored, corpus, params, subset)?
                .into_iter()
                .map(|r| (r.patent_id, binarize(&r.sdg_vector)))
                .collect();
            let report = recall_scores(&preds, &refs)?;
            Ok(AblationRow {
                categories: subset.to_string(),
                macro_recall: report.macro_recall,
                micro_recall: report.micro_recall,
            })
        })
        .collect()
}

/// Lowercased alphanumeric tokens; everything else separates.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over an in-memory document collection.
#[derive(Clone, Debug)]
pub struct Bm25Index {
    ids: Vec<String>,
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn new<I, S>(docs: I, k1: f64, b: f64) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: AsRef<str>,
    {
        let mut ids = Vec::new();
        let mut term_freqs = Vec::new();
        let mut doc_lens = Vec::new();
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for (id, text) in docs {
            let tokens = tokenize(text.as_ref());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in tokens.iter() {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            ids.push(id.as_ref().to_string());
            doc_lens.push(tokens.len());
            term_freqs.push(tf);
        }
        if ids.is_empty() {
            return Err(Error::invalid("BM25 needs at least one document"));
        }
        let avg_len = doc_lens.iter().sum::<usize>() as f64 / ids.len() as f64;
        Ok(Bm25Index {
            ids,
            term_freqs,
            doc_lens,
            doc_freq,
            avg_len,
            k1,
            b,
        })
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores every document; each distinct query term counts once.
    /// Sorted by descending score, ties by ascending id.
    pub fn score(&self, query: &str) -> Vec<(String, f64)> {
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let idfs: Vec<(&String, f64)> = terms.iter().map(|t| (t, self.idf(t))).collect();
        let mut scored: Vec<(String, f64)> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let len_norm = if self.avg_len > 0.0 {
                    self.doc_lens[i] as f64 / self.avg_len
                } else {
                    0.0
                };
                let score = idfs
                    .iter()
                    .map(|&(t, idf)| {
                        let tf = self.term_freqs[i].get(t).copied().unwrap_or(0) as f64;
                        if tf == 0.0 {
                            0.0
                        } else {
                            idf * tf * (self.k1 + 1.0)
                                / (tf + self.k1 * (1.0 - self.b + self.b * len_norm))
                        }
                    })
                    .sum();
                (id.clone(), score)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored
    }
}

/// BM25 scores of `query` against `(id, text)` documents.
pub fn bm25_scores(query: &str, docs: &[(String, String)], k1: f64, b: f64) -> Result<Vec<(String, f64)>> {
    Ok(Bm25Index::new(docs.iter().map(|(i, t)| (i.as_str(), t.as_str())), k1, b)?.score(query))
}

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Lexical baseline: union of SDG tags over each patent's `top_k` BM25 hits
/// (hits with zero score are ignored).
pub fn bm25_labels(
    patents: &[PatentRecord],
    corpus: &SdgCorpus,
    top_k: usize,
) -> Result<BTreeMap<String, LabelSet>> {
    let texts: Vec<(String, String)> = corpus
        .docs()
        .iter()
        .map(|d| (d.doc_id.clone(), d.text()))
        .collect();
    let index = Bm25Index::new(texts.iter().map(|(i, t)| (i.as_str(), t.as_str())), BM25_K1, BM25_B)?;
    let by_id: HashMap<&str, &LabelSet> = corpus
        .docs()
        .iter()
        .map(|d| (d.doc_id.as_str(), &d.sdg_tags))
        .collect();
    Ok(patents
        .iter()
        .map(|p| {
            let labels = index
                .score(&p.text())
                .into_iter()
                .take(top_k)
                .filter(|(_, s)| *s > 0.0)
                .flat_map(|(id, _)| by_id[id.as_str()].iter().copied())
                .collect();
            (p.patent_id.clone(), labels)
        })
        .collect())
}

#[derive(Deserialize, Serialize)]
struct LabelRow {
    patent_id: String,
    sdgs: Vec<SdgId>,
}

/// Reads externally produced predictions, one `{"patent_id", "sdgs"}` per line.
pub fn load_label_sets(path: &Path) -> Result<BTreeMap<String, LabelSet>> {
    let rows: Vec<LabelRow> = crate::model::read_jsonl(path)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.patent_id, r.sdgs.into_iter().collect()))
        .collect())
}

/// 17x17 SDG co-occurrence matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CoocMatrix {
    pub values: [[f64; SDG_COUNT]; SDG_COUNT],
    pub normalized: bool,
}

impl CoocMatrix {
    pub fn get(&self, i: SdgId, j: SdgId) -> f64 {
        self.values[i.index()][j.index()]
    }

    /// Off-diagonal entries in row-major order.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(SDG_COUNT * (SDG_COUNT - 1));
        for i in 0..SDG_COUNT {
            for j in 0..SDG_COUNT {
                if i != j {
                    out.push(self.values[i][j]);
                }
            }
        }
        out
    }
}

/// Counts, for each SDG pair, the label sets containing both.
pub fn cooccurrence(labels: &[LabelSet]) -> CoocMatrix {
    let mut values = [[0.0; SDG_COUNT]; SDG_COUNT];
    for set in labels {
        let members: Vec<usize> = set.iter().map(|s| s.index()).collect();
        for (k, &i) in members.iter().enumerate() {
            for &j in &members[k + 1..] {
                values[i][j] += 1.0;
                values[j][i] += 1.0;
            }
        }
    }
    CoocMatrix {
        values,
        normalized: false,
    }
}

/// Scales each non-zero row to sum to one, giving `P(j | i)`.
pub fn row_normalize(m: &CoocMatrix) -> CoocMatrix {
    let mut values = m.values;
    for row in values.iter_mut() {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    CoocMatrix {
        values,
        normalized: true,
    }
}

/// Number of label sets containing each SDG.
pub fn sdg_frequencies(labels: &[LabelSet]) -> [usize; SDG_COUNT] {
    let mut counts = [0; SDG_COUNT];
    for set in labels {
        for s in set {
            counts[s.index()] += 1;
        }
    }
    counts
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "correlation inputs differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::invalid("correlation needs at least 3 points"));
    }
    Ok(())
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation undefined for zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && x[order[end + 1]] == x[order[start]] {
            end += 1;
        }
        let mean = (start + end) as f64 / 2.0 + 1.0;
        for &i in &order[start..=end] {
            ranks[i] = mean;
        }
        start = end + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

pub fn write_recall_csv(path: &Path, report: &RecallReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["sdg", "true_positives", "false_negatives", "recall"])?;
    for r in &report.per_sdg {
        w.write_record([
            r.sdg.to_string(),
            r.true_positives.to_string(),
            r.false_negatives.to_string(),
            float_cell(r.recall),
        ])?;
    }
    w.write_record(["macro", "", "", &float_cell(report.macro_recall)])?;
    w.write_record(["micro", "", "", &float_cell(report.micro_recall)])?;
    w.flush().map_err(|e| Error::io("writing recall table", e))
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["categories", "macro_recall", "micro_recall"])?;
    for r in rows {
        w.write_record([
            r.categories.clone(),
            float_cell(r.macro_recall),
            float_cell(r.micro_recall),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing ablation table", e))
}

pub fn write_matrix_csv(path: &Path, m: &CoocMatrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["sdg".to_string()];
    header.extend(SdgId::all().map(|s| s.to_string()));
    w.write_record(&header)?;
    for (i, row) in m.values.iter().enumerate() {
        let mut rec = vec![SdgId::from_index(i).to_string()];
        rec.extend(row.iter().map(|&v| float_cell(v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("writing matrix", e))
}

/// Per-SDG counts for several labelings side by side.
pub fn write_histogram_csv(path: &Path, columns: &[(&str, [usize; SDG_COUNT])]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["sdg"];
    header.extend(columns.iter().map(|(name, _)| *name));
    w.write_record(&header)?;
    for s in SdgId::all() {
        let mut rec = vec![s.to_string()];
        rec.extend(columns.iter().map(|(_, c)| c[s.index()].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("writing histogram", e))
}
