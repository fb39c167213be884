//! Planted synthetic fixtures with known ground truth.
//!
//! Concept embeddings are built from orthogonal axes: every patent concept
//! owns one axis, and a document concept meant to score `s` against it is
//! `s * patent_axis + sqrt(1 - s^2) * own_axis`. Cosines between unrelated
//! concepts are therefore exactly zero, and planted scores are exact up to
//! rounding.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::homophily::{Graph, GraphKind, MembershipMatrix};
use crate::regressor::{LinearModel, RegressionBatch};
use crate::model::{
    Category, Concept, ConceptSet, Embedding, PatentRecord, SdgDocument, SdgId, SDG_COUNT,
};

/// A generated patent corpus with its SDG documents.
#[derive(Clone, Debug)]
pub struct Planted {
    pub patents: Vec<PatentRecord>,
    pub docs: Vec<SdgDocument>,
}

/// Sparse concept specification, densified once the axis count is known.
#[derive(Clone)]
struct Sparse(Vec<(usize, f64)>);

struct Builder {
    axes: usize,
    patents: Vec<(PatentRecord, [Vec<(String, Sparse)>; 3])>,
    docs: Vec<(SdgDocument, [Vec<(String, Sparse)>; 3])>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            axes: 0,
            patents: Vec::new(),
            docs: Vec::new(),
        }
    }

    fn axis(&mut self) -> usize {
        self.axes += 1;
        self.axes - 1
    }

    /// Adds a patent with one concept per category; returns their axes.
    fn patent(&mut self, id: String, anchors: Vec<SdgId>) -> [usize; 3] {
        let axes = [self.axis(), self.axis(), self.axis()];
        let concepts = Category::ALL.map(|c| {
            vec![(
                format!("{id} {c} concept"),
                Sparse(vec![(axes[c as usize], 1.0)]),
            )]
        });
        let record = PatentRecord {
            patent_id: id,
            title: String::new(),
            abstract_text: String::new(),
            concepts: ConceptSet::default(),
            anchor_sdgs: anchors,
            cpc3: vec![],
            inventor_ids: vec![],
            applicant_ids: vec![],
        };
        self.patents.push((record, concepts));
        axes
    }

    /// Adds a document with a single concept in `category` scoring `score`
    /// against the patent concept on `target_axis`.
    fn doc(&mut self, id: String, tags: &[SdgId], category: Category, target_axis: usize, score: f64) {
        let own = self.axis();
        let spec = Sparse(vec![(target_axis, score), (own, (1.0 - score * score).sqrt())]);
        let mut concepts: [Vec<(String, Sparse)>; 3] = Default::default();
        concepts[category as usize].push((format!("{id} {category} concept"), spec));
        let doc = SdgDocument {
            doc_id: id,
            title: String::new(),
            abstract_text: String::new(),
            concepts: ConceptSet::default(),
            sdg_tags: tags.iter().copied().collect(),
        };
        self.docs.push((doc, concepts));
    }

    fn densify(dim: usize, specs: [Vec<(String, Sparse)>; 3]) -> ConceptSet {
        let mut set = ConceptSet::default();
        for (category, list) in Category::ALL.into_iter().zip(specs) {
            for (text, Sparse(entries)) in list {
                let mut v = vec![0.0; dim];
                for (axis, value) in entries {
                    v[axis] = value;
                }
                set.get_mut(category).push(Concept {
                    text,
                    embedding: Embedding::new(v).expect("planted embedding is valid"),
                });
            }
        }
        set
    }

    fn finish(self) -> Planted {
        let dim = self.axes.max(1);
        Planted {
            patents: self
                .patents
                .into_iter()
                .map(|(mut p, specs)| {
                    p.concepts = Self::densify(dim, specs);
                    p
                })
                .collect(),
            docs: self
                .docs
                .into_iter()
                .map(|(mut d, specs)| {
                    d.concepts = Self::densify(dim, specs);
                    d
                })
                .collect(),
        }
    }
}

/// Settings for [`planted_calibration`].
#[derive(Clone, Debug)]
pub struct PlantedCalibration {
    /// Thresholds separating signal from noise, per category.
    pub tau: [f64; 3],
    /// Signal documents per patent; the loss is zero only at this top-N.
    pub top_n: usize,
    pub patents_per_category: usize,
    /// Distance between the planted threshold and the closest score on
    /// either side.
    pub margin: f64,
    /// Width of the band signal and noise scores are drawn from.
    pub spread: f64,
}

impl Default for PlantedCalibration {
    fn default() -> Self {
        PlantedCalibration {
            tau: [0.3, 0.2, 0.8],
            top_n: 4,
            patents_per_category: 6,
            margin: 0.045,
            spread: 0.1,
        }
    }
}

/// Corpus whose positive-only loss is exactly zero iff every threshold lies
/// in `(tau - margin, tau + margin]` and top-N equals the planted value.
///
/// Each patent has two anchor SDGs `a`, `b` cited in ratio `top_n - 1 : 1`.
/// Its signal documents all live in one category: one tagged `b` (best
/// score), the rest tagged `a`, all scoring above `tau + margin`. In the other
/// two categories it has noise documents tagged `{a, b}` scoring below
/// `tau - margin`; a noise document admitted by a low threshold ranks first in
/// its category, enters the top-N and breaks the anchor ratio.
pub fn planted_calibration(cfg: &PlantedCalibration, seed: u64) -> Planted {
    assert!(cfg.top_n >= 2, "planted top_n must be at least 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new();
    let mut doc_no = 0;
    let mut next_doc = || {
        doc_no += 1;
        format!("doc-{doc_no:05}")
    };

    for (ci, category) in Category::ALL.into_iter().enumerate() {
        for k in 0..cfg.patents_per_category {
            let mut sdgs: Vec<u8> = (1..=SDG_COUNT as u8).collect();
            sdgs.shuffle(&mut rng);
            let (a, bb) = (sdg(sdgs[0]), sdg(sdgs[1]));
            let mut anchors = vec![a; cfg.top_n - 1];
            anchors.push(bb);
            let id = format!("pat-{category}-{k:03}");
            let axes = b.patent(id, anchors);

            let hi = cfg.tau[ci] + cfg.margin;
            let mut signal: Vec<f64> = (0..cfg.top_n)
                .map(|_| rng.random_range(hi..hi + cfg.spread))
                .collect();
            if k == 0 {
                // Pin the edge of the optimal interval.
                signal[0] = hi;
            }
            signal.sort_by(|x, y| y.total_cmp(x));
            for (i, score) in signal.into_iter().enumerate() {
                let tag = if i == 0 { bb } else { a };
                b.doc(next_doc(), &[tag], category, axes[ci], score.min(0.999));
            }

            for (cj, other) in Category::ALL.into_iter().enumerate() {
                if cj == ci {
                    continue;
                }
                let top = cfg.tau[cj] - cfg.margin;
                let n_noise = rng.random_range(1..=2);
                for n in 0..n_noise {
                    let score = if k == 0 && n == 0 {
                        top
                    } else {
                        rng.random_range(top - cfg.spread..top)
                    };
                    b.doc(next_doc(), &[a, bb], other, axes[cj], score);
                }
            }
        }
    }
    b.finish()
}

/// Corpus where only function concepts point at the anchor SDG; solution and
/// application concepts point at unrelated SDGs.
pub fn planted_function_signal(n_patents: usize, seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new();
    let mut doc_no = 0;
    for k in 0..n_patents {
        let mut sdgs: Vec<u8> = (1..=SDG_COUNT as u8).collect();
        sdgs.shuffle(&mut rng);
        let truth = sdg(sdgs[0]);
        let axes = b.patent(format!("pat-{k:03}"), vec![truth]);
        for (ci, category) in Category::ALL.into_iter().enumerate() {
            let tag = if category == Category::Function {
                truth
            } else {
                sdg(sdgs[ci])
            };
            for _ in 0..3 {
                doc_no += 1;
                let score = rng.random_range(0.7..0.95);
                b.doc(format!("doc-{doc_no:05}"), &[tag], category, axes[ci], score);
            }
        }
    }
    b.finish()
}

/// Small hand-sized corpus: three patents, nine documents.
///
/// Patents share an inventor pair and an applicant so that every graph kind
/// has arcs. Suitable for smoke tests of the full pipeline.
pub fn fixture_corpus() -> Planted {
    let mut b = Builder::new();
    let specs: [(&str, &[u8], [u8; 3]); 3] = [
        ("US-0001", &[6, 6, 14], [6, 14, 6]),
        ("US-0002", &[7], [7, 13, 7]),
        ("US-0003", &[2, 3], [2, 3, 12]),
    ];
    let mut doc_no = 0;
    for (id, anchors, doc_tags) in specs {
        let anchors = anchors.iter().map(|&a| sdg(a)).collect();
        let axes = b.patent(id.to_string(), anchors);
        for (ci, category) in Category::ALL.into_iter().enumerate() {
            doc_no += 1;
            let score = 0.55 + 0.1 * ci as f64;
            b.doc(
                format!("W{doc_no:04}"),
                &[sdg(doc_tags[ci])],
                category,
                axes[ci],
                score,
            );
        }
    }
    let mut planted = b.finish();
    let texts = [
        (
            "Hemoglobin composite adsorbent for dye removal",
            "A hemoglobin/Fe3O4 composite adsorbent removes organic dyes and contaminants from water.",
        ),
        (
            "Solar-driven hydrogen electrolyser",
            "An electrolyser coupled to photovoltaic panels produces hydrogen for clean energy storage.",
        ),
        (
            "Drought tolerant wheat cultivar",
            "A crop breeding method improves drought tolerance and yield for food security.",
        ),
    ];
    for (i, p) in planted.patents.iter_mut().enumerate() {
        p.title = texts[i].0.to_string();
        p.abstract_text = texts[i].1.to_string();
        p.cpc3 = vec![["C02", "C25", "A01"][i].to_string()];
        p.inventor_ids = vec!["inv-a".to_string(), format!("inv-{i}")];
        p.applicant_ids = vec![if i < 2 { "acme" } else { "agri" }.to_string()];
    }
    let doc_texts = [
        "Chitin sorbents remove dyes from textile effluents",
        "Marine plastic pollution and coastal ecosystems",
        "Wastewater treatment for pollution prevention",
        "Affordable renewable electricity access",
        "Emission pathways for climate mitigation",
        "Hydrogen storage for clean energy systems",
        "Smallholder farming and hunger reduction",
        "Maternal health outcomes of malnutrition",
        "Sustainable food supply chains",
    ];
    for (d, text) in planted.docs.iter_mut().zip(doc_texts) {
        d.title = text.to_string();
    }
    planted
}

/// Uniform random SDG subset, used by property tests and examples.
pub fn random_sdg_set(rng: &mut impl Rng, max_len: usize) -> BTreeSet<SdgId> {
    let len = rng.random_range(0..=max_len.min(SDG_COUNT));
    let mut all: Vec<u8> = (1..=SDG_COUNT as u8).collect();
    all.shuffle(rng);
    all[..len].iter().map(|&s| sdg(s)).collect()
}

/// Two equal communities of `size` nodes, each a complete digraph with no
/// arcs between them. Nodes belong to their own community with factor
/// `membership` and to the other with 0, so
/// `Q(p) = 2 * (x^(2p) / 2 - x^(4p) / 16)` with `x = membership`.
pub fn planted_communities(size: usize, membership: f64) -> Result<(Graph, MembershipMatrix)> {
    let n = 2 * size;
    let mut arcs = Vec::new();
    for block in 0..2 {
        let base = (block * size) as u32;
        for a in 0..size as u32 {
            for b in 0..size as u32 {
                arcs.push((base + a, base + b));
            }
        }
    }
    let ids = (0..n).map(|i| format!("N{i:05}")).collect();
    let graph = Graph::from_arcs(GraphKind::Citation, ids, arcs)?;
    let mut values = vec![0.0; n * 2];
    for i in 0..n {
        values[i * 2 + i / size] = membership;
    }
    Ok((graph, MembershipMatrix::new(2, values)?))
}

/// Uniform random digraph with exactly `arcs` distinct loop-free arcs.
pub fn random_graph(nodes: usize, arcs: usize, seed: u64) -> Result<Graph> {
    let possible = nodes.saturating_mul(nodes.saturating_sub(1));
    if arcs > possible {
        return Err(Error::invalid(format!("{arcs} arcs do not fit in {nodes} nodes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set: Vec<(u32, u32)> = Vec::with_capacity(arcs);
    while set.len() < arcs {
        let missing = arcs - set.len();
        for _ in 0..missing + missing / 16 + 1 {
            let s = rng.random_range(0..nodes as u32);
            let d = rng.random_range(0..nodes as u32);
            if s != d {
                set.push((s, d));
            }
        }
        set.sort_unstable();
        set.dedup();
        if set.len() > arcs {
            set.shuffle(&mut rng);
            set.truncate(arcs);
        }
    }
    let ids = (0..nodes).map(|i| format!("N{i:05}")).collect();
    Graph::from_arcs(GraphKind::Citation, ids, set)
}

/// Independent uniform memberships in `[0, 1)`.
pub fn random_memberships(nodes: usize, communities: usize, seed: u64) -> Result<MembershipMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..nodes * communities).map(|_| rng.random::<f64>()).collect();
    MembershipMatrix::new(communities, values)
}

/// Features uniform in `[-1, 1]` with targets `max(0, x W* + b*)` from a
/// hidden model whose bias keeps most units active. Full-batch gradient
/// descent is stable on it for `lr <= 0.5`.
pub fn planted_regression(rows: usize, dim: usize, seed: u64) -> Result<(RegressionBatch, LinearModel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let truth = LinearModel {
        weights: Array2::from_shape_simple_fn((dim, SDG_COUNT), || normal.sample(&mut rng)),
        bias: Array1::from_shape_simple_fn(SDG_COUNT, || rng.random_range(0.2..0.6)),
    };
    let features = Array2::from_shape_simple_fn((rows, dim), || rng.random_range(-1.0..1.0));
    let targets = truth.predict(features.view())?;
    Ok((RegressionBatch::new(features, targets)?, truth))
}

fn sdg(n: u8) -> SdgId {
    SdgId::new(n).expect("valid SDG")
}

/// Mean concept embedding of each patent, a stand-in for text features.
pub fn fixture_features(patents: &[PatentRecord]) -> Vec<(String, Vec<f64>)> {
    patents
        .iter()
        .map(|p| {
            let dim = p.concepts.iter().next().map_or(0, |c| c.embedding.dim());
            let mut mean = vec![0.0; dim];
            let n = p.concepts.iter().count().max(1) as f64;
            for c in p.concepts.iter() {
                for (m, v) in mean.iter_mut().zip(c.embedding.values()) {
                    *m += v / n;
                }
            }
            (p.patent_id.clone(), mean)
        })
        .collect()
}

pub const FIXTURE_CITATIONS: &str = "src_id,dst_id\nUS-0001,US-0002\nUS-0002,US-0003\n";

pub const FIXTURE_QUERY: &str = "TITLE-ABS-KEY(\"drinking water\" OR \"sanitation\" OR \"wastewater\") \
AND (AUTHKEY(rural) OR AUTHKEY(\"developing countries\")) AND NOT TITLE(\"review\")\n";

pub const FIXTURE_SPACE: &str = r#"{
  "tau_function": [0.3, 0.9],
  "tau_solution": [0.3, 0.9],
  "tau_application": [0.3, 0.9],
  "top_n": [1, 2, 3],
  "budget": 40
}
"#;

pub const FIXTURE_CONFIG: &str = r#"seed = 7
out_dir = "out"

[paths]
patents = "patents.jsonl"
sdg_corpus = "sdg_corpus.jsonl"
citations = "citations.csv"
features = "features.jsonl"

[labeling]
tau_function = 0.5
tau_solution = 0.5
tau_application = 0.5
top_n = 3
categories = ["function", "solution"]

[calibration]
validation_fraction = 0.4
strategy = "tpe"

[modularity]
ps = [0.35, 0.5, 0.75, 1.0]
kinds = ["citation", "inventor", "applicant"]
methods = ["silver", "npl", "cpc"]

[regression]
lr = 0.1
epochs = 200
test_fraction = 0.34
"#;

/// Writes the [`fixture_corpus`] and its companion files into `dir`.
pub fn write_fixture_dir(dir: &std::path::Path) -> Result<()> {
    let planted = fixture_corpus();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    crate::model::write_patents(dir.join("patents.jsonl"), &planted.patents)?;
    crate::model::write_sdg_corpus(dir.join("sdg_corpus.jsonl"), &planted.docs)?;
    crate::regressor::write_features(&dir.join("features.jsonl"), &fixture_features(&planted.patents))?;
    for (name, text) in [
        ("citations.csv", FIXTURE_CITATIONS),
        ("query.txt", FIXTURE_QUERY),
        ("space.json", FIXTURE_SPACE),
        ("config.toml", FIXTURE_CONFIG),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{label_patent, CategorySet, HyperParams, SdgCorpus};
    use crate::calibration::Calibrator;

    #[test]
    fn planted_optimum_has_zero_loss() {
        let cfg = PlantedCalibration::default();
        let planted = planted_calibration(&cfg, 5);
        let corpus = SdgCorpus::new(planted.docs).unwrap();
        let cal = Calibrator::new(&planted.patents, &corpus, CategorySet::ALL).unwrap();
        let at = |t: [f64; 3], top_n| HyperParams {
            tau_function: t[0],
            tau_solution: t[1],
            tau_application: t[2],
            top_n,
            rrf_k: 60.0,
        };
        assert_eq!(cal.objective(&at(cfg.tau, 4)).unwrap(), 0.0);
        assert_eq!(cal.objective(&at([0.34, 0.16, 0.845], 4)).unwrap(), 0.0);
        for top_n in [2, 3, 5, 6, 8] {
            assert!(cal.objective(&at(cfg.tau, top_n)).unwrap() > 0.0);
        }
        for ci in 0..3 {
            for delta in [-0.046, 0.046] {
                let mut t = cfg.tau;
                t[ci] += delta;
                assert!(cal.objective(&at(t, 4)).unwrap() > 0.0, "{ci} {delta}");
            }
        }
    }

    #[test]
    fn fixture_labels_every_patent() {
        let planted = fixture_corpus();
        let corpus = SdgCorpus::new(planted.docs).unwrap();
        let params = HyperParams {
            tau_function: 0.5,
            tau_solution: 0.5,
            tau_application: 0.5,
            top_n: 3,
            rrf_k: 60.0,
        };
        for p in &planted.patents {
            let l = label_patent(p, &corpus, &params, CategorySet::ALL).unwrap();
            assert!(!l.no_match);
        }
    }

    #[test]
    fn planted_communities_closed_form() {
        use crate::homophily::overlapping_modularity;
        let x: f64 = 0.5;
        let (g, w) = planted_communities(5, x).unwrap();
        assert_eq!(g.arc_count(), 40);
        for p in [0.35, 0.5, 1.0] {
            let y = x.powf(2.0 * p);
            let expect = 2.0 * (y / 2.0 - y * y / 16.0);
            assert!((overlapping_modularity(&g, &w, p).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn random_graph_has_exact_arc_count() {
        let g = random_graph(30, 200, 1).unwrap();
        assert_eq!(g.arc_count(), 200);
        assert!(random_graph(3, 7, 1).is_err());
    }

    #[test]
    fn planted_regression_is_learnable() {
        use crate::regressor::{train, TrainConfig};
        let (batch, _) = planted_regression(200, 8, 3).unwrap();
        let cfg = TrainConfig {
            lr: 0.2,
            epochs: 500,
            ..Default::default()
        };
        let t = train(&batch, &cfg).unwrap();
        assert!(*t.history.last().unwrap() < 1e-3, "{:?}", t.history.last());
        // Allow rounding noise once the loss reaches the float floor.
        assert!(t.history.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }
}
